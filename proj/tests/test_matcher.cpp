#include <doctest.h>

#include <random>
#include <sstream>
#include <vector>

#include "hnc/errors.hpp"
#include "hnc/matcher.hpp"

using namespace hnc;

TEST_CASE("identity-like cost picks the diagonal") {
    CostMatrix c(3, 3, {0, 5, 5, 5, 0, 5, 5, 5, 0});
    const auto a = hungarian(c);
    CHECK(a.query_of_object == std::vector<std::size_t>{0, 1, 2});
    CHECK(a.cost == 0.0);
}

TEST_CASE("classic 3x3 example") {
    // rows are queries, columns objects
    CostMatrix c(3, 3, {4, 1, 3, 2, 0, 5, 3, 2, 2});
    const auto a = hungarian(c);
    CHECK(a.cost == 5.0);
    CHECK(a.query_of_object == brute_force_assignment(c).query_of_object);
}

TEST_CASE("more queries than objects") {
    CostMatrix c(4, 2, {9, 9, 1, 9, 9, 1, 9, 9});
    const auto a = hungarian(c);
    CHECK(a.query_of_object == std::vector<std::size_t>{1, 2});
    CHECK(a.cost == 2.0);
}

TEST_CASE("all-equal costs resolve to the lexicographically smallest assignment") {
    CostMatrix c(4, 3, std::vector<double>(12, 1.0));
    CHECK(hungarian(c).query_of_object == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("random agreement with brute force") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t n = 1; n <= 6; ++n)
        for (int t = 0; t < 60; ++t) {
            CostMatrix c(n + t % 3, n);
            for (auto& v : c.entries) v = t % 2 ? std::floor(u(rng) * 3.0) : u(rng);
            const auto a = hungarian(c), b = brute_force_assignment(c);
            CHECK(a.cost == b.cost);
            CHECK(a.query_of_object == b.query_of_object);
        }
}

TEST_CASE("shape and value errors") {
    CHECK_THROWS_AS(CostMatrix(2, 2, {1.0, 2.0, 3.0}), Error);
    try {
        hungarian(CostMatrix(2, 3));
        FAIL("expected InfeasibleShape");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::InfeasibleShape);
    }
    CostMatrix nan(2, 2, {0.0, 1.0, std::nan(""), 2.0});
    CHECK_THROWS_AS(hungarian(nan), Error);
    CHECK(hungarian(CostMatrix(3, 0)).query_of_object.empty());
}

TEST_CASE("build_cost combines class score and box L1") {
    std::vector<QueryPrediction> preds(2);
    preds[0].class_scores = {0.9, 0.1};
    preds[0].box = {0.5, 0.5, 0.2, 0.2};
    preds[1].class_scores = {0.2, 0.7};
    preds[1].box = {0.1, 0.1, 0.1, 0.1};
    const std::vector<GroundTruth> gts{{1, {0.1, 0.1, 0.1, 0.2}}};
    const auto c = build_cost(preds, gts, 2.0, 5.0);
    CHECK(c(0, 0) == doctest::Approx(2.0 * 0.9 + 5.0 * (0.4 + 0.4 + 0.1 + 0.0)));
    CHECK(c(1, 0) == doctest::Approx(2.0 * 0.3 + 5.0 * 0.1));
    const std::vector<GroundTruth> bad_box{{0, {0.1, 1.2, 0.1, 0.1}}};
    try {
        build_cost(preds, bad_box, 1.0, 1.0);
        FAIL("expected BoxRange");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::BoxRange);
    }
}

TEST_CASE("instability counts changed objects") {
    const std::vector<AssignmentRecord> a{{"s0", 1, {0, 3}}, {"s1", 1, {2}}};
    const std::vector<AssignmentRecord> same{{"s1", 2, {2}}, {"s0", 2, {0, 3}}};
    const std::vector<AssignmentRecord> churn{{"s0", 2, {0, 4}}, {"s1", 2, {5}}};
    CHECK(instability(a, same) == 0.0);
    CHECK(instability(a, churn) == doctest::Approx(2.0 / 3.0));
    const std::vector<AssignmentRecord> missing{{"s0", 2, {0, 3}}, {"s9", 2, {1}}};
    CHECK_THROWS_AS(instability(a, missing), Error);
    const std::vector<AssignmentRecord> shorter{{"s0", 2, {0}}, {"s1", 2, {2}}};
    CHECK_THROWS_AS(instability(a, shorter), Error);
}

TEST_CASE("assignment CSV round trip") {
    const std::vector<AssignmentRecord> recs{{"s0", 1, {0, 3}}, {"s1", 1, {2}}, {"s0", 2, {1, 3}}};
    std::ostringstream out;
    write_assignment_csv(out, recs);
    CHECK(out.str().rfind(std::string(kAssignmentCsvHeader) + "\n", 0) == 0);
    std::istringstream in(out.str());
    const auto back = read_assignment_csv(in);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].scene_id == recs[i].scene_id);
        CHECK(back[i].epoch == recs[i].epoch);
        CHECK(back[i].assigned_query == recs[i].assigned_query);
    }
    std::istringstream bad("scene,epoch\n");
    CHECK_THROWS_AS(read_assignment_csv(bad), Error);
}

#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "hnc/errors.hpp"
#include "hnc/proxy_loss.hpp"

using namespace hnc;

namespace {

std::vector<double> col(const PrototypeFrame& f, std::size_t k) {
    const auto c = f.column(k);
    return {c.begin(), c.end()};
}

double fd_component(const std::vector<double>& q, std::size_t c, std::size_t pos, const PrototypeFrame& f,
                    Metric m) {
    const double h = 1e-6;
    auto qp = q, qm = q;
    qp[c] += h;
    qm[c] -= h;
    return (proxy_nca_loss(qp, pos, f, m) - proxy_nca_loss(qm, pos, f, m)) / (2 * h);
}

}  // namespace

TEST_CASE("loss at a prototype of an ETF has a closed form") {
    const std::size_t k = 6;
    const auto f = build_simplex_etf(k, 10, 4);
    const auto q = col(f, 2);
    const double km1 = static_cast<double>(k - 1);
    // cosine: d+ = 1, every negative at -1/(K-1)
    CHECK(proxy_nca_loss(q, 2, f, Metric::Cosine) == doctest::Approx(-1.0 - 1.0 / km1 + std::log(km1)).epsilon(1e-13));
    // squared distance between ETF columns is 2 + 2/(K-1)
    const double sq = 2.0 + 2.0 / km1;
    CHECK(proxy_nca_loss(q, 2, f, Metric::NegSqEuclidean) == doctest::Approx(-sq + std::log(km1)).epsilon(1e-13));
}

TEST_CASE("distance derivatives are a softmax over negatives") {
    const auto f = build_simplex_etf(5, 8, 1);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> normal;
    std::vector<double> q(8);
    for (auto& x : q) x = normal(rng);
    for (Metric m : {Metric::Cosine, Metric::NegSqEuclidean}) {
        const auto r = proxy_nca(q, 1, f, m, true);
        CHECK(r.dloss_ddistance[1] == -1.0);
        double sum = 0.0;
        for (std::size_t c = 0; c < 5; ++c)
            if (c != 1) {
                CHECK(r.dloss_ddistance[c] > 0.0);
                sum += r.dloss_ddistance[c];
            }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("gradient matches finite differences") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> normal(0.0, 0.5);
    for (int t = 0; t < 40; ++t) {
        const std::vector<std::int64_t> counts{3, 9, 4, 20};
        const auto f = t % 2 ? build_gof(counts, 7, rng()) : build_simplex_etf(4, 7, rng());
        const Metric m = t % 4 < 2 ? Metric::Cosine : Metric::NegSqEuclidean;
        std::vector<double> q(7);
        for (auto& x : q) x = normal(rng);
        const auto g = proxy_nca_grad(q, t % 4, f, m);
        double diff = 0.0, norm = 0.0;
        for (std::size_t c = 0; c < 7; ++c) {
            const double fd = fd_component(q, c, t % 4, f, m);
            diff += (fd - g[c]) * (fd - g[c]);
            norm += g[c] * g[c];
        }
        CHECK(std::sqrt(diff) <= 1e-6 * std::max(1.0, std::sqrt(norm)));
    }
}

TEST_CASE("negative squared distance is unbounded below, cosine is not") {
    // Moving q away from the frame along w+ - w- lowers the loss linearly in
    // the step length, which is why training defaults to the cosine metric.
    const auto f = build_simplex_etf(4, 6, 2);
    const auto wp = col(f, 0), wn = col(f, 1);
    auto at = [&](double t) {
        std::vector<double> q(6);
        for (std::size_t i = 0; i < 6; ++i) q[i] = t * (wp[i] - wn[i]);
        return q;
    };
    const double l10 = proxy_nca_loss(at(10.0), 0, f, Metric::NegSqEuclidean);
    const double l100 = proxy_nca_loss(at(100.0), 0, f, Metric::NegSqEuclidean);
    CHECK(l100 < l10 - 100.0);

    const double floor = -1.0 - 1.0 + std::log(3.0);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> normal(0.0, 50.0);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> q(6);
        for (auto& x : q) x = normal(rng);
        CHECK(proxy_nca_loss(q, t % 4, f, Metric::Cosine) >= floor);
    }
}

TEST_CASE("argument errors") {
    const auto f = build_simplex_etf(3, 4, 0);
    const std::vector<double> q{1, 0, 0, 0}, zero(4, 0.0), short_q{1, 0};
    CHECK_THROWS_AS(proxy_nca_loss(short_q, 0, f, Metric::Cosine), Error);
    CHECK_THROWS_AS(proxy_nca_loss(q, 3, f, Metric::Cosine), Error);
    try {
        proxy_nca_loss(zero, 0, f, Metric::Cosine);
        FAIL("expected ZeroVector");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::ZeroVector);
    }
    const std::vector<std::int64_t> one{1};
    try {
        proxy_nca_loss(q, 0, build_gof(one, 4, 0), Metric::Cosine);
        FAIL("expected SingleColumnFrame");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::SingleColumnFrame);
    }
    CHECK(metric_from_string("cosine") == Metric::Cosine);
    CHECK_THROWS_AS(metric_from_string("manhattan"), Error);
}

TEST_CASE("hierarchical loss aligns each layer with its level") {
    const auto tax = ClassTaxonomy::from_nodes({{"r", "", 3, "", 0},
                                                {"a", "", 2, "r", 0},
                                                {"b", "", 2, "r", 0},
                                                {"x", "", 1, "a", 5},
                                                {"y", "", 1, "a", 7},
                                                {"z", "", 1, "b", 9}});
    const auto tree = build_hnc(tax, 8, 1);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> normal;
    DecoderTrace tr;
    tr.assigned_leaf = 1;  // y, under a
    for (int j = 0; j < 3; ++j) {
        std::vector<double> q(8);
        for (auto& v : q) v = normal(rng);
        tr.per_layer.push_back(q);
    }
    const std::vector<std::size_t> map{2, 1, 1};
    AlignmentConfig cfg;
    cfg.per_layer_weights = {0.5, 1.0, 2.0};
    const auto l = hierarchical_loss(tr, tree, map, cfg);
    const double e0 = proxy_nca_loss(tr.per_layer[0], 0, tree.level_frame(2), cfg.metric);
    const double e1 = proxy_nca_loss(tr.per_layer[1], 1, tree.level_frame(1), cfg.metric);
    const double e2 = proxy_nca_loss(tr.per_layer[2], 1, tree.level_frame(1), cfg.metric);
    CHECK(l.per_layer[0] == e0);
    CHECK(l.total == doctest::Approx(0.5 * e0 + e1 + 2.0 * e2).epsilon(1e-14));

    const auto g = hierarchical_grad(tr, tree, map, cfg);
    const auto g2 = proxy_nca_grad(tr.per_layer[2], 1, tree.level_frame(1), cfg.metric);
    for (std::size_t i = 0; i < 8; ++i) CHECK(g[2][i] == doctest::Approx(2.0 * g2[i]).epsilon(1e-14));

    tr.assigned_leaf = DecoderTrace::kBackground;
    CHECK(hierarchical_loss(tr, tree, map, cfg).total == 0.0);
    for (const auto& row : hierarchical_grad(tr, tree, map, cfg))
        for (double v : row) CHECK(v == 0.0);

    tr.assigned_leaf = 0;
    const std::vector<std::size_t> bad{2, 1};
    CHECK_THROWS_AS(hierarchical_loss(tr, tree, bad, cfg), Error);
}

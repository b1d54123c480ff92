#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "hnc/errors.hpp"
#include "hnc/taxonomy.hpp"

using namespace hnc;

namespace {

const char* kSmall = R"({"nodes": [
  {"id": "r", "name": "root", "level": 3, "parent": null},
  {"id": "veh", "name": "vehicle", "level": 2, "parent": "r"},
  {"id": "ani", "name": "animal", "level": 2, "parent": "r"},
  {"id": "car", "name": "car", "level": 1, "parent": "veh", "count": 40},
  {"id": "bus", "name": "bus", "level": 1, "parent": "veh", "count": 10},
  {"id": "cat", "name": "cat", "level": 1, "parent": "ani", "count": 25},
  {"id": "dog", "name": "dog", "level": 1, "parent": "ani", "count": 5},
  {"id": "cow", "name": "cow", "level": 1, "parent": "ani", "count": 20}
]})";

ErrorKind kind_of(const std::string& doc) {
    try {
        load_taxonomy(doc);
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("taxonomy loaded");
    return ErrorKind::Parse;
}

}  // namespace

TEST_CASE("taxonomy queries") {
    const auto t = load_taxonomy(kSmall);
    CHECK(t.depth() == 3);
    CHECK(t.num_leaves() == 5);
    CHECK(t.level(2) == std::vector<std::string>{"veh", "ani"});
    CHECK(t.parent_of("dog") == "ani");
    CHECK(t.ancestor("dog", 3) == "r");
    CHECK(t.ancestor("dog", 1) == "dog");
    CHECK(t.aggregated_count("ani") == 50);
    CHECK(t.aggregated_count("r") == 100);
    CHECK(t.column_of("cat") == 2);
    CHECK(t.name_of("veh") == "vehicle");
    CHECK_THROWS_AS(t.ancestor("veh", 1), Error);
}

TEST_CASE("taxonomy validation errors") {
    CHECK(kind_of(R"({"nodes": [{"id": "a", "level": 1, "parent": null, "count": 1},
                                 {"id": "a", "level": 1, "parent": null, "count": 2}]})") == ErrorKind::DuplicateId);
    CHECK(kind_of(R"({"nodes": [{"id": "r", "level": 2, "parent": null},
                                 {"id": "x", "level": 1, "parent": "nope", "count": 1}]})") == ErrorKind::OrphanNode);
    CHECK(kind_of(R"({"nodes": [{"id": "r", "level": 3, "parent": null},
                                 {"id": "x", "level": 1, "parent": "r", "count": 1}]})") == ErrorKind::EmptyLevel);
    CHECK(kind_of(R"({"nodes": [{"id": "r", "level": 2, "parent": null},
                                 {"id": "x", "level": 1, "parent": "r", "count": 0}]})") == ErrorKind::NonPositiveCount);
    CHECK(kind_of("{not json") == ErrorKind::Parse);
    try {
        load_taxonomy_file("/nonexistent/tax.json");
        FAIL("expected Io");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Io);
        CHECK(std::string(e.what()).find("/nonexistent/tax.json") != std::string::npos);
    }
}

TEST_CASE("taxonomy JSON round trip") {
    const auto t = load_taxonomy(kSmall);
    const auto u = load_taxonomy(to_json(t).dump());
    CHECK(u.levels() == t.levels());
    for (const auto& id : t.level(1)) CHECK(u.leaf_count(id) == t.leaf_count(id));
}

TEST_CASE("parent prototypes are count-scaled normalized child means") {
    const auto t = load_taxonomy(kSmall);
    const auto tree = build_hnc(t, 16, 3);
    REQUIRE(tree.depth() == 3);
    const auto& leaves = tree.level_frame(1);
    const auto& supers = tree.level_frame(2);
    const double z = std::sqrt(50.0 * 50.0 + 50.0 * 50.0);
    for (const std::string id : {"veh", "ani"}) {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(16);
        const auto& kids = t.children_of(id);
        for (const auto& c : kids) mean += leaves.vectors.col(t.column_of(c));
        mean /= static_cast<double>(kids.size());
        const Eigen::VectorXd expect = mean.normalized() * (50.0 / z);
        CHECK((supers.vectors.col(t.column_of(id)) - expect).norm() < 1e-14);
    }
    // children of different supers are orthogonal, so supers are too
    CHECK(std::abs(supers.vectors.col(0).dot(supers.vectors.col(1))) < 1e-15);
    CHECK(tree.ancestor_column(t.column_of("cow"), 2) == t.column_of("ani"));
    CHECK(verify_hierarchy(tree, 1e-9).pass);
}

TEST_CASE("add_classes extends leaves and rebuilds the coarser levels") {
    const auto t = load_taxonomy(kSmall);
    const auto tree = build_hnc(t, 16, 3);
    const std::vector<NodeSpec> fresh{{"fish", "fish", 2, "r", 0},
                                      {"cod", "cod", 1, "fish", 12},
                                      {"pig", "pig", 1, "ani", 8}};
    const auto grown = add_classes(tree, fresh, 99);
    CHECK(grown.taxonomy.num_leaves() == 7);
    CHECK(grown.level_frame(2).size() == 3);
    CHECK(grown.level_frame(1).vectors.leftCols(5) == tree.level_frame(1).vectors);
    CHECK(grown.level_frame(1).norm_constant == tree.level_frame(1).norm_constant);
    CHECK(verify_hierarchy(grown, 1e-9).pass);

    const std::vector<NodeSpec> orphan{{"x", "x", 1, "nope", 3}};
    try {
        add_classes(tree, orphan, 1);
        FAIL("expected UnknownParent");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::UnknownParent);
    }
}

TEST_CASE("random taxonomies satisfy the hierarchy checks") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto t = random_taxonomy(5 + 9 * s, 2 + s % 3, s);
        CHECK(t.num_leaves() == 5 + 9 * s);
        CHECK(t.depth() == 2 + s % 3);
        CHECK(verify_hierarchy(build_hnc(t, 128, s), 1e-9).pass);
    }
}

TEST_CASE("verify_hierarchy catches a moved parent") {
    auto tree = build_hnc(load_taxonomy(kSmall), 16, 3);
    tree.layers[1].vectors(0, 0) += 1e-5;
    CHECK_FALSE(verify_hierarchy(tree, 1e-9).pass);
}

TEST_CASE("layer map spreads levels over decoder layers") {
    using V = std::vector<std::size_t>;
    CHECK(map_layers(3, 4) == V{2, 2, 1, 1});
    CHECK(map_layers(3, 5) == V{2, 2, 1, 1, 1});
    CHECK(map_layers(4, 3) == V{3, 2, 1});
    CHECK(map_layers(4, 2) == V{2, 1});  // coarsest dropped
    CHECK(map_layers(2, 3) == V{1, 1, 1});
}

TEST_CASE("tree JSON round trip") {
    const auto tree = build_hnc(load_taxonomy(kSmall), 12, 8);
    const auto back = tree_from_json(nlohmann::json::parse(to_json(tree).dump()));
    REQUIRE(back.depth() == tree.depth());
    for (std::size_t l = 0; l < tree.depth(); ++l) CHECK(back.layers[l].vectors == tree.layers[l].vectors);
    CHECK(back.ancestor_columns == tree.ancestor_columns);
}

TEST_CASE("coco taxonomy file") {
    const auto t = load_taxonomy_file(std::string(HNC_SOURCE_DIR) + "/configs/coco_taxonomy.json");
    CHECK(t.depth() == 3);
    CHECK(t.level(1).size() == 80);
    CHECK(t.level(2).size() == 12);
    CHECK(t.level(3).size() == 1);
}

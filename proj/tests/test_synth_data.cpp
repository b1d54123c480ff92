#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "hnc/errors.hpp"
#include "hnc/synth_data.hpp"

using namespace hnc;

namespace {

ClassTaxonomy two_level(std::size_t supers, std::size_t per) {
    std::vector<NodeSpec> nodes{{"root", "", 3, "", 0}};
    for (std::size_t s = 0; s < supers; ++s) nodes.push_back({"g" + std::to_string(s), "", 2, "root", 0});
    for (std::size_t s = 0; s < supers; ++s)
        for (std::size_t i = 0; i < per; ++i)
            nodes.push_back({"c" + std::to_string(s) + "_" + std::to_string(i), "", 1, "g" + std::to_string(s), 1});
    return ClassTaxonomy::from_nodes(std::move(nodes));
}

double dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("generation is deterministic and splits are independent") {
    const auto tax = two_level(3, 3);
    GeneratorParams p;
    p.scenes = 50;
    p.seed = 4;
    const auto a = generate_scenes(tax, p), b = generate_scenes(tax, p);
    std::ostringstream sa, sb;
    write_dataset(sa, a);
    write_dataset(sb, b);
    CHECK(sa.str() == sb.str());

    GeneratorParams q = p;
    q.split = 1;
    const auto c = generate_scenes(tax, q);
    CHECK(c.scenes[0].objects[0].feature != a.scenes[0].objects[0].feature);
    // same class generators
    CHECK(make_class_generators(tax, q).centers == make_class_generators(tax, p).centers);
}

TEST_CASE("scene contents respect the parameters") {
    const auto tax = two_level(2, 4);
    GeneratorParams p;
    p.scenes = 300;
    p.min_objects = 2;
    p.max_objects = 3;
    p.feature_dim = 12;
    const auto ds = generate_scenes(tax, p);
    CHECK(ds.scenes.size() == 300);
    CHECK(ds.feature_dim == 12);
    for (const auto& s : ds.scenes) {
        CHECK(s.objects.size() >= 2);
        CHECK(s.objects.size() <= 3);
        for (const auto& o : s.objects) {
            CHECK(o.feature.size() == 12);
            CHECK(tax.contains(o.leaf));
            CHECK_NOTHROW(check_box(o.box));
        }
    }
}

TEST_CASE("class centers follow the hierarchy") {
    const auto tax = two_level(6, 5);
    GeneratorParams p;
    p.feature_dim = 32;
    const auto g = make_class_generators(tax, p);
    // every leaf is closer to its own super-class siblings than to any other leaf
    for (std::size_t a = 0; a < g.leaves.size(); ++a) {
        double within = 0.0, across = 1e300;
        for (std::size_t b = 0; b < g.leaves.size(); ++b) {
            if (a == b) continue;
            const double d = dist(g.centers[a], g.centers[b]);
            if (tax.parent_of(g.leaves[a]) == tax.parent_of(g.leaves[b]))
                within = std::max(within, d);
            else
                across = std::min(across, d);
        }
        CHECK(within < across);
    }
}

TEST_CASE("class frequencies pass a chi-squared test") {
    const auto tax = two_level(2, 5);
    GeneratorParams p;
    p.scenes = 4000;
    p.imbalance = 1.2;
    p.seed = 11;
    const auto ds = generate_scenes(tax, p);
    const auto g = make_class_generators(tax, p);
    std::map<std::string, double> seen;
    double n = 0.0;
    for (const auto& s : ds.scenes)
        for (const auto& o : s.objects) {
            seen[o.leaf] += 1.0;
            n += 1.0;
        }
    double chi2 = 0.0;
    for (std::size_t k = 0; k < g.leaves.size(); ++k) {
        const double expect = n * g.frequencies[k];
        chi2 += (seen[g.leaves[k]] - expect) * (seen[g.leaves[k]] - expect) / expect;
    }
    const boost::math::chi_squared dist_(static_cast<double>(g.leaves.size() - 1));
    CHECK(chi2 < boost::math::quantile(dist_, 0.99));
    // power law: frequency ratio of class 1 to class 4 is 4^1.2
    CHECK(g.frequencies[0] / g.frequencies[3] == doctest::Approx(std::pow(4.0, 1.2)).epsilon(1e-12));
}

TEST_CASE("phase split keeps only current labels and conserves annotations") {
    const auto tax = two_level(3, 4);
    GeneratorParams p;
    p.scenes = 200;
    const auto ds = generate_scenes(tax, p);
    const auto part = partition_by_sizes(ds.leaves, {8, 4});
    const auto sched = split_phases(ds, part);
    REQUIRE(sched.scenes.size() == 2);

    std::multiset<std::tuple<std::string, std::size_t, std::string>> original, split;
    for (const auto& s : ds.scenes)
        for (std::size_t o = 0; o < s.objects.size(); ++o) original.emplace(s.id, o, s.objects[o].leaf);
    for (std::size_t ph = 0; ph < 2; ++ph) {
        const std::set<std::string> allowed(part[ph].begin(), part[ph].end());
        for (const auto& s : sched.scenes[ph]) {
            bool any = false;
            for (std::size_t o = 0; o < s.objects.size(); ++o) {
                if (!s.objects[o].annotated()) continue;
                any = true;
                CHECK(allowed.count(s.objects[o].leaf) == 1);
                split.emplace(s.id, o, s.objects[o].leaf);
            }
            CHECK(any);
        }
    }
    CHECK(split == original);
}

TEST_CASE("partition and split errors") {
    const auto tax = two_level(2, 2);
    GeneratorParams p;
    p.scenes = 5;
    const auto ds = generate_scenes(tax, p);
    CHECK_THROWS_AS(partition_by_sizes(ds.leaves, {1, 1}), Error);
    try {
        split_phases(ds, {{"c0_0", "c0_1"}, {"c0_1", "c1_0", "c1_1"}});
        FAIL("expected Overlap");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Overlap);
    }
    GeneratorParams bad = p;
    bad.min_objects = 5;
    bad.max_objects = 2;
    CHECK_THROWS_AS(generate_scenes(tax, bad), Error);
}

TEST_CASE("dataset text round trip") {
    const auto tax = two_level(2, 3);
    GeneratorParams p;
    p.scenes = 20;
    const auto ds = generate_scenes(tax, p);
    std::stringstream io;
    write_dataset(io, ds);
    const auto back = read_dataset(io);
    REQUIRE(back.scenes.size() == ds.scenes.size());
    CHECK(back.leaves == ds.leaves);
    for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
        REQUIRE(back.scenes[i].objects.size() == ds.scenes[i].objects.size());
        for (std::size_t o = 0; o < ds.scenes[i].objects.size(); ++o) {
            CHECK(back.scenes[i].objects[o].feature == ds.scenes[i].objects[o].feature);
            CHECK(back.scenes[i].objects[o].box == ds.scenes[i].objects[o].box);
        }
    }
    std::stringstream empty;
    CHECK_THROWS_AS(read_dataset(empty), Error);
}

#include "hnc/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "hnc/errors.hpp"

namespace hnc {

namespace {

constexpr double kSphereRadius = 4.0;    // in units of center_scale
constexpr double kLevelShrink = 0.375;   // child offset scale / parent scale
constexpr char kFormat[] = "hnc-scenes/1";

std::vector<double> random_direction(std::size_t p, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(p);
    double n2 = 0.0;
    do {
        n2 = 0.0;
        for (auto& x : v) {
            x = normal(rng);
            n2 += x * x;
        }
    } while (n2 == 0.0);
    const double inv = 1.0 / std::sqrt(n2);
    for (auto& x : v) x *= inv;
    return v;
}

void validate(const GeneratorParams& p) {
    if (p.min_objects > p.max_objects)
        throw Error(ErrorKind::InvalidRange, "min_objects exceeds max_objects");
    if (!(p.noise >= 0.0)) throw Error(ErrorKind::InvalidRange, "noise must be >= 0");
    if (!(p.center_scale > 0.0)) throw Error(ErrorKind::InvalidRange, "center_scale must be > 0");
    if (!std::isfinite(p.imbalance)) throw Error(ErrorKind::InvalidRange, "imbalance must be finite");
    if (p.feature_dim == 0) throw Error(ErrorKind::InvalidRange, "feature_dim must be > 0");
}

std::string scene_id(const std::string& prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", i);
    return prefix + buf;
}

}  // namespace

nlohmann::json to_json(const GeneratorParams& p) {
    return {{"scenes", p.scenes},           {"min_objects", p.min_objects}, {"max_objects", p.max_objects},
            {"noise", p.noise},             {"imbalance", p.imbalance},     {"center_scale", p.center_scale},
            {"feature_dim", p.feature_dim}, {"seed", p.seed},               {"split", p.split},
            {"id_prefix", p.id_prefix}};
}

GeneratorParams generator_params_from_json(const nlohmann::json& j) {
    GeneratorParams p;
    p.scenes = j.value("scenes", p.scenes);
    p.min_objects = j.value("min_objects", p.min_objects);
    p.max_objects = j.value("max_objects", p.max_objects);
    p.noise = j.value("noise", p.noise);
    p.imbalance = j.value("imbalance", p.imbalance);
    p.center_scale = j.value("center_scale", p.center_scale);
    p.feature_dim = j.value("feature_dim", p.feature_dim);
    p.seed = j.value("seed", p.seed);
    p.split = j.value("split", p.split);
    p.id_prefix = j.value("id_prefix", p.id_prefix);
    return p;
}

ClassGenerators make_class_generators(const ClassTaxonomy& taxonomy, const GeneratorParams& params) {
    validate(params);
    const std::size_t p = params.feature_dim;
    std::seed_seq seq{params.seed, std::uint64_t{0xC1A55}};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);

    const std::size_t depth = taxonomy.depth();
    const bool single_root = depth > 1 && taxonomy.level(depth).size() == 1;
    std::map<std::string, std::vector<double>> center;
    std::map<std::string, double> scale;
    const double sphere = kSphereRadius * params.center_scale;
    for (std::size_t level = depth; level >= 1; --level) {
        for (const auto& id : taxonomy.level(level)) {
            const std::string& parent = taxonomy.parent_of(id);
            const bool on_sphere = parent.empty() ? !single_root : (single_root && level == depth - 1);
            if (parent.empty() && single_root) {
                center[id] = std::vector<double>(p, 0.0);
                scale[id] = sphere / kLevelShrink;
            } else if (on_sphere) {
                auto dir = random_direction(p, rng);
                std::vector<double> c = parent.empty() ? std::vector<double>(p, 0.0) : center.at(parent);
                for (std::size_t i = 0; i < p; ++i) c[i] += sphere * dir[i];
                center[id] = std::move(c);
                scale[id] = sphere;
            } else {
                const double s = scale.at(parent) * kLevelShrink;
                std::vector<double> c = center.at(parent);
                const double per = s / std::sqrt(static_cast<double>(p));
                for (auto& x : c) x += per * normal(rng);
                center[id] = std::move(c);
                scale[id] = s;
            }
        }
        if (level == 1) break;
    }

    ClassGenerators g;
    g.leaves = taxonomy.level(1);
    std::uniform_real_distribution<double> pos(0.15, 0.85), size(0.05, 0.25);
    double total = 0.0;
    for (std::size_t k = 0; k < g.leaves.size(); ++k) {
        const auto& leaf = g.leaves[k];
        g.centers.push_back(center.at(leaf));
        g.parent_centers.push_back(center.at(depth > 1 ? taxonomy.ancestor(leaf, 2) : leaf));
        const double cx = pos(rng), cy = pos(rng), w = size(rng), h = size(rng);
        g.box_priors.push_back({cx, cy, w, h});
        g.frequencies.push_back(std::pow(static_cast<double>(k + 1), -params.imbalance));
        total += g.frequencies.back();
    }
    for (auto& f : g.frequencies) f /= total;
    return g;
}

Dataset generate_scenes(const ClassTaxonomy& taxonomy, const GeneratorParams& params) {
    const ClassGenerators gen = make_class_generators(taxonomy, params);
    Dataset ds;
    ds.leaves = gen.leaves;
    ds.feature_dim = params.feature_dim;
    ds.scenes.reserve(params.scenes);
    std::discrete_distribution<std::size_t> pick_class(gen.frequencies.begin(), gen.frequencies.end());
    std::uniform_int_distribution<std::size_t> pick_count(params.min_objects, params.max_objects);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t s = 0; s < params.scenes; ++s) {
        // per-scene stream so scenes can be generated independently
        std::seed_seq seq{params.seed, std::uint64_t{1} + params.split, static_cast<std::uint64_t>(s)};
        std::mt19937_64 rng(seq);
        Scene scene;
        scene.id = scene_id(params.id_prefix, s);
        const std::size_t n = pick_count(rng);
        for (std::size_t o = 0; o < n; ++o) {
            const std::size_t k = pick_class(rng);
            SceneObject obj;
            obj.leaf = gen.leaves[k];
            obj.feature = gen.centers[k];
            if (params.noise > 0.0)
                for (auto& x : obj.feature) x += params.noise * normal(rng);
            const Box& prior = gen.box_priors[k];
            obj.box = {prior[0] + 0.05 * normal(rng), prior[1] + 0.05 * normal(rng), prior[2] + 0.02 * normal(rng),
                       prior[3] + 0.02 * normal(rng)};
            for (auto& v : obj.box) v = std::clamp(v, 0.0, 1.0);
            scene.objects.push_back(std::move(obj));
        }
        ds.scenes.push_back(std::move(scene));
    }
    return ds;
}

std::vector<std::vector<std::string>> partition_by_sizes(const std::vector<std::string>& leaves,
                                                         const std::vector<std::size_t>& sizes) {
    std::size_t total = 0;
    for (auto s : sizes) total += s;
    if (total != leaves.size())
        throw Error(ErrorKind::InvalidRange, "phase sizes sum to " + std::to_string(total) + " but there are " +
                                                 std::to_string(leaves.size()) + " leaves");
    std::vector<std::vector<std::string>> out;
    std::size_t at = 0;
    for (auto s : sizes) {
        out.emplace_back(leaves.begin() + static_cast<std::ptrdiff_t>(at),
                         leaves.begin() + static_cast<std::ptrdiff_t>(at + s));
        at += s;
    }
    return out;
}

PhaseSchedule split_phases(const Dataset& dataset, const std::vector<std::vector<std::string>>& partition) {
    std::map<std::string, std::size_t> phase_of;
    for (std::size_t i = 0; i < partition.size(); ++i)
        for (const auto& c : partition[i])
            if (!phase_of.emplace(c, i).second)
                throw Error(ErrorKind::Overlap, "class '" + c + "' appears in more than one phase");
    const std::set<std::string> leaves(dataset.leaves.begin(), dataset.leaves.end());
    for (const auto& [c, i] : phase_of)
        if (!leaves.count(c)) throw Error(ErrorKind::InvalidRange, "phase class '" + c + "' is not a leaf");
    if (phase_of.size() != leaves.size())
        throw Error(ErrorKind::InvalidRange, "partition covers " + std::to_string(phase_of.size()) + " of " +
                                                 std::to_string(leaves.size()) + " leaves");

    PhaseSchedule out;
    out.classes = partition;
    out.scenes.resize(partition.size());
    for (std::size_t i = 0; i < partition.size(); ++i) {
        for (const auto& scene : dataset.scenes) {
            Scene copy = scene;
            bool any = false;
            for (auto& obj : copy.objects) {
                if (!obj.annotated()) continue;
                auto it = phase_of.find(obj.leaf);
                if (it != phase_of.end() && it->second == i)
                    any = true;
                else
                    obj.leaf.clear();
            }
            if (any) out.scenes[i].push_back(std::move(copy));
        }
    }
    return out;
}

void write_dataset(std::ostream& out, const Dataset& dataset) {
    nlohmann::json header{{"format", kFormat},
                          {"leaves", dataset.leaves},
                          {"feature_dim", dataset.feature_dim},
                          {"scenes", dataset.scenes.size()}};
    out << header.dump() << '\n';
    for (const auto& s : dataset.scenes) {
        nlohmann::json objs = nlohmann::json::array();
        for (const auto& o : s.objects) {
            nlohmann::json j;
            j["leaf"] = o.annotated() ? nlohmann::json(o.leaf) : nlohmann::json(nullptr);
            j["box"] = o.box;
            j["feature"] = o.feature;
            objs.push_back(std::move(j));
        }
        out << nlohmann::json{{"id", s.id}, {"objects", std::move(objs)}}.dump() << '\n';
    }
}

Dataset read_dataset(std::istream& in) {
    Dataset ds;
    std::string line;
    try {
        if (!std::getline(in, line)) throw Error(ErrorKind::Parse, "dataset is empty");
        const auto header = nlohmann::json::parse(line);
        if (header.value("format", "") != kFormat)
            throw Error(ErrorKind::Parse, "dataset header has an unknown format");
        ds.leaves = header.at("leaves").get<std::vector<std::string>>();
        ds.feature_dim = header.at("feature_dim").get<std::size_t>();
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            Scene s;
            s.id = j.at("id").get<std::string>();
            for (const auto& o : j.at("objects")) {
                SceneObject obj;
                if (!o.at("leaf").is_null()) obj.leaf = o.at("leaf").get<std::string>();
                obj.box = o.at("box").get<Box>();
                obj.feature = o.at("feature").get<std::vector<double>>();
                if (obj.feature.size() != ds.feature_dim)
                    throw Error(ErrorKind::DimensionMismatch, "scene '" + s.id + "' has a feature of wrong size");
                s.objects.push_back(std::move(obj));
            }
            ds.scenes.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Parse, std::string("dataset: ") + e.what());
    }
    return ds;
}

void write_dataset_file(const std::string& path, const Dataset& dataset) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write '" + path + "'");
    write_dataset(out, dataset);
    if (!out) throw Error(ErrorKind::Io, "write failed for '" + path + "'");
}

Dataset read_dataset_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open dataset '" + path + "'");
    return read_dataset(in);
}

}  // namespace hnc

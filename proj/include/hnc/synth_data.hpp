#pragma once
// Synthetic detection scenes whose class features follow the taxonomy:
// leaves of the same super-class sit near each other in observation space.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "hnc/matcher.hpp"
#include "hnc/taxonomy.hpp"

namespace hnc {

struct SceneObject {
    std::string leaf;  // empty when the object is not annotated
    Box box{};
    std::vector<double> feature;

    bool annotated() const noexcept { return !leaf.empty(); }
};

struct Scene {
    std::string id;
    std::vector<SceneObject> objects;
};

struct GeneratorParams {
    std::size_t scenes = 100;
    std::size_t min_objects = 1;
    std::size_t max_objects = 4;
    double noise = 0.1;         // per-component feature noise
    double imbalance = 0.0;     // power-law exponent over leaf order
    double center_scale = 1.0;  // spread of class centers
    std::size_t feature_dim = 32;
    std::uint64_t seed = 0;
    // Selects an independent scene stream with the same class generators
    // (train/test splits).
    std::uint64_t split = 0;
    std::string id_prefix = "s";
};

nlohmann::json to_json(const GeneratorParams& p);
GeneratorParams generator_params_from_json(const nlohmann::json& j);

struct Dataset {
    std::vector<std::string> leaves;  // taxonomy leaf order
    std::size_t feature_dim = 0;
    std::vector<Scene> scenes;
};

// Class centers and box priors for every leaf. Exposed for tests.
struct ClassGenerators {
    std::vector<std::string> leaves;
    std::vector<std::vector<double>> centers;        // per leaf
    std::vector<std::vector<double>> parent_centers;  // per leaf: center of its level-2 ancestor
    std::vector<Box> box_priors;
    std::vector<double> frequencies;  // normalized class probabilities
};

ClassGenerators make_class_generators(const ClassTaxonomy& taxonomy, const GeneratorParams& params);

Dataset generate_scenes(const ClassTaxonomy& taxonomy, const GeneratorParams& params);

struct PhaseSchedule {
    std::vector<std::vector<std::string>> classes;  // C_1 .. C_M
    std::vector<std::vector<Scene>> scenes;         // D_1 .. D_M
};

// Phase i keeps every scene that has at least one object of C_i; objects of
// other classes stay in the scene with their label removed.
PhaseSchedule split_phases(const Dataset& dataset, const std::vector<std::vector<std::string>>& partition);

// Partition of the leaves in order into consecutive chunks ("30+10").
std::vector<std::vector<std::string>> partition_by_sizes(const std::vector<std::string>& leaves,
                                                         const std::vector<std::size_t>& sizes);

// One header line followed by one JSON scene per line.
void write_dataset(std::ostream& out, const Dataset& dataset);
Dataset read_dataset(std::istream& in);
void write_dataset_file(const std::string& path, const Dataset& dataset);
Dataset read_dataset_file(const std::string& path);

}  // namespace hnc

#pragma once
// Experiment runner behind the command line tool: config loading, dataset
// generation, multi-phase runs per (mode, seed), reports and the
// verification suite.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hnc/synth_data.hpp"
#include "hnc/taxonomy.hpp"
#include "hnc/trainer.hpp"

namespace hnc {

struct ExperimentConfig {
    std::filesystem::path taxonomy_path;  // resolved against the config file's directory
    GeneratorParams data;                 // training set
    std::size_t test_scenes = 200;        // held-out set, same class generators
    // Either explicit class lists or sizes over the taxonomy leaf order.
    std::vector<std::vector<std::string>> phases;
    std::vector<std::size_t> phase_sizes;
    ModelConfig model;
    TrainConfig train;
    std::vector<std::size_t> phase_epochs;  // empty: train.epochs for every phase
    std::vector<HeadMode> modes{HeadMode::LearnedHead, HeadMode::FlatNc, HeadMode::Hnc};
    std::vector<std::uint64_t> seeds{0};
    std::filesystem::path output_dir = "hnc_out";
    std::size_t workers = 1;
};

// Throws Error(Validation) naming the offending field, e.g. "data.noise".
void validate(const ExperimentConfig& config);

// `base` is where relative paths are resolved from. HNC_OUTPUT_ROOT, when
// set, replaces the output directory.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base);
nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

std::vector<std::vector<std::string>> resolve_partition(const ExperimentConfig& config,
                                                        const ClassTaxonomy& taxonomy);
std::size_t epochs_for_phase(const ExperimentConfig& config, std::size_t phase);
GeneratorParams test_params(const ExperimentConfig& config);

std::string run_id(HeadMode mode, std::uint64_t seed);
std::string phase_run_id(HeadMode mode, std::uint64_t seed, std::size_t phase);

// Sub-taxonomy of `leaves` and their ancestors, with leaf counts taken from
// the annotations of `scenes` (at least 1).
ClassTaxonomy phase_taxonomy(const ClassTaxonomy& full, const std::vector<std::string>& leaves,
                             const std::vector<Scene>& scenes);

struct PhaseOutcome {
    PhaseResult result;
    EvalMetrics metrics;  // on the test set after the phase
    ClassHead head;
};

struct RunOutcome {
    HeadMode mode = HeadMode::Hnc;
    std::uint64_t seed = 0;
    std::vector<PhaseOutcome> phases;
    ToyModel model;
};

// One (mode, seed) run over every phase. Writes epochs.csv,
// assignments_p<k>.csv, snapshot_p<k>.json and metrics_p<k>.json into
// run_dir unless it is empty.
RunOutcome run_one(const ExperimentConfig& config, const ClassTaxonomy& taxonomy, const Dataset& train,
                   const Dataset& test, HeadMode mode, std::uint64_t seed, const std::filesystem::path& run_dir);

struct DataFiles {
    std::filesystem::path train, test, manifest;
    std::string sha256;  // over train then test file bytes
};

DataFiles data_files(const ExperimentConfig& config);
DataFiles cmd_gen_data(const ExperimentConfig& config);

// Runs every (mode, seed) and writes <output>/runs/<mode>-s<seed>/ plus the
// merged <output>/epochs.csv and <output>/summary.csv.
std::vector<RunOutcome> cmd_train(const ExperimentConfig& config, bool force);

// Re-evaluates a stored snapshot on the test set. Forgetting is taken against
// the stored phase-0 metrics of the same run.
EvalMetrics cmd_eval(const ExperimentConfig& config, HeadMode mode, std::uint64_t seed, std::size_t phase);

inline constexpr const char* kInstabilityCsvHeader = "mode,seed,phase,epoch,IS";
inline constexpr const char* kInstabilitySummaryHeader = "mode,seed,phase,epochs,last3_mean";

struct InstabilitySeries {
    std::string mode;
    std::uint64_t seed = 0;
    std::size_t phase = 0;
    std::vector<std::size_t> epochs;  // later epoch of each consecutive pair
    std::vector<double> values;

    double last3_mean() const;
};

// IS between consecutive epochs of a set of records.
InstabilitySeries instability_series(const std::vector<AssignmentRecord>& records);

// Reads every runs/*/assignments_p<phase>.csv below log_dir (phase defaults
// to the last one present), writes instability.csv and
// instability_summary.csv into log_dir.
std::vector<InstabilitySeries> cmd_instability_report(const std::filesystem::path& log_dir,
                                                      std::optional<std::size_t> phase = std::nullopt);

// Small random model and scene with a frozen matching, for gradient checks.
// Holds spans into its own scene, so it can be moved but not copied.
struct GradientFixture {
    ToyModel model;
    ClassHead head;
    Scene scene;
    std::vector<ObservedObject> objects;
    std::vector<Annotation> annotations;
    SceneMatch match;
    TrainConfig config;

    GradientFixture() = default;
    GradientFixture(const GradientFixture&) = delete;
    GradientFixture(GradientFixture&&) = default;

    // lambda_align * align + lambda_box * box under the frozen matching
    double total_loss(const ToyModel& m) const;
};

GradientFixture make_gradient_fixture(HeadMode mode, std::uint64_t seed);
// Relative error of grad at one flat coordinate against central differences.
double pipeline_gradient_error(const GradientFixture& fx, const Parameters& grad, std::size_t coordinate);

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct VerifyOptions {
    std::uint64_t seed = 0;
    std::size_t taxonomies = 100;
    std::size_t gradient_instances = 1000;
    std::size_t pipeline_coordinates = 100;
    std::size_t matcher_matrices = 200;  // per size
    bool inject_perturbed_frame = false;
};

std::vector<CheckResult> cmd_verify(const VerifyOptions& options);

}  // namespace hnc

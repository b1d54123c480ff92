#pragma once
// Toy multi-layer decoder standing in for a DETR decoder, trained with
// Hungarian matching, prototype alignment and L1 box regression.
//
// Each query owns a fixed anchor on a grid over the unit square. Its input is
// the anchor-weighted pool of the scene's object observations (feature plus
// box geometry); a learned per-query seed is added and the result runs
// through l residual tanh blocks, each of which emits one layer output.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hnc/geometry.hpp"
#include "hnc/matcher.hpp"
#include "hnc/proxy_loss.hpp"
#include "hnc/synth_data.hpp"
#include "hnc/taxonomy.hpp"

namespace hnc {

enum class HeadMode { LearnedHead, FlatNc, Hnc };

std::string to_string(HeadMode m);
HeadMode head_mode_from_string(const std::string& s);

struct ModelConfig {
    std::size_t dim = 64;          // d, prototype space
    std::size_t feature_dim = 32;  // p, observation space
    std::size_t layers = 4;        // l
    std::size_t queries = 9;       // n_q
    double pool_bandwidth = 0.2;   // anchor pooling kernel width
    double pool_floor = 0.05;      // keeps pooling weights bounded with few objects
    double init_scale = 1.0;
    std::uint64_t seed = 0;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

inline constexpr std::size_t kBoxInputs = 4;

/// All trainable tensors, row-major. A second instance with the same shapes
/// holds gradients.
struct Parameters {
    std::vector<double> w_in;         // d x (p + 4)
    std::vector<double> b_in;         // d
    std::vector<double> query_seeds;  // n_q x d
    std::vector<std::vector<double>> block_w;  // l of d x d
    std::vector<std::vector<double>> block_b;  // l of d
    std::vector<double> box_w;        // 4 x d
    std::vector<double> box_b;        // 4
    std::vector<double> head_w;       // K x d (learned head only)
    std::vector<double> head_b;       // K

    std::vector<std::span<double>> tensors();
    std::vector<std::span<const double>> tensors() const;
    std::size_t size() const;
    Parameters zeros_like() const;
    // Flat coordinate access across all tensors in tensors() order.
    double& at(std::size_t flat);
    double at(std::size_t flat) const;
};

nlohmann::json to_json(const Parameters& p);
Parameters parameters_from_json(const nlohmann::json& j);

struct ToyModel {
    ModelConfig config;
    HeadMode mode = HeadMode::Hnc;
    Parameters params;
    std::vector<std::array<double, 2>> anchors;  // per query

    std::size_t head_classes() const { return params.head_b.size(); }
};

ToyModel make_model(const ModelConfig& config, HeadMode mode, std::size_t head_classes = 0);
// Learned head only: appends zero-bias rows for new classes.
void grow_head(ToyModel& model, std::size_t classes, std::uint64_t seed);

// What the model is allowed to see of a scene: no labels.
struct ObservedObject {
    std::span<const double> feature;
    Box box{};
};

struct QueryState {
    std::vector<double> input;                // pooled (p + 4)
    std::vector<std::vector<double>> hidden;  // h_0 .. h_l
    std::vector<std::vector<double>> act;     // tanh outputs of blocks 1..l
    std::vector<double> box_logit;            // 4
    Box box{};
    std::vector<double> logits;  // learned head only

    std::span<const double> output() const { return hidden.back(); }
};

struct ForwardResult {
    std::vector<QueryState> queries;

    std::vector<DecoderTrace> traces() const;
};

ForwardResult forward(const ToyModel& model, std::span<const ObservedObject> objects);

/// Class space the prototype heads score against. classes[c] is the leaf id
/// of column c in the leaf frame (hnc), the ETF (flat_nc) and the learned
/// head rows.
struct ClassHead {
    HeadMode mode = HeadMode::Hnc;
    std::vector<std::string> classes;
    std::optional<HNCTree> tree;          // hnc
    std::optional<PrototypeFrame> flat;   // flat_nc
    std::vector<std::size_t> layer_map;   // hnc: decoder layer -> level

    std::size_t column_of(const std::string& leaf) const;
    const PrototypeFrame* leaf_frame() const;
};

// Scores in [0, 1] per class, used by the matching cost.
std::vector<double> class_scores(const ToyModel& model, const ClassHead& head, const QueryState& q);

struct Detection {
    std::size_t query = 0;
    std::string leaf;
    double score = 0.0;
    Box box{};
};

struct PredictConfig {
    double tau_fraction = 0.25;  // background threshold as fraction of mean prototype norm
};

// Class of one query, or nullopt for background.
std::optional<std::pair<std::size_t, double>> classify(const ToyModel& model, const ClassHead& head,
                                                       const QueryState& q, const PredictConfig& cfg);
std::vector<Detection> predict(const ToyModel& model, const ClassHead& head, std::span<const ObservedObject> objects,
                               const PredictConfig& cfg = {});

/// Training data as seen by the trainer. Observations and annotations are
/// separate calls so access to labels can be audited.
struct Annotation {
    std::size_t object = 0;  // index into the scene's objects
    std::string leaf;
    Box box{};
};

class SceneSource {
public:
    virtual ~SceneSource() = default;
    virtual std::size_t size() const = 0;
    virtual const std::string& scene_id(std::size_t i) const = 0;
    virtual std::vector<ObservedObject> observe(std::size_t i) const = 0;
    virtual std::vector<Annotation> annotations(std::size_t i) const = 0;
};

class VectorSceneSource : public SceneSource {
public:
    explicit VectorSceneSource(const std::vector<Scene>& scenes) : scenes_(&scenes) {}
    std::size_t size() const override { return scenes_->size(); }
    const std::string& scene_id(std::size_t i) const override { return (*scenes_)[i].id; }
    std::vector<ObservedObject> observe(std::size_t i) const override;
    std::vector<Annotation> annotations(std::size_t i) const override;

private:
    const std::vector<Scene>* scenes_;
};

struct TrainConfig {
    std::size_t epochs = 12;
    double lr = 1e-2;
    std::size_t batch_size = 8;
    double lambda_align = 1.0;
    double lambda_box = 5.0;
    double match_cls = 2.0;  // matching cost weights
    double match_box = 5.0;
    AlignmentConfig alignment;
    PredictConfig predict;
    std::size_t probe_scenes = 64;
    std::uint64_t seed = 0;  // shuffling
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Matched (query, annotation) pairs of one scene. Fixed during a step.
struct SceneMatch {
    std::vector<std::size_t> query_of_annotation;
};

SceneMatch match_scene(const ToyModel& model, const ClassHead& head, const ForwardResult& fwd,
                       std::span<const Annotation> annotations, double match_cls, double match_box);

struct LossParts {
    double align = 0.0;  // summed over matched objects, unweighted
    double box = 0.0;
    std::size_t matched = 0;
};

// Loss of one scene under a fixed matching. Gradients (of
// lambda_align * align + lambda_box * box, not normalized) are accumulated
// into grad when non-null.
LossParts scene_loss(const ToyModel& model, const ClassHead& head, std::span<const ObservedObject> objects,
                     std::span<const Annotation> annotations, const SceneMatch& match, const TrainConfig& cfg,
                     Parameters* grad);

struct NCReport {
    double nc1 = 0.0;
    double nc2 = 0.0;
    double nc3 = 0.0;
    double nc4_agreement = 0.0;
};

// features_by_class[k] holds the samples of class k; classifier column k of
// `classifier` (d x K) is its prototype / classifier vector.
NCReport nc_metrics(const std::vector<std::vector<std::vector<double>>>& features_by_class,
                    const Eigen::MatrixXd& classifier);

struct EvalMetrics {
    std::map<std::string, double> per_class_accuracy;
    double accuracy = 0.0;  // mean over evaluated classes
    double acc_old = std::numeric_limits<double>::quiet_NaN();
    double acc_new = std::numeric_limits<double>::quiet_NaN();
    double mean_box_l1 = 0.0;
    double forgetting = 0.0;
};

nlohmann::json to_json(const EvalMetrics& m);
EvalMetrics eval_metrics_from_json(const nlohmann::json& j);

// Accuracy of the query matched (by box L1) to each annotated object whose
// class is in head.classes. old_classes splits acc_old / acc_new. When
// baseline is given, forgetting = acc_old - baseline->acc_old.
EvalMetrics evaluate(const ToyModel& model, const ClassHead& head, const SceneSource& data,
                     const std::vector<std::string>& old_classes, const TrainConfig& cfg,
                     const EvalMetrics* baseline = nullptr);

struct EpochLog {
    std::string run_id;
    std::size_t epoch = 0;
    std::string mode;
    double loss_align = 0.0;
    double loss_box = 0.0;
    double acc_old = 0.0;
    double acc_new = 0.0;
    NCReport nc;
    double instability = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr const char* kEpochCsvHeader =
    "run_id,epoch,mode,loss_align,loss_box,acc_old,acc_new,nc1,nc2,nc3,nc4,IS";
void write_epoch_csv_row(std::ostream& out, const EpochLog& log);

struct PhaseContext {
    std::string run_id;
    const SceneSource* eval = nullptr;  // optional held-out set for accuracy columns
    std::vector<std::string> old_classes;
};

struct PhaseResult {
    std::vector<EpochLog> logs;
    std::vector<AssignmentRecord> records;  // probe assignments, every epoch
    NCReport initial_nc;
};

// NC metrics on the last-layer features of queries matched on the first
// `probe` scenes of `data`.
NCReport probe_nc(const ToyModel& model, const ClassHead& head, const SceneSource& data, std::size_t probe,
                  const TrainConfig& cfg);

PhaseResult train_phase(ToyModel& model, const ClassHead& head, const SceneSource& data, const TrainConfig& cfg,
                        const PhaseContext& ctx);

nlohmann::json to_json(const ToyModel& model);
ToyModel model_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ClassHead& head);
ClassHead class_head_from_json(const nlohmann::json& j);

}  // namespace hnc

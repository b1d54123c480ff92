#pragma once
// Proxy-NCA alignment of query features to fixed prototypes.
//
//   L(q) = -d(q, w+) + LSE_{w- != w+} d(q, w-)
//
// The log-sum-exp runs over negatives only. dL/dd is -1 at the positive and
// the softmax of the negative distances elsewhere.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hnc/geometry.hpp"
#include "hnc/taxonomy.hpp"

namespace hnc {

enum class Metric { NegSqEuclidean, Cosine };

std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

// Distances below this are clamped before exponentiation.
inline constexpr double kDistanceFloor = -1e6;

struct AlignmentConfig {
    Metric metric = Metric::Cosine;  // neg_sq_euclidean is unbounded below under this loss
    std::vector<double> per_layer_weights;  // empty = uniform 1.0
    bool background_excluded = true;

    double weight(std::size_t layer) const {
        return per_layer_weights.empty() ? 1.0 : per_layer_weights.at(layer);
    }
};

/// Per-layer outputs of one query. assigned_leaf is a leaf column of the
/// tree, or kBackground for unmatched queries.
struct DecoderTrace {
    static constexpr std::int64_t kBackground = -1;

    std::vector<std::vector<double>> per_layer;
    std::int64_t assigned_leaf = kBackground;
    std::vector<std::string> class_path;  // leaf id .. root id, optional
};

double distance(std::span<const double> q, std::span<const double> w, Metric metric);
// d distance / d q, written into grad (overwritten).
void distance_grad(std::span<const double> q, std::span<const double> w, Metric metric, std::span<double> grad);

struct ProxyNcaResult {
    double loss = 0.0;
    std::vector<double> dloss_ddistance;  // one entry per frame column
    std::vector<double> grad;             // dL/dq, empty unless requested
};

ProxyNcaResult proxy_nca(std::span<const double> q, std::size_t positive, const PrototypeFrame& frame,
                         Metric metric, bool with_grad);

double proxy_nca_loss(std::span<const double> q, std::size_t positive, const PrototypeFrame& frame, Metric metric);
std::vector<double> proxy_nca_grad(std::span<const double> q, std::size_t positive, const PrototypeFrame& frame,
                                   Metric metric);

struct LayerLosses {
    double total = 0.0;
    std::vector<double> per_layer;  // unweighted per-layer losses
};

// layer_map[j] is the 1-based taxonomy level aligned at decoder layer j.
LayerLosses hierarchical_loss(const DecoderTrace& trace, const HNCTree& tree, std::span<const std::size_t> layer_map,
                              const AlignmentConfig& cfg);
std::vector<std::vector<double>> hierarchical_grad(const DecoderTrace& trace, const HNCTree& tree,
                                                   std::span<const std::size_t> layer_map,
                                                   const AlignmentConfig& cfg);

}  // namespace hnc

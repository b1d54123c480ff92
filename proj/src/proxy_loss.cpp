#include "hnc/proxy_loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hnc/errors.hpp"
#include "hnc/kernels.hpp"

namespace hnc {

std::string to_string(Metric m) { return m == Metric::Cosine ? "cosine" : "neg_sq_euclidean"; }

Metric metric_from_string(const std::string& s) {
    if (s == "neg_sq_euclidean") return Metric::NegSqEuclidean;
    if (s == "cosine") return Metric::Cosine;
    throw Error(ErrorKind::Parse, "unknown distance metric '" + s + "'");
}

double distance(std::span<const double> q, std::span<const double> w, Metric metric) {
    if (metric == Metric::NegSqEuclidean) return -kernels::squared_distance(q, w);
    const double nq = std::sqrt(kernels::dot(q, q));
    const double nw = std::sqrt(kernels::dot(w, w));
    if (nq == 0.0 || nw == 0.0) throw Error(ErrorKind::ZeroVector, "cosine distance of a zero vector");
    return kernels::dot(q, w) / (nq * nw);
}

void distance_grad(std::span<const double> q, std::span<const double> w, Metric metric, std::span<double> grad) {
    if (metric == Metric::NegSqEuclidean) {
        for (std::size_t i = 0; i < q.size(); ++i) grad[i] = -2.0 * (q[i] - w[i]);
        return;
    }
    const double qq = kernels::dot(q, q);
    const double nq = std::sqrt(qq);
    const double nw = std::sqrt(kernels::dot(w, w));
    if (nq == 0.0 || nw == 0.0) throw Error(ErrorKind::ZeroVector, "cosine distance of a zero vector");
    const double cosine = kernels::dot(q, w) / (nq * nw);
    for (std::size_t i = 0; i < q.size(); ++i) grad[i] = w[i] / (nq * nw) - cosine * q[i] / qq;
}

ProxyNcaResult proxy_nca(std::span<const double> q, std::size_t positive, const PrototypeFrame& frame,
                         Metric metric, bool with_grad) {
    const std::size_t k = frame.size();
    if (k < 2) throw Error(ErrorKind::SingleColumnFrame, "proxy loss needs at least one negative prototype");
    if (positive >= k)
        throw Error(ErrorKind::InvalidRange, "positive index " + std::to_string(positive) + " outside frame");
    if (q.size() != frame.dim())
        throw Error(ErrorKind::DimensionMismatch, "query has " + std::to_string(q.size()) + " dims, frame " +
                                                      std::to_string(frame.dim()));
    ProxyNcaResult out;
    out.dloss_ddistance.assign(k, 0.0);
    std::vector<double> dist(k);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
        dist[c] = distance(q, frame.column(c), metric);
        if (c != positive) top = std::max(top, std::max(dist[c], kDistanceFloor));
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        if (c == positive) continue;
        const double e = std::exp(std::max(dist[c], kDistanceFloor) - top);
        out.dloss_ddistance[c] = e;
        sum += e;
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (c == positive) continue;
        // a clamped distance is constant in q
        out.dloss_ddistance[c] = dist[c] < kDistanceFloor ? 0.0 : out.dloss_ddistance[c] / sum;
    }
    out.dloss_ddistance[positive] = -1.0;
    out.loss = -dist[positive] + top + std::log(sum);

    if (with_grad) {
        out.grad.assign(q.size(), 0.0);
        std::vector<double> dd(q.size());
        for (std::size_t c = 0; c < k; ++c) {
            const double a = out.dloss_ddistance[c];
            if (a == 0.0) continue;
            distance_grad(q, frame.column(c), metric, dd);
            kernels::axpy(a, dd, out.grad);
        }
    }
    return out;
}

double proxy_nca_loss(std::span<const double> q, std::size_t positive, const PrototypeFrame& frame, Metric metric) {
    return proxy_nca(q, positive, frame, metric, false).loss;
}

std::vector<double> proxy_nca_grad(std::span<const double> q, std::size_t positive, const PrototypeFrame& frame,
                                   Metric metric) {
    return proxy_nca(q, positive, frame, metric, true).grad;
}

namespace {

std::size_t positive_column(const DecoderTrace& trace, const HNCTree& tree, std::size_t level) {
    const auto leaf = trace.assigned_leaf;
    if (leaf < 0 || static_cast<std::size_t>(leaf) >= tree.ancestor_columns.size())
        throw Error(ErrorKind::MissingAncestor, "leaf column " + std::to_string(leaf) + " is not in the tree");
    const auto& row = tree.ancestor_columns[static_cast<std::size_t>(leaf)];
    if (level < 1 || level > row.size())
        throw Error(ErrorKind::MissingAncestor, "no ancestor at level " + std::to_string(level));
    return row[level - 1];
}

void check_layers(const DecoderTrace& trace, std::span<const std::size_t> layer_map) {
    if (layer_map.size() != trace.per_layer.size())
        throw Error(ErrorKind::DimensionMismatch, "layer map covers " + std::to_string(layer_map.size()) +
                                                      " layers, trace has " + std::to_string(trace.per_layer.size()));
}

}  // namespace

LayerLosses hierarchical_loss(const DecoderTrace& trace, const HNCTree& tree, std::span<const std::size_t> layer_map,
                              const AlignmentConfig& cfg) {
    LayerLosses out;
    out.per_layer.assign(trace.per_layer.size(), 0.0);
    if (trace.assigned_leaf == DecoderTrace::kBackground) return out;
    check_layers(trace, layer_map);
    for (std::size_t j = 0; j < trace.per_layer.size(); ++j) {
        const std::size_t level = layer_map[j];
        const std::size_t pos = positive_column(trace, tree, level);
        out.per_layer[j] = proxy_nca_loss(trace.per_layer[j], pos, tree.level_frame(level), cfg.metric);
        out.total += cfg.weight(j) * out.per_layer[j];
    }
    return out;
}

std::vector<std::vector<double>> hierarchical_grad(const DecoderTrace& trace, const HNCTree& tree,
                                                   std::span<const std::size_t> layer_map,
                                                   const AlignmentConfig& cfg) {
    std::vector<std::vector<double>> out(trace.per_layer.size());
    for (std::size_t j = 0; j < out.size(); ++j) out[j].assign(trace.per_layer[j].size(), 0.0);
    if (trace.assigned_leaf == DecoderTrace::kBackground) return out;
    check_layers(trace, layer_map);
    for (std::size_t j = 0; j < trace.per_layer.size(); ++j) {
        const double w = cfg.weight(j);
        if (w == 0.0) continue;
        const std::size_t level = layer_map[j];
        const std::size_t pos = positive_column(trace, tree, level);
        auto g = proxy_nca_grad(trace.per_layer[j], pos, tree.level_frame(level), cfg.metric);
        for (auto& v : g) v *= w;
        out[j] = std::move(g);
    }
    return out;
}

}  // namespace hnc

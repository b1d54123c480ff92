#include <cmath>
#include <random>

#include "hnc/errors.hpp"
#include "hnc/kernels.hpp"
#include "hnc/trainer.hpp"

namespace hnc {

std::string to_string(HeadMode m) {
    switch (m) {
        case HeadMode::LearnedHead: return "learned_head";
        case HeadMode::FlatNc: return "flat_nc";
        case HeadMode::Hnc: return "hnc";
    }
    return "hnc";
}

HeadMode head_mode_from_string(const std::string& s) {
    if (s == "learned_head") return HeadMode::LearnedHead;
    if (s == "flat_nc") return HeadMode::FlatNc;
    if (s == "hnc") return HeadMode::Hnc;
    throw Error(ErrorKind::Parse, "unknown head mode '" + s + "'");
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"dim", c.dim},
            {"feature_dim", c.feature_dim},
            {"layers", c.layers},
            {"queries", c.queries},
            {"pool_bandwidth", c.pool_bandwidth},
            {"pool_floor", c.pool_floor},
            {"init_scale", c.init_scale},
            {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.dim = j.value("dim", c.dim);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.layers = j.value("layers", c.layers);
    c.queries = j.value("queries", c.queries);
    c.pool_bandwidth = j.value("pool_bandwidth", c.pool_bandwidth);
    c.pool_floor = j.value("pool_floor", c.pool_floor);
    c.init_scale = j.value("init_scale", c.init_scale);
    c.seed = j.value("seed", c.seed);
    return c;
}

std::vector<std::span<double>> Parameters::tensors() {
    std::vector<std::span<double>> out{w_in, b_in, query_seeds};
    for (std::size_t j = 0; j < block_w.size(); ++j) {
        out.emplace_back(block_w[j]);
        out.emplace_back(block_b[j]);
    }
    out.emplace_back(box_w);
    out.emplace_back(box_b);
    out.emplace_back(head_w);
    out.emplace_back(head_b);
    return out;
}

std::vector<std::span<const double>> Parameters::tensors() const {
    std::vector<std::span<const double>> out;
    for (auto s : const_cast<Parameters*>(this)->tensors()) out.emplace_back(s);
    return out;
}

std::size_t Parameters::size() const {
    std::size_t n = 0;
    for (auto t : tensors()) n += t.size();
    return n;
}

Parameters Parameters::zeros_like() const {
    Parameters z = *this;
    for (auto t : z.tensors()) std::fill(t.begin(), t.end(), 0.0);
    return z;
}

double& Parameters::at(std::size_t flat) {
    for (auto t : tensors()) {
        if (flat < t.size()) return t[flat];
        flat -= t.size();
    }
    throw Error(ErrorKind::InvalidRange, "parameter index out of range");
}

double Parameters::at(std::size_t flat) const { return const_cast<Parameters*>(this)->at(flat); }

nlohmann::json to_json(const Parameters& p) {
    return {{"w_in", p.w_in},       {"b_in", p.b_in},   {"query_seeds", p.query_seeds}, {"block_w", p.block_w},
            {"block_b", p.block_b}, {"box_w", p.box_w}, {"box_b", p.box_b},             {"head_w", p.head_w},
            {"head_b", p.head_b}};
}

Parameters parameters_from_json(const nlohmann::json& j) {
    Parameters p;
    j.at("w_in").get_to(p.w_in);
    j.at("b_in").get_to(p.b_in);
    j.at("query_seeds").get_to(p.query_seeds);
    j.at("block_w").get_to(p.block_w);
    j.at("block_b").get_to(p.block_b);
    j.at("box_w").get_to(p.box_w);
    j.at("box_b").get_to(p.box_b);
    j.at("head_w").get_to(p.head_w);
    j.at("head_b").get_to(p.head_b);
    return p;
}

namespace {

void fill_normal(std::vector<double>& v, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& x : v) x = stddev * normal(rng);
}

std::vector<std::array<double, 2>> grid_anchors(std::size_t n) {
    const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
    std::vector<std::array<double, 2>> a(n);
    for (std::size_t i = 0; i < n; ++i)
        a[i] = {(static_cast<double>(i % side) + 0.5) / static_cast<double>(side),
                (static_cast<double>(i / side) + 0.5) / static_cast<double>(side)};
    return a;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

ToyModel make_model(const ModelConfig& config, HeadMode mode, std::size_t head_classes) {
    if (config.layers < 1) throw Error(ErrorKind::InvalidRange, "model needs at least one block");
    if (config.queries < 1 || config.dim < 1 || config.feature_dim < 1)
        throw Error(ErrorKind::InvalidRange, "model sizes must be positive");
    ToyModel m;
    m.config = config;
    m.mode = mode;
    m.anchors = grid_anchors(config.queries);
    const std::size_t d = config.dim;
    const std::size_t in = config.feature_dim + kBoxInputs;
    std::seed_seq seq{config.seed, std::uint64_t{0x5EED}};
    std::mt19937_64 rng(seq);
    auto& p = m.params;
    p.w_in.resize(d * in);
    fill_normal(p.w_in, config.init_scale / std::sqrt(static_cast<double>(in)), rng);
    p.b_in.assign(d, 0.0);
    p.query_seeds.resize(config.queries * d);
    fill_normal(p.query_seeds, 0.1, rng);
    p.block_w.resize(config.layers);
    p.block_b.resize(config.layers);
    for (std::size_t j = 0; j < config.layers; ++j) {
        p.block_w[j].resize(d * d);
        fill_normal(p.block_w[j], 0.5 / std::sqrt(static_cast<double>(d)), rng);
        p.block_b[j].assign(d, 0.0);
    }
    p.box_w.resize(kBoxInputs * d);
    fill_normal(p.box_w, 0.1 / std::sqrt(static_cast<double>(d)), rng);
    p.box_b.assign(kBoxInputs, 0.0);
    if (mode == HeadMode::LearnedHead) grow_head(m, head_classes, config.seed);
    return m;
}

void grow_head(ToyModel& model, std::size_t classes, std::uint64_t seed) {
    auto& p = model.params;
    const std::size_t d = model.config.dim;
    const std::size_t have = p.head_b.size();
    if (classes <= have) return;
    std::seed_seq seq{seed, std::uint64_t{0x4EAD}, static_cast<std::uint64_t>(have)};
    std::mt19937_64 rng(seq);
    std::vector<double> rows((classes - have) * d);
    fill_normal(rows, 0.1 / std::sqrt(static_cast<double>(d)), rng);
    p.head_w.insert(p.head_w.end(), rows.begin(), rows.end());
    p.head_b.resize(classes, 0.0);
}

std::vector<DecoderTrace> ForwardResult::traces() const {
    std::vector<DecoderTrace> out;
    out.reserve(queries.size());
    for (const auto& q : queries) {
        DecoderTrace t;
        t.per_layer.assign(q.hidden.begin() + 1, q.hidden.end());
        out.push_back(std::move(t));
    }
    return out;
}

ForwardResult forward(const ToyModel& model, std::span<const ObservedObject> objects) {
    const auto& cfg = model.config;
    const auto& p = model.params;
    const std::size_t d = cfg.dim;
    const std::size_t in = cfg.feature_dim + kBoxInputs;
    for (const auto& o : objects)
        if (o.feature.size() != cfg.feature_dim)
            throw Error(ErrorKind::DimensionMismatch, "object feature has " + std::to_string(o.feature.size()) +
                                                          " dims, model expects " + std::to_string(cfg.feature_dim));
    const double inv_two_bw2 = 1.0 / (2.0 * cfg.pool_bandwidth * cfg.pool_bandwidth);
    const bool learned = model.mode == HeadMode::LearnedHead;

    ForwardResult out;
    out.queries.resize(cfg.queries);
    std::vector<double> kernel(objects.size());
    for (std::size_t qi = 0; qi < cfg.queries; ++qi) {
        QueryState& q = out.queries[qi];
        const auto& a = model.anchors[qi];
        double denom = cfg.pool_floor;
        for (std::size_t o = 0; o < objects.size(); ++o) {
            const double dx = a[0] - objects[o].box[0];
            const double dy = a[1] - objects[o].box[1];
            kernel[o] = std::exp(-(dx * dx + dy * dy) * inv_two_bw2);
            denom += kernel[o];
        }
        q.input.assign(in, 0.0);
        for (std::size_t o = 0; o < objects.size(); ++o) {
            const double w = kernel[o] / denom;
            kernels::axpy(w, objects[o].feature, std::span<double>(q.input.data(), cfg.feature_dim));
            for (std::size_t k = 0; k < kBoxInputs; ++k) q.input[cfg.feature_dim + k] += w * objects[o].box[k];
        }

        q.hidden.resize(cfg.layers + 1);
        q.act.resize(cfg.layers);
        std::vector<double>& h0 = q.hidden[0];
        h0.assign(p.b_in.begin(), p.b_in.end());
        kernels::axpy(1.0, std::span<const double>(p.query_seeds.data() + qi * d, d), h0);
        kernels::gemv(p.w_in, q.input, h0);
        for (std::size_t j = 0; j < cfg.layers; ++j) {
            std::vector<double> pre(p.block_b[j]);
            kernels::gemv(p.block_w[j], q.hidden[j], pre);
            for (auto& v : pre) v = std::tanh(v);
            q.hidden[j + 1] = q.hidden[j];
            kernels::axpy(1.0, pre, q.hidden[j + 1]);
            q.act[j] = std::move(pre);
        }
        q.box_logit.assign(p.box_b.begin(), p.box_b.end());
        kernels::gemv(p.box_w, q.hidden.back(), q.box_logit);
        for (std::size_t k = 0; k < kBoxInputs; ++k) q.box[k] = sigmoid(q.box_logit[k]);
        if (learned) {
            q.logits.assign(p.head_b.begin(), p.head_b.end());
            kernels::gemv(p.head_w, q.hidden.back(), q.logits);
        }
    }
    return out;
}

nlohmann::json to_json(const ToyModel& model) {
    return {{"config", to_json(model.config)}, {"mode", to_string(model.mode)}, {"params", to_json(model.params)}};
}

ToyModel model_from_json(const nlohmann::json& j) {
    try {
        ToyModel m;
        m.config = model_config_from_json(j.at("config"));
        m.mode = head_mode_from_string(j.at("mode").get<std::string>());
        m.params = parameters_from_json(j.at("params"));
        m.anchors = grid_anchors(m.config.queries);
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Parse, std::string("model: ") + e.what());
    }
}

}  // namespace hnc

#include "hnc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>

#include "hnc/errors.hpp"
#include "hnc/kernels.hpp"

namespace hnc {

namespace {

double norm(std::span<const double> v) { return std::sqrt(kernels::dot(v, v)); }

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.begin(), logits.end());
    if (p.empty()) return p;
    const double top = *std::max_element(p.begin(), p.end());
    double sum = 0.0;
    for (auto& v : p) {
        v = std::exp(v - top);
        sum += v;
    }
    for (auto& v : p) v /= sum;
    return p;
}

}  // namespace

std::size_t ClassHead::column_of(const std::string& leaf) const {
    auto it = std::find(classes.begin(), classes.end(), leaf);
    if (it == classes.end()) throw Error(ErrorKind::MissingAncestor, "class '" + leaf + "' is not in the head");
    return static_cast<std::size_t>(it - classes.begin());
}

const PrototypeFrame* ClassHead::leaf_frame() const {
    if (mode == HeadMode::Hnc && tree) return &tree->layers.at(0);
    if (mode == HeadMode::FlatNc && flat) return &*flat;
    return nullptr;
}

std::vector<double> class_scores(const ToyModel& model, const ClassHead& head, const QueryState& q) {
    (void)model;
    if (head.mode == HeadMode::LearnedHead) return softmax(q.logits);
    const PrototypeFrame* frame = head.leaf_frame();
    if (!frame) throw Error(ErrorKind::MissingSnapshot, "prototype head has no frame");
    const auto out = q.output();
    const double nq = norm(out);
    std::vector<double> s(frame->size(), 0.5);
    if (nq == 0.0) return s;
    for (std::size_t k = 0; k < frame->size(); ++k) {
        const auto w = frame->column(k);
        s[k] = 0.5 * (1.0 + kernels::dot(out, w) / (nq * norm(w)));
    }
    return s;
}

std::optional<std::pair<std::size_t, double>> classify(const ToyModel& model, const ClassHead& head,
                                                       const QueryState& q, const PredictConfig& cfg) {
    (void)model;
    if (head.mode == HeadMode::LearnedHead) {
        if (q.logits.empty()) return std::nullopt;
        const auto p = softmax(q.logits);
        const auto k = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        return std::pair{k, p[k]};
    }
    const PrototypeFrame* frame = head.leaf_frame();
    if (!frame) throw Error(ErrorKind::MissingSnapshot, "prototype head has no frame");
    const auto out = q.output();
    std::size_t best = 0;
    double best_dot = -std::numeric_limits<double>::infinity();
    double mean_norm = 0.0;
    for (std::size_t k = 0; k < frame->size(); ++k) {
        const double v = kernels::dot(out, frame->column(k));
        if (v > best_dot) {
            best_dot = v;
            best = k;
        }
        mean_norm += norm(frame->column(k));
    }
    mean_norm /= static_cast<double>(frame->size());
    const double score = best_dot / norm(frame->column(best));
    if (score < cfg.tau_fraction * mean_norm) return std::nullopt;
    return std::pair{best, score};
}

std::vector<Detection> predict(const ToyModel& model, const ClassHead& head, std::span<const ObservedObject> objects,
                               const PredictConfig& cfg) {
    const ForwardResult fwd = forward(model, objects);
    std::vector<Detection> out;
    for (std::size_t qi = 0; qi < fwd.queries.size(); ++qi) {
        const auto c = classify(model, head, fwd.queries[qi], cfg);
        if (!c) continue;
        out.push_back({qi, head.classes.at(c->first), c->second, fwd.queries[qi].box});
    }
    return out;
}

std::vector<ObservedObject> VectorSceneSource::observe(std::size_t i) const {
    std::vector<ObservedObject> out;
    for (const auto& o : (*scenes_)[i].objects) out.push_back({o.feature, o.box});
    return out;
}

std::vector<Annotation> VectorSceneSource::annotations(std::size_t i) const {
    std::vector<Annotation> out;
    const auto& objs = (*scenes_)[i].objects;
    for (std::size_t o = 0; o < objs.size(); ++o)
        if (objs[o].annotated()) out.push_back({o, objs[o].leaf, objs[o].box});
    return out;
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"lr", c.lr},
            {"batch_size", c.batch_size},
            {"lambda_align", c.lambda_align},
            {"lambda_box", c.lambda_box},
            {"match_cls", c.match_cls},
            {"match_box", c.match_box},
            {"metric", to_string(c.alignment.metric)},
            {"layer_weights", c.alignment.per_layer_weights},
            {"tau_bg", c.predict.tau_fraction},
            {"probe_scenes", c.probe_scenes},
            {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lambda_align = j.value("lambda_align", c.lambda_align);
    c.lambda_box = j.value("lambda_box", c.lambda_box);
    c.match_cls = j.value("match_cls", c.match_cls);
    c.match_box = j.value("match_box", c.match_box);
    c.alignment.metric = metric_from_string(j.value("metric", std::string("cosine")));
    c.alignment.per_layer_weights = j.value("layer_weights", std::vector<double>{});
    c.predict.tau_fraction = j.value("tau_bg", c.predict.tau_fraction);
    c.probe_scenes = j.value("probe_scenes", c.probe_scenes);
    c.seed = j.value("seed", c.seed);
    return c;
}

SceneMatch match_scene(const ToyModel& model, const ClassHead& head, const ForwardResult& fwd,
                       std::span<const Annotation> annotations, double match_cls, double match_box) {
    std::vector<QueryPrediction> preds;
    preds.reserve(fwd.queries.size());
    for (const auto& q : fwd.queries) preds.push_back({class_scores(model, head, q), q.box});
    std::vector<GroundTruth> gts;
    for (const auto& a : annotations) gts.push_back({head.column_of(a.leaf), a.box});
    SceneMatch m;
    m.query_of_annotation = hungarian(build_cost(preds, gts, match_cls, match_box)).query_of_object;
    return m;
}

LossParts scene_loss(const ToyModel& model, const ClassHead& head, std::span<const ObservedObject> objects,
                     std::span<const Annotation> annotations, const SceneMatch& match, const TrainConfig& cfg,
                     Parameters* grad) {
    LossParts parts;
    if (annotations.empty()) return parts;
    const ForwardResult fwd = forward(model, objects);
    const auto& mc = model.config;
    const std::size_t d = mc.dim;
    const std::size_t l = mc.layers;
    const auto& p = model.params;

    for (std::size_t a = 0; a < annotations.size(); ++a) {
        const std::size_t qi = match.query_of_annotation.at(a);
        const QueryState& q = fwd.queries.at(qi);
        const std::size_t cls = head.column_of(annotations[a].leaf);
        // dL/dh_j for j = 0..l
        std::vector<std::vector<double>> g(l + 1, std::vector<double>(d, 0.0));

        switch (head.mode) {
            case HeadMode::Hnc: {
                DecoderTrace trace;
                trace.per_layer.assign(q.hidden.begin() + 1, q.hidden.end());
                trace.assigned_leaf = static_cast<std::int64_t>(cls);
                parts.align += hierarchical_loss(trace, *head.tree, head.layer_map, cfg.alignment).total;
                if (grad) {
                    const auto gl = hierarchical_grad(trace, *head.tree, head.layer_map, cfg.alignment);
                    for (std::size_t j = 0; j < l; ++j) kernels::axpy(cfg.lambda_align, gl[j], g[j + 1]);
                }
                break;
            }
            case HeadMode::FlatNc: {
                auto r = proxy_nca(q.output(), cls, *head.flat, cfg.alignment.metric, grad != nullptr);
                parts.align += r.loss;
                if (grad) kernels::axpy(cfg.lambda_align, r.grad, g[l]);
                break;
            }
            case HeadMode::LearnedHead: {
                const auto prob = softmax(q.logits);
                const double top = *std::max_element(q.logits.begin(), q.logits.end());
                double sum = 0.0;
                for (double v : q.logits) sum += std::exp(v - top);
                parts.align += top + std::log(sum) - q.logits[cls];
                if (grad) {
                    std::vector<double> dlogit(prob);
                    dlogit[cls] -= 1.0;
                    for (auto& v : dlogit) v *= cfg.lambda_align;
                    kernels::rank1_update(grad->head_w, 1.0, dlogit, q.output());
                    kernels::axpy(1.0, dlogit, grad->head_b);
                    kernels::gemv_transposed(p.head_w, dlogit, g[l]);
                }
                break;
            }
        }

        const Box& target = annotations[a].box;
        std::vector<double> dlogit_box(kBoxInputs, 0.0);
        for (std::size_t k = 0; k < kBoxInputs; ++k) {
            const double diff = q.box[k] - target[k];
            parts.box += std::abs(diff);
            const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
            dlogit_box[k] = cfg.lambda_box * sign * q.box[k] * (1.0 - q.box[k]);
        }
        ++parts.matched;
        if (!grad) continue;

        kernels::rank1_update(grad->box_w, 1.0, dlogit_box, q.output());
        kernels::axpy(1.0, dlogit_box, grad->box_b);
        kernels::gemv_transposed(p.box_w, dlogit_box, g[l]);

        for (std::size_t j = l; j >= 1; --j) {
            const auto& t = q.act[j - 1];
            std::vector<double> dpre(d);
            for (std::size_t i = 0; i < d; ++i) dpre[i] = g[j][i] * (1.0 - t[i] * t[i]);
            kernels::rank1_update(grad->block_w[j - 1], 1.0, dpre, q.hidden[j - 1]);
            kernels::axpy(1.0, dpre, grad->block_b[j - 1]);
            kernels::axpy(1.0, g[j], g[j - 1]);
            kernels::gemv_transposed(p.block_w[j - 1], dpre, g[j - 1]);
        }
        kernels::rank1_update(grad->w_in, 1.0, g[0], q.input);
        kernels::axpy(1.0, g[0], grad->b_in);
        kernels::axpy(1.0, g[0], std::span<double>(grad->query_seeds.data() + qi * d, d));
    }
    return parts;
}

EvalMetrics evaluate(const ToyModel& model, const ClassHead& head, const SceneSource& data,
                     const std::vector<std::string>& old_classes, const TrainConfig& cfg,
                     const EvalMetrics* baseline) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> tally;  // correct, total
    double box_l1 = 0.0;
    std::size_t matched = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::vector<Annotation> known;
        for (auto& a : data.annotations(i))
            if (std::find(head.classes.begin(), head.classes.end(), a.leaf) != head.classes.end())
                known.push_back(std::move(a));
        if (known.empty()) continue;
        const auto objects = data.observe(i);
        const ForwardResult fwd = forward(model, objects);
        // same matcher as training; box-only matching lets idle queries steal objects
        const SceneMatch match = match_scene(model, head, fwd, known, cfg.match_cls, cfg.match_box);
        for (std::size_t o = 0; o < known.size(); ++o) {
            const QueryState& q = fwd.queries[match.query_of_annotation[o]];
            const auto c = classify(model, head, q, cfg.predict);
            auto& t = tally[known[o].leaf];
            t.second += 1;
            if (c && head.classes[c->first] == known[o].leaf) t.first += 1;
            for (std::size_t k = 0; k < 4; ++k) box_l1 += std::abs(q.box[k] - known[o].box[k]);
            ++matched;
        }
    }
    EvalMetrics m;
    double all = 0.0, old_sum = 0.0, new_sum = 0.0;
    std::size_t n_old = 0, n_new = 0;
    for (const auto& [leaf, t] : tally) {
        const double acc = static_cast<double>(t.first) / static_cast<double>(t.second);
        m.per_class_accuracy[leaf] = acc;
        all += acc;
        if (std::find(old_classes.begin(), old_classes.end(), leaf) != old_classes.end()) {
            old_sum += acc;
            ++n_old;
        } else {
            new_sum += acc;
            ++n_new;
        }
    }
    m.accuracy = tally.empty() ? 0.0 : all / static_cast<double>(tally.size());
    if (n_old) m.acc_old = old_sum / static_cast<double>(n_old);
    if (n_new) m.acc_new = new_sum / static_cast<double>(n_new);
    m.mean_box_l1 = matched ? box_l1 / static_cast<double>(matched) : 0.0;
    m.forgetting = baseline ? m.acc_old - baseline->acc_old : 0.0;
    return m;
}

nlohmann::json to_json(const EvalMetrics& m) {
    auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    return {{"per_class_accuracy", m.per_class_accuracy},
            {"accuracy", m.accuracy},
            {"acc_old", num(m.acc_old)},
            {"acc_new", num(m.acc_new)},
            {"mean_box_l1", m.mean_box_l1},
            {"forgetting", num(m.forgetting)}};
}

EvalMetrics eval_metrics_from_json(const nlohmann::json& j) {
    auto num = [&](const char* k) {
        return j.at(k).is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at(k).get<double>();
    };
    EvalMetrics m;
    m.per_class_accuracy = j.at("per_class_accuracy").get<std::map<std::string, double>>();
    m.accuracy = j.at("accuracy").get<double>();
    m.acc_old = num("acc_old");
    m.acc_new = num("acc_new");
    m.mean_box_l1 = j.at("mean_box_l1").get<double>();
    m.forgetting = num("forgetting");
    return m;
}

namespace {

void put(std::ostream& out, double v) {
    if (std::isnan(v)) {
        out << "nan";
        return;
    }
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    out << buf;
}

Eigen::MatrixXd classifier_matrix(const ToyModel& model, const ClassHead& head) {
    if (const PrototypeFrame* f = head.leaf_frame()) return f->vectors;
    const std::size_t d = model.config.dim;
    const std::size_t k = model.head_classes();
    Eigen::MatrixXd w(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t i = 0; i < d; ++i)
            w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = model.params.head_w[c * d + i];
    return w;
}

}  // namespace

void write_epoch_csv_row(std::ostream& out, const EpochLog& log) {
    out << log.run_id << ',' << log.epoch << ',' << log.mode << ',';
    for (double v : {log.loss_align, log.loss_box, log.acc_old, log.acc_new, log.nc.nc1, log.nc.nc2, log.nc.nc3,
                     log.nc.nc4_agreement}) {
        put(out, v);
        out << ',';
    }
    put(out, log.instability);
    out << '\n';
}

NCReport probe_nc(const ToyModel& model, const ClassHead& head, const SceneSource& data, std::size_t probe,
                  const TrainConfig& cfg) {
    std::vector<std::vector<std::vector<double>>> by_class(head.classes.size());
    const std::size_t n = std::min(probe, data.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto ann = data.annotations(i);
        if (ann.empty()) continue;
        const auto objects = data.observe(i);
        const ForwardResult fwd = forward(model, objects);
        const SceneMatch m = match_scene(model, head, fwd, ann, cfg.match_cls, cfg.match_box);
        for (std::size_t a = 0; a < ann.size(); ++a) {
            const auto out = fwd.queries[m.query_of_annotation[a]].output();
            by_class[head.column_of(ann[a].leaf)].emplace_back(out.begin(), out.end());
        }
    }
    try {
        return nc_metrics(by_class, classifier_matrix(model, head));
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::DegenerateClass) throw;
        const double nan = std::numeric_limits<double>::quiet_NaN();
        return {nan, nan, nan, nan};
    }
}

PhaseResult train_phase(ToyModel& model, const ClassHead& head, const SceneSource& data, const TrainConfig& cfg,
                        const PhaseContext& ctx) {
    if (data.size() == 0) throw Error(ErrorKind::EmptyPhase, "phase has no scenes");
    if (head.mode != model.mode) throw Error(ErrorKind::Validation, "head mode does not match model mode");
    if (head.mode == HeadMode::LearnedHead && model.head_classes() != head.classes.size())
        throw Error(ErrorKind::Validation, "learned head has " + std::to_string(model.head_classes()) +
                                               " rows for " + std::to_string(head.classes.size()) + " classes");
    PhaseResult result;
    const std::size_t probe = std::min(cfg.probe_scenes, data.size());
    result.initial_nc = probe_nc(model, head, data, probe, cfg);

    std::vector<std::size_t> order(data.size());
    std::vector<AssignmentRecord> previous;
    const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::seed_seq seq{cfg.seed, std::uint64_t{0xE90C}, static_cast<std::uint64_t>(epoch)};
        std::mt19937_64 rng(seq);
        std::shuffle(order.begin(), order.end(), rng);

        double sum_align = 0.0, sum_box = 0.0;
        std::size_t sum_matched = 0;
        for (std::size_t start = 0; start < order.size(); start += batch) {
            Parameters grad = model.params.zeros_like();
            std::size_t matched = 0;
            for (std::size_t b = start; b < std::min(order.size(), start + batch); ++b) {
                const std::size_t i = order[b];
                const auto ann = data.annotations(i);
                if (ann.empty()) continue;
                const auto objects = data.observe(i);
                const ForwardResult fwd = forward(model, objects);
                const SceneMatch m = match_scene(model, head, fwd, ann, cfg.match_cls, cfg.match_box);
                const LossParts parts = scene_loss(model, head, objects, ann, m, cfg, &grad);
                sum_align += parts.align;
                sum_box += parts.box;
                matched += parts.matched;
            }
            sum_matched += matched;
            if (matched == 0) continue;
            const double step = -cfg.lr / static_cast<double>(matched);
            auto dst = model.params.tensors();
            const auto src = std::as_const(grad).tensors();
            for (std::size_t t = 0; t < dst.size(); ++t) kernels::axpy(step, src[t], dst[t]);
        }

        EpochLog log;
        log.run_id = ctx.run_id;
        log.epoch = epoch;
        log.mode = to_string(model.mode);
        const double denom = sum_matched ? static_cast<double>(sum_matched) : 1.0;
        log.loss_align = sum_align / denom;
        log.loss_box = sum_box / denom;

        std::vector<AssignmentRecord> records;
        for (std::size_t i = 0; i < probe; ++i) {
            const auto ann = data.annotations(i);
            const auto objects = data.observe(i);
            const ForwardResult fwd = forward(model, objects);
            AssignmentRecord r;
            r.scene_id = data.scene_id(i);
            r.epoch = static_cast<std::int64_t>(epoch);
            if (!ann.empty())
                r.assigned_query = match_scene(model, head, fwd, ann, cfg.match_cls, cfg.match_box).query_of_annotation;
            records.push_back(std::move(r));
        }
        if (!previous.empty()) log.instability = instability(previous, records);
        result.records.insert(result.records.end(), records.begin(), records.end());
        previous = std::move(records);

        log.nc = probe_nc(model, head, data, probe, cfg);
        if (ctx.eval) {
            const EvalMetrics em = evaluate(model, head, *ctx.eval, ctx.old_classes, cfg);
            log.acc_old = em.acc_old;
            log.acc_new = em.acc_new;
        } else {
            log.acc_old = log.acc_new = std::numeric_limits<double>::quiet_NaN();
        }
        result.logs.push_back(std::move(log));
    }
    return result;
}

nlohmann::json to_json(const ClassHead& head) {
    nlohmann::json j{{"mode", to_string(head.mode)}, {"classes", head.classes}, {"layer_map", head.layer_map}};
    if (head.tree) j["tree"] = to_json(*head.tree);
    if (head.flat) j["flat"] = to_json(*head.flat);
    return j;
}

ClassHead class_head_from_json(const nlohmann::json& j) {
    try {
        ClassHead h;
        h.mode = head_mode_from_string(j.at("mode").get<std::string>());
        h.classes = j.at("classes").get<std::vector<std::string>>();
        h.layer_map = j.at("layer_map").get<std::vector<std::size_t>>();
        if (j.contains("tree")) h.tree = tree_from_json(j.at("tree"));
        if (j.contains("flat")) h.flat = frame_from_json(j.at("flat"));
        return h;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Parse, std::string("class head: ") + e.what());
    }
}

}  // namespace hnc

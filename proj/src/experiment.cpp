#include "hnc/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "hnc/errors.hpp"

namespace hnc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <class T>
void read(const json& obj, const char* key, const std::string& path, T& out) {
    if (!obj.is_object() || !obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw Error(ErrorKind::Validation, path + key + ": wrong type");
    }
}

json section(const json& j, const char* key) {
    if (!j.contains(key)) return json::object();
    if (!j.at(key).is_object()) throw Error(ErrorKind::Validation, std::string(key) + ": expected an object");
    return j.at(key);
}

void require(bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw Error(ErrorKind::Validation, field + ": " + what);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
    out << content;
    if (!out) throw Error(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

std::string sha256_hex(const std::vector<std::string>& parts) {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw Error(ErrorKind::Io, "sha256 unavailable");
    }
    for (const auto& p : parts) EVP_DigestUpdate(ctx, p.data(), p.size());
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::uint64_t phase_seed(std::uint64_t seed, std::size_t phase) {
    return seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(phase) + 1;
}

}  // namespace

void validate(const ExperimentConfig& c) {
    if (!fs::exists(c.taxonomy_path))
        throw Error(ErrorKind::Io, "taxonomy file '" + c.taxonomy_path.string() + "' does not exist");
    const auto& d = c.data;
    require(d.scenes > 0, "data.scenes", "must be > 0");
    require(d.min_objects <= d.max_objects, "data.min_objects", "exceeds data.max_objects");
    require(d.max_objects <= c.model.queries, "data.max_objects", "exceeds model.queries");
    require(d.noise >= 0.0 && std::isfinite(d.noise), "data.noise", "must be finite and >= 0");
    require(std::isfinite(d.imbalance), "data.imbalance", "must be finite");
    require(d.center_scale > 0.0 && std::isfinite(d.center_scale), "data.center_scale", "must be > 0");
    require(d.feature_dim > 0, "data.feature_dim", "must be > 0");
    require(c.test_scenes > 0, "data.test_scenes", "must be > 0");
    require(c.model.dim > 0, "model.dim", "must be > 0");
    require(c.model.layers > 0, "model.layers", "must be > 0");
    require(c.model.queries > 0, "model.queries", "must be > 0");
    require(c.model.pool_bandwidth > 0.0, "model.pool_bandwidth", "must be > 0");
    require(c.model.pool_floor > 0.0, "model.pool_floor", "must be > 0");
    const auto& t = c.train;
    require(t.lr > 0.0 && std::isfinite(t.lr), "training.lr", "must be finite and > 0");
    require(t.batch_size > 0, "training.batch_size", "must be > 0");
    require(t.lambda_align >= 0.0, "training.lambda_align", "must be >= 0");
    require(t.lambda_box >= 0.0, "training.lambda_box", "must be >= 0");
    require(t.match_cls >= 0.0, "training.match_cls", "must be >= 0");
    require(t.match_box >= 0.0, "training.match_box", "must be >= 0");
    require(t.predict.tau_fraction >= 0.0, "training.tau_bg", "must be >= 0");
    for (double w : t.alignment.per_layer_weights)
        require(w >= 0.0 && std::isfinite(w), "training.layer_weights", "weights must be finite and >= 0");
    require(t.alignment.per_layer_weights.empty() || t.alignment.per_layer_weights.size() == c.model.layers,
            "training.layer_weights", "needs one weight per decoder layer");
    require(!c.seeds.empty(), "seeds", "must not be empty");
    require(!c.modes.empty(), "modes", "must not be empty");
    require(c.workers > 0, "workers", "must be > 0");
    require(c.phases.empty() != c.phase_sizes.empty(), "schedule", "give exactly one of 'phases' or 'sizes'");
    const std::size_t n_phases = c.phases.empty() ? c.phase_sizes.size() : c.phases.size();
    require(c.phase_epochs.empty() || c.phase_epochs.size() == n_phases, "training.phase_epochs",
            "needs one entry per phase");
}

ExperimentConfig experiment_config_from_json(const json& j, const fs::path& base) {
    if (!j.is_object()) throw Error(ErrorKind::Validation, "config: expected an object");
    ExperimentConfig c;
    std::string taxonomy;
    read(j, "taxonomy", "", taxonomy);
    require(!taxonomy.empty(), "taxonomy", "missing");
    c.taxonomy_path = fs::path(taxonomy).is_absolute() ? fs::path(taxonomy) : base / taxonomy;

    const json data = section(j, "data");
    auto& d = c.data;
    read(data, "scenes", "data.", d.scenes);
    read(data, "min_objects", "data.", d.min_objects);
    read(data, "max_objects", "data.", d.max_objects);
    read(data, "noise", "data.", d.noise);
    read(data, "imbalance", "data.", d.imbalance);
    read(data, "center_scale", "data.", d.center_scale);
    read(data, "feature_dim", "data.", d.feature_dim);
    read(data, "seed", "data.", d.seed);
    read(data, "test_scenes", "data.", c.test_scenes);

    const json schedule = section(j, "schedule");
    read(schedule, "phases", "schedule.", c.phases);
    read(schedule, "sizes", "schedule.", c.phase_sizes);

    const json model = section(j, "model");
    auto& m = c.model;
    read(model, "dim", "model.", m.dim);
    read(model, "layers", "model.", m.layers);
    read(model, "queries", "model.", m.queries);
    read(model, "pool_bandwidth", "model.", m.pool_bandwidth);
    read(model, "pool_floor", "model.", m.pool_floor);
    read(model, "init_scale", "model.", m.init_scale);
    m.feature_dim = d.feature_dim;

    const json training = section(j, "training");
    auto& t = c.train;
    read(training, "epochs", "training.", t.epochs);
    read(training, "phase_epochs", "training.", c.phase_epochs);
    read(training, "lr", "training.", t.lr);
    read(training, "batch_size", "training.", t.batch_size);
    read(training, "lambda_align", "training.", t.lambda_align);
    read(training, "lambda_box", "training.", t.lambda_box);
    read(training, "match_cls", "training.", t.match_cls);
    read(training, "match_box", "training.", t.match_box);
    read(training, "layer_weights", "training.", t.alignment.per_layer_weights);
    read(training, "tau_bg", "training.", t.predict.tau_fraction);
    read(training, "probe_scenes", "training.", t.probe_scenes);
    std::string metric = to_string(t.alignment.metric);
    read(training, "metric", "training.", metric);
    try {
        t.alignment.metric = metric_from_string(metric);
    } catch (const Error&) {
        throw Error(ErrorKind::Validation, "training.metric: unknown metric '" + metric + "'");
    }

    if (j.contains("modes")) {
        std::vector<std::string> names;
        read(j, "modes", "", names);
        c.modes.clear();
        for (const auto& n : names) {
            try {
                c.modes.push_back(head_mode_from_string(n));
            } catch (const Error&) {
                throw Error(ErrorKind::Validation, "modes: unknown mode '" + n + "'");
            }
        }
    }
    read(j, "seeds", "", c.seeds);
    read(j, "workers", "", c.workers);
    std::string out = c.output_dir.string();
    read(j, "output_dir", "", out);
    c.output_dir = fs::path(out).is_absolute() ? fs::path(out) : base / out;
    if (const char* root = std::getenv("HNC_OUTPUT_ROOT"); root && *root) c.output_dir = root;
    validate(c);
    return c;
}

json to_json(const ExperimentConfig& c) {
    std::vector<std::string> modes;
    for (auto m : c.modes) modes.push_back(to_string(m));
    json schedule = c.phases.empty() ? json{{"sizes", c.phase_sizes}} : json{{"phases", c.phases}};
    json data = to_json(c.data);
    data["test_scenes"] = c.test_scenes;
    json training = to_json(c.train);
    training["phase_epochs"] = c.phase_epochs;
    return {{"taxonomy", c.taxonomy_path.string()},
            {"data", data},
            {"schedule", schedule},
            {"model", to_json(c.model)},
            {"training", training},
            {"modes", modes},
            {"seeds", c.seeds},
            {"output_dir", c.output_dir.string()},
            {"workers", c.workers}};
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Parse, "config '" + path.string() + "': " + e.what());
    }
    return experiment_config_from_json(j, path.parent_path());
}

std::vector<std::vector<std::string>> resolve_partition(const ExperimentConfig& config,
                                                        const ClassTaxonomy& taxonomy) {
    if (!config.phases.empty()) return config.phases;
    return partition_by_sizes(taxonomy.level(1), config.phase_sizes);
}

std::size_t epochs_for_phase(const ExperimentConfig& config, std::size_t phase) {
    return config.phase_epochs.empty() ? config.train.epochs : config.phase_epochs.at(phase);
}

GeneratorParams test_params(const ExperimentConfig& config) {
    GeneratorParams p = config.data;
    p.scenes = config.test_scenes;
    p.split = 1;
    p.id_prefix = "t";
    return p;
}

std::string run_id(HeadMode mode, std::uint64_t seed) { return to_string(mode) + "-s" + std::to_string(seed); }

std::string phase_run_id(HeadMode mode, std::uint64_t seed, std::size_t phase) {
    return run_id(mode, seed) + "-p" + std::to_string(phase);
}

ClassTaxonomy phase_taxonomy(const ClassTaxonomy& full, const std::vector<std::string>& leaves,
                             const std::vector<Scene>& scenes) {
    std::set<std::string> keep;
    for (const auto& leaf : leaves) {
        if (!full.contains(leaf) || full.level_of(leaf) != 1)
            throw Error(ErrorKind::InvalidRange, "'" + leaf + "' is not a leaf of the taxonomy");
        for (int level = 1; level <= static_cast<int>(full.depth()); ++level) keep.insert(full.ancestor(leaf, level));
    }
    std::map<std::string, std::int64_t> counts;
    for (const auto& s : scenes)
        for (const auto& o : s.objects)
            if (o.annotated()) ++counts[o.leaf];
    std::vector<NodeSpec> nodes;
    for (auto n : full.nodes()) {
        if (!keep.count(n.id)) continue;
        if (n.level == 1) n.count = std::max<std::int64_t>(1, counts[n.id]);
        nodes.push_back(std::move(n));
    }
    return ClassTaxonomy::from_nodes(std::move(nodes));
}

namespace {

std::vector<NodeSpec> new_nodes_for(const ClassTaxonomy& full, const ClassTaxonomy& current,
                                    const std::vector<std::string>& leaves, const std::vector<Scene>& scenes) {
    const ClassTaxonomy sub = phase_taxonomy(full, leaves, scenes);
    std::vector<NodeSpec> out;
    // coarse levels first so parents precede children
    for (std::size_t level = sub.depth(); level >= 1; --level) {
        for (const auto& id : sub.level(level)) {
            if (current.contains(id)) continue;
            NodeSpec n;
            n.id = id;
            n.name = sub.name_of(id);
            n.level = static_cast<int>(level);
            n.parent = sub.parent_of(id);
            if (level == 1) n.count = sub.leaf_count(id);
            out.push_back(std::move(n));
        }
        if (level == 1) break;
    }
    return out;
}

// map_layers, with layers that land on a single-prototype level (no
// negatives for the proxy loss) moved to the next finer level.
std::vector<std::size_t> usable_layer_map(const HNCTree& tree, std::size_t layers) {
    auto map = map_layers(tree.depth(), layers);
    for (auto& level : map)
        while (level > 1 && tree.level_frame(level).size() < 2) --level;
    return map;
}

void write_epochs(std::ostream& out, const std::vector<EpochLog>& logs) {
    for (const auto& l : logs) write_epoch_csv_row(out, l);
}

}  // namespace

RunOutcome run_one(const ExperimentConfig& config, const ClassTaxonomy& taxonomy, const Dataset& train,
                   const Dataset& test, HeadMode mode, std::uint64_t seed, const fs::path& run_dir) {
    const auto partition = resolve_partition(config, taxonomy);
    const PhaseSchedule schedule = split_phases(train, partition);
    const VectorSceneSource test_source(test.scenes);

    ModelConfig mc = config.model;
    mc.seed = seed;
    RunOutcome run;
    run.mode = mode;
    run.seed = seed;
    run.model = make_model(mc, mode, 0);

    ClassHead head;
    head.mode = mode;
    std::vector<std::string> seen;
    const std::vector<std::string>& old_classes = partition.at(0);
    std::ofstream epochs_csv;
    if (!run_dir.empty()) {
        fs::create_directories(run_dir);
        epochs_csv.open(run_dir / "epochs.csv", std::ios::binary);
        if (!epochs_csv) throw Error(ErrorKind::Io, "cannot write '" + (run_dir / "epochs.csv").string() + "'");
        epochs_csv << kEpochCsvHeader << '\n';
    }

    for (std::size_t k = 0; k < partition.size(); ++k) {
        const auto& scenes = schedule.scenes[k];
        if (scenes.empty())
            throw Error(ErrorKind::EmptyPhase, "phase " + std::to_string(k) + " has no annotated scenes");
        seen.insert(seen.end(), partition[k].begin(), partition[k].end());
        switch (mode) {
            case HeadMode::Hnc:
                if (k == 0)
                    head.tree = build_hnc(phase_taxonomy(taxonomy, partition[0], scenes), mc.dim, seed);
                else
                    head.tree = add_classes(*head.tree, new_nodes_for(taxonomy, head.tree->taxonomy, partition[k], scenes),
                                            phase_seed(seed, k));
                head.classes = head.tree->taxonomy.level(1);
                head.layer_map = usable_layer_map(*head.tree, mc.layers);
                break;
            case HeadMode::FlatNc:
                // rebuilt over all current leaves at every boundary
                head.classes = seen;
                head.flat = build_simplex_etf(seen.size(), mc.dim, seed);
                break;
            case HeadMode::LearnedHead:
                head.classes = seen;
                grow_head(run.model, seen.size(), phase_seed(seed, k));
                break;
        }

        TrainConfig tc = config.train;
        tc.epochs = epochs_for_phase(config, k);
        tc.seed = phase_seed(seed, k);
        PhaseContext ctx{phase_run_id(mode, seed, k), &test_source, old_classes};
        const VectorSceneSource source(scenes);
        PhaseOutcome po;
        po.result = train_phase(run.model, head, source, tc, ctx);
        po.metrics = evaluate(run.model, head, test_source, old_classes, tc,
                              k == 0 ? nullptr : &run.phases.front().metrics);
        po.head = head;

        if (!run_dir.empty()) {
            write_epochs(epochs_csv, po.result.logs);
            std::ostringstream assignments;
            write_assignment_csv(assignments, po.result.records);
            write_file(run_dir / ("assignments_p" + std::to_string(k) + ".csv"), assignments.str());
            const json snapshot{{"run_id", ctx.run_id},
                                {"phase", k},
                                {"model", to_json(run.model)},
                                {"head", to_json(head)}};
            write_file(run_dir / ("snapshot_p" + std::to_string(k) + ".json"), snapshot.dump() + "\n");
            json metrics = to_json(po.metrics);
            metrics["run_id"] = ctx.run_id;
            metrics["phase"] = k;
            write_file(run_dir / ("metrics_p" + std::to_string(k) + ".json"), metrics.dump(2) + "\n");
        }
        run.phases.push_back(std::move(po));
    }
    return run;
}

DataFiles data_files(const ExperimentConfig& config) {
    const fs::path dir = config.output_dir / "data";
    return {dir / "train.jsonl", dir / "test.jsonl", dir / "manifest.json", {}};
}

DataFiles cmd_gen_data(const ExperimentConfig& config) {
    const ClassTaxonomy taxonomy = load_taxonomy_file(config.taxonomy_path.string());
    DataFiles files = data_files(config);
    fs::create_directories(files.train.parent_path());
    std::ostringstream train, test;
    write_dataset(train, generate_scenes(taxonomy, config.data));
    write_dataset(test, generate_scenes(taxonomy, test_params(config)));
    write_file(files.train, train.str());
    write_file(files.test, test.str());
    files.sha256 = sha256_hex({train.str(), test.str()});
    json data = to_json(config.data);
    data["test_scenes"] = config.test_scenes;
    const json manifest{{"format", "hnc-manifest/1"},
                        {"taxonomy", config.taxonomy_path.filename().string()},
                        {"taxonomy_sha256", sha256_hex({read_file(config.taxonomy_path)})},
                        {"data", data},
                        {"files", {"train.jsonl", "test.jsonl"}},
                        {"sha256", files.sha256}};
    write_file(files.manifest, manifest.dump(2) + "\n");
    return files;
}

namespace {

struct LoadedData {
    ClassTaxonomy taxonomy;
    Dataset train, test;
};

LoadedData load_data(const ExperimentConfig& config) {
    const DataFiles files = data_files(config);
    if (!fs::exists(files.manifest) || !fs::exists(files.train) || !fs::exists(files.test))
        throw Error(ErrorKind::Io, "no dataset under '" + files.train.parent_path().string() + "'; run gen-data first");
    const json manifest = json::parse(read_file(files.manifest));
    json data = to_json(config.data);
    data["test_scenes"] = config.test_scenes;
    if (manifest.at("data") != data)
        throw Error(ErrorKind::Validation, "data: dataset on disk was generated from different parameters; rerun gen-data");
    LoadedData out;
    out.taxonomy = load_taxonomy_file(config.taxonomy_path.string());
    const std::string train = read_file(files.train), test = read_file(files.test);
    if (manifest.at("sha256").get<std::string>() != sha256_hex({train, test}))
        throw Error(ErrorKind::Validation, "data: dataset files do not match the manifest hash");
    std::istringstream tr(train), te(test);
    out.train = read_dataset(tr);
    out.test = read_dataset(te);
    return out;
}

}  // namespace

std::vector<RunOutcome> cmd_train(const ExperimentConfig& config, bool force) {
    const LoadedData data = load_data(config);
    struct Job {
        HeadMode mode;
        std::uint64_t seed;
        fs::path dir;
    };
    std::vector<Job> jobs;
    for (auto mode : config.modes)
        for (auto seed : config.seeds) jobs.push_back({mode, seed, config.output_dir / "runs" / run_id(mode, seed)});
    for (const auto& job : jobs) {
        if (!fs::exists(job.dir)) continue;
        if (!force)
            throw Error(ErrorKind::ResumeConflict,
                        "'" + job.dir.string() + "' already exists; pass --force to overwrite");
        fs::remove_all(job.dir);
    }

    std::vector<RunOutcome> results(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            try {
                results[i] = run_one(config, data.taxonomy, data.train, data.test, jobs[i].mode, jobs[i].seed, jobs[i].dir);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n_workers = std::min(config.workers, jobs.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::ostringstream merged, summary;
    merged << kEpochCsvHeader << '\n';
    summary << "run_id,mode,seed,phase,accuracy,acc_old,acc_new,forgetting,mean_box_l1\n";
    for (const auto& r : results) {
        for (std::size_t k = 0; k < r.phases.size(); ++k) {
            write_epochs(merged, r.phases[k].result.logs);
            const auto& m = r.phases[k].metrics;
            summary << phase_run_id(r.mode, r.seed, k) << ',' << to_string(r.mode) << ',' << r.seed << ',' << k << ','
                    << format_double(m.accuracy) << ',' << format_double(m.acc_old) << ','
                    << format_double(m.acc_new) << ',' << format_double(m.forgetting) << ','
                    << format_double(m.mean_box_l1) << '\n';
        }
    }
    write_file(config.output_dir / "epochs.csv", merged.str());
    write_file(config.output_dir / "summary.csv", summary.str());
    return results;
}

EvalMetrics cmd_eval(const ExperimentConfig& config, HeadMode mode, std::uint64_t seed, std::size_t phase) {
    const fs::path dir = config.output_dir / "runs" / run_id(mode, seed);
    const fs::path snap = dir / ("snapshot_p" + std::to_string(phase) + ".json");
    if (!fs::exists(snap)) throw Error(ErrorKind::MissingSnapshot, "no snapshot at '" + snap.string() + "'");
    std::optional<EvalMetrics> baseline;
    if (phase > 0) {
        const fs::path base = dir / "metrics_p0.json";
        if (!fs::exists(base))
            throw Error(ErrorKind::MissingSnapshot, "no phase-0 metrics at '" + base.string() + "'");
        baseline = eval_metrics_from_json(json::parse(read_file(base)));
    }
    const LoadedData data = load_data(config);
    const json j = json::parse(read_file(snap));
    const ToyModel model = model_from_json(j.at("model"));
    const ClassHead head = class_head_from_json(j.at("head"));
    const auto partition = resolve_partition(config, data.taxonomy);
    const VectorSceneSource test(data.test.scenes);
    return evaluate(model, head, test, partition.at(0), config.train, baseline ? &*baseline : nullptr);
}

double InstabilitySeries::last3_mean() const {
    if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
    const std::size_t n = std::min<std::size_t>(3, values.size());
    double s = 0.0;
    for (std::size_t i = values.size() - n; i < values.size(); ++i) s += values[i];
    return s / static_cast<double>(n);
}

InstabilitySeries instability_series(const std::vector<AssignmentRecord>& records) {
    std::map<std::int64_t, std::vector<AssignmentRecord>> by_epoch;
    for (const auto& r : records) by_epoch[r.epoch].push_back(r);
    if (by_epoch.size() < 2)
        throw Error(ErrorKind::InsufficientEpochs,
                    "instability needs at least 2 epochs of records, got " + std::to_string(by_epoch.size()));
    InstabilitySeries s;
    auto prev = by_epoch.begin();
    for (auto it = std::next(by_epoch.begin()); it != by_epoch.end(); ++it, ++prev) {
        s.epochs.push_back(static_cast<std::size_t>(it->first));
        s.values.push_back(instability(prev->second, it->second));
    }
    return s;
}

std::vector<InstabilitySeries> cmd_instability_report(const fs::path& log_dir, std::optional<std::size_t> phase) {
    const fs::path runs = log_dir / "runs";
    if (!fs::is_directory(runs)) throw Error(ErrorKind::Io, "no runs directory under '" + log_dir.string() + "'");
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(runs))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());

    std::vector<InstabilitySeries> out;
    for (const auto& dir : dirs) {
        std::size_t k = 0;
        if (phase) {
            k = *phase;
        } else {
            while (fs::exists(dir / ("assignments_p" + std::to_string(k + 1) + ".csv"))) ++k;
        }
        const fs::path file = dir / ("assignments_p" + std::to_string(k) + ".csv");
        if (!fs::exists(file)) throw Error(ErrorKind::Io, "missing '" + file.string() + "'");
        std::istringstream in(read_file(file));
        InstabilitySeries s = instability_series(read_assignment_csv(in));
        const std::string name = dir.filename().string();
        const auto cut = name.rfind("-s");
        if (cut == std::string::npos) throw Error(ErrorKind::Parse, "run directory '" + name + "' is not <mode>-s<seed>");
        s.mode = name.substr(0, cut);
        s.seed = std::stoull(name.substr(cut + 2));
        s.phase = k;
        out.push_back(std::move(s));
    }
    if (out.empty()) throw Error(ErrorKind::InsufficientEpochs, "no runs under '" + runs.string() + "'");

    std::ostringstream series, summary;
    series << kInstabilityCsvHeader << '\n';
    summary << kInstabilitySummaryHeader << '\n';
    for (const auto& s : out) {
        for (std::size_t i = 0; i < s.values.size(); ++i)
            series << s.mode << ',' << s.seed << ',' << s.phase << ',' << s.epochs[i] << ','
                   << format_double(s.values[i]) << '\n';
        summary << s.mode << ',' << s.seed << ',' << s.phase << ',' << s.values.size() + 1 << ','
                << format_double(s.last3_mean()) << '\n';
    }
    write_file(log_dir / "instability.csv", series.str());
    write_file(log_dir / "instability_summary.csv", summary.str());
    return out;
}

namespace {

double rel_error(double a, double b, double floor) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

CheckResult check_etf(std::uint64_t seed, bool inject) {
    CheckResult r{inject ? "etf.injected" : "etf", true, ""};
    double worst = 0.0;
    std::size_t frames = 0;
    for (std::size_t k = 2; k <= 32; ++k)
        for (std::size_t d : {k, 2 * k, 4 * k}) {
            PrototypeFrame f = build_simplex_etf(k, d, seed + k * 31 + d);
            if (inject && k == 5 && d == 10) f.vectors(0, 0) += 1e-6;
            const auto rep = verify_frame(f, 1e-9);
            ++frames;
            worst = std::max(worst, rep.worst);
            if (!rep.pass && r.pass) {
                r.pass = false;
                r.detail = "K=" + std::to_string(k) + " d=" + std::to_string(d) + ": " + rep.summary();
            }
        }
    if (r.pass) r.detail = std::to_string(frames) + " frames, worst deviation " + format_double(worst);
    return r;
}

CheckResult check_gof(std::uint64_t seed) {
    CheckResult r{"gof", true, ""};
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (std::size_t c = 0; c < 200; ++c) {
        const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 24)(rng);
        const std::size_t d = k + std::uniform_int_distribution<std::size_t>(0, 24)(rng) + 4;
        std::vector<std::int64_t> counts(k);
        for (auto& n : counts) n = std::uniform_int_distribution<std::int64_t>(1, 5000)(rng);
        const PrototypeFrame f = build_gof(counts, d, rng());
        auto rep = verify_frame(f, 1e-9);
        std::vector<std::int64_t> extra(std::uniform_int_distribution<std::size_t>(1, 4)(rng));
        for (auto& n : extra) n = std::uniform_int_distribution<std::int64_t>(1, 5000)(rng);
        const PrototypeFrame g = extend_gof(f, extra, rng());
        const auto rep2 = verify_frame(g, 1e-9);
        const bool fixed = g.vectors.leftCols(f.vectors.cols()) == f.vectors;
        worst = std::max({worst, rep.worst, rep2.worst});
        if ((!rep.pass || !rep2.pass || !fixed) && r.pass) {
            r.pass = false;
            r.detail = "case " + std::to_string(c) + ": " + (fixed ? (rep.pass ? rep2 : rep).summary()
                                                                   : std::string("old columns changed"));
        }
    }
    if (r.pass) r.detail = "200 frames + extensions, worst deviation " + format_double(worst);
    return r;
}

CheckResult check_hierarchy(std::uint64_t seed, std::size_t n) {
    CheckResult r{"theorem1", true, ""};
    std::mt19937_64 rng(seed);
    std::size_t passed = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t leaves = std::uniform_int_distribution<std::size_t>(2, 200)(rng);
        const std::size_t depth = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
        const HNCTree tree = build_hnc(random_taxonomy(leaves, depth, rng()), 512, rng());
        const auto rep = verify_hierarchy(tree, 1e-9);
        if (rep.pass)
            ++passed;
        else if (r.pass) {
            r.pass = false;
            r.detail = "taxonomy " + std::to_string(i) + ": " + rep.summary();
        }
    }
    if (r.pass) r.detail = std::to_string(passed) + "/" + std::to_string(n) + " taxonomies";
    return r;
}

CheckResult check_proxy_gradients(std::uint64_t seed, std::size_t n) {
    CheckResult r{"proxy_grad", true, ""};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 12)(rng);
        const std::size_t d = k + std::uniform_int_distribution<std::size_t>(0, 8)(rng);
        const Metric metric = i % 2 ? Metric::Cosine : Metric::NegSqEuclidean;
        std::vector<std::int64_t> counts(k);
        for (auto& c : counts) c = std::uniform_int_distribution<std::int64_t>(1, 100)(rng);
        const PrototypeFrame f = i % 3 == 0 ? build_simplex_etf(k, d, rng()) : build_gof(counts, d, rng());
        std::vector<double> q(d);
        for (auto& x : q) x = 0.5 * normal(rng);
        const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
        const auto g = proxy_nca_grad(q, pos, f, metric);
        // relative error of the whole gradient vector
        double diff = 0.0, ng = 0.0, nfd = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double h = 1e-6;
            auto qp = q, qm = q;
            qp[c] += h;
            qm[c] -= h;
            const double fd = (proxy_nca_loss(qp, pos, f, metric) - proxy_nca_loss(qm, pos, f, metric)) / (2 * h);
            diff += (g[c] - fd) * (g[c] - fd);
            ng += g[c] * g[c];
            nfd += fd * fd;
        }
        worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(ng), std::sqrt(nfd), 1e-12}));
    }
    r.pass = worst < 1e-5;
    r.detail = std::to_string(n) + " instances, max relative error " + format_double(worst);
    return r;
}

}  // namespace

GradientFixture make_gradient_fixture(HeadMode mode, std::uint64_t seed) {
    GradientFixture fx;
    std::vector<NodeSpec> nodes{{"root", "root", 3, "", 0}, {"a", "a", 2, "root", 0}, {"b", "b", 2, "root", 0}};
    for (int i = 0; i < 6; ++i)
        nodes.push_back({"leaf" + std::to_string(i), "", 1, i < 3 ? "a" : "b", 10 + 7 * i});
    const ClassTaxonomy tax = ClassTaxonomy::from_nodes(std::move(nodes));
    ModelConfig mc;
    mc.dim = 12;
    mc.feature_dim = 6;
    mc.layers = 3;
    mc.queries = 4;
    mc.seed = seed;
    mc.init_scale = 2.0;
    fx.model = make_model(mc, mode, tax.num_leaves());
    // spread the tiny model's parameters so no gradient vanishes
    std::mt19937_64 rng(seed ^ 0xF1C5);
    std::normal_distribution<double> normal(0.0, 0.3);
    for (auto t : fx.model.params.tensors())
        for (auto& x : t) x += normal(rng);
    fx.head.mode = mode;
    fx.head.classes = tax.level(1);
    if (mode == HeadMode::Hnc) {
        fx.head.tree = build_hnc(tax, mc.dim, seed);
        fx.head.layer_map = map_layers(fx.head.tree->depth(), mc.layers);
    } else if (mode == HeadMode::FlatNc) {
        fx.head.flat = build_simplex_etf(tax.num_leaves(), mc.dim, seed);
    }
    GeneratorParams gp;
    gp.scenes = 8;
    gp.min_objects = 2;
    gp.max_objects = 4;
    gp.feature_dim = mc.feature_dim;
    gp.noise = 0.3;
    gp.seed = seed;
    fx.scene = generate_scenes(tax, gp).scenes.front();
    for (const auto& o : fx.scene.objects) fx.objects.push_back({o.feature, o.box});
    for (std::size_t o = 0; o < fx.scene.objects.size(); ++o)
        fx.annotations.push_back({o, fx.scene.objects[o].leaf, fx.scene.objects[o].box});
    fx.config.lambda_box = 1.0;
    const ForwardResult fwd = forward(fx.model, fx.objects);
    fx.match = match_scene(fx.model, fx.head, fwd, fx.annotations, fx.config.match_cls, fx.config.match_box);
    return fx;
}

double GradientFixture::total_loss(const ToyModel& m) const {
    const LossParts p = scene_loss(m, head, objects, annotations, match, config, nullptr);
    return config.lambda_align * p.align + config.lambda_box * p.box;
}

namespace {

// Sign of every matched box residual; the L1 term is smooth while this holds.
std::vector<int> box_signs(const GradientFixture& fx, const ToyModel& m) {
    const ForwardResult fwd = forward(m, fx.objects);
    std::vector<int> s;
    for (std::size_t a = 0; a < fx.annotations.size(); ++a) {
        const Box& b = fwd.queries[fx.match.query_of_annotation[a]].box;
        for (std::size_t k = 0; k < 4; ++k) {
            const double d = b[k] - fx.annotations[a].box[k];
            s.push_back(d > 0.0 ? 1 : (d < 0.0 ? -1 : 0));
        }
    }
    return s;
}

}  // namespace

double pipeline_gradient_error(const GradientFixture& fx, const Parameters& grad, std::size_t coordinate) {
    auto shifted = [&](double t) {
        ToyModel m = fx.model;
        m.params.at(coordinate) += t;
        return m;
    };
    // Five-point central stencil; the step shrinks until no stencil point
    // crosses a kink of the box L1 term.
    const auto base = box_signs(fx, fx.model);
    double h = 3e-3;
    for (int tries = 0; tries < 6; ++tries) {
        bool smooth = true;
        for (double t : {-2 * h, -h, h, 2 * h}) smooth = smooth && box_signs(fx, shifted(t)) == base;
        if (smooth) break;
        h /= 10;
    }
    auto loss = [&](double t) { return fx.total_loss(shifted(t)); };
    const double fd = (8 * (loss(h) - loss(-h)) - (loss(2 * h) - loss(-2 * h))) / (12 * h);
    return rel_error(grad.at(coordinate), fd, 1e-6);
}

namespace {

CheckResult check_pipeline_gradients(std::uint64_t seed, std::size_t n) {
    CheckResult r{"pipeline_grad", true, ""};
    double worst = 0.0;
    std::mt19937_64 rng(seed);
    const HeadMode modes[] = {HeadMode::Hnc, HeadMode::FlatNc, HeadMode::LearnedHead};
    for (std::size_t i = 0; i < n;) {
        const HeadMode mode = modes[i % 3];
        const GradientFixture fx = make_gradient_fixture(mode, rng());
        Parameters grad = fx.model.params.zeros_like();
        scene_loss(fx.model, fx.head, fx.objects, fx.annotations, fx.match, fx.config, &grad);
        std::uniform_int_distribution<std::size_t> pick(0, fx.model.params.size() - 1);
        for (std::size_t j = 0; j < 10 && i < n; ++j, ++i) worst = std::max(worst, pipeline_gradient_error(fx, grad, pick(rng)));
    }
    r.pass = worst < 1e-4;
    r.detail = std::to_string(n) + " coordinates, max relative error " + format_double(worst);
    return r;
}

CheckResult check_matcher(std::uint64_t seed, std::size_t per_size) {
    CheckResult r{"matcher", true, ""};
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::size_t total = 0;
    for (std::size_t n = 2; n <= 7; ++n)
        for (std::size_t t = 0; t < per_size; ++t) {
            const std::size_t queries = n + (t % 3);
            CostMatrix c(queries, n);
            for (auto& v : c.entries) v = t % 4 == 0 ? std::floor(u(rng) * 4.0) : u(rng);
            const Assignment a = hungarian(c), b = brute_force_assignment(c);
            ++total;
            if ((a.cost != b.cost || a.query_of_object != b.query_of_object) && r.pass) {
                r.pass = false;
                r.detail = "n=" + std::to_string(n) + " matrix " + std::to_string(t) + " disagrees with brute force";
            }
        }
    if (r.pass) r.detail = std::to_string(total) + " matrices agree";
    return r;
}

}  // namespace

std::vector<CheckResult> cmd_verify(const VerifyOptions& o) {
    std::vector<CheckResult> out;
    out.push_back(check_etf(o.seed, false));
    if (o.inject_perturbed_frame) out.push_back(check_etf(o.seed, true));
    out.push_back(check_gof(o.seed));
    out.push_back(check_hierarchy(o.seed, o.taxonomies));
    out.push_back(check_proxy_gradients(o.seed, o.gradient_instances));
    out.push_back(check_pipeline_gradients(o.seed, o.pipeline_coordinates));
    out.push_back(check_matcher(o.seed, o.matcher_matrices));
    return out;
}

}  // namespace hnc

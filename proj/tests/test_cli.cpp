#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "hnc/errors.hpp"
#include "hnc/experiment.hpp"

using namespace hnc;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string first_line(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    return line;
}

// Scratch directory with a 2-super taxonomy and a tiny 2-phase config.
struct Workspace {
    fs::path root;

    Workspace() {
        root = fs::temp_directory_path() / ("hnc_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        fs::remove_all(root);
        fs::create_directories(root);
        std::ofstream(root / "tax.json") << R"({"nodes": [
  {"id": "r", "level": 3, "parent": null},
  {"id": "a", "level": 2, "parent": "r"}, {"id": "b", "level": 2, "parent": "r"},
  {"id": "a0", "level": 1, "parent": "a", "count": 1}, {"id": "a1", "level": 1, "parent": "a", "count": 1},
  {"id": "b0", "level": 1, "parent": "b", "count": 1}, {"id": "b1", "level": 1, "parent": "b", "count": 1},
  {"id": "a2", "level": 1, "parent": "a", "count": 1}, {"id": "b2", "level": 1, "parent": "b", "count": 1}
]})";
    }
    ~Workspace() { fs::remove_all(root); }

    static int& counter() {
        static int n = 0;
        return n;
    }

    nlohmann::json config(const std::string& out = "out") const {
        return {{"taxonomy", "tax.json"},
                {"data", {{"scenes", 60}, {"max_objects", 2}, {"noise", 0.1}, {"feature_dim", 8}, {"seed", 3},
                          {"test_scenes", 30}}},
                {"schedule", {{"sizes", {4, 2}}}},
                {"model", {{"dim", 16}, {"layers", 2}, {"queries", 4}}},
                {"training", {{"phase_epochs", {3, 3}}, {"lr", 0.02}, {"probe_scenes", 16}}},
                {"seeds", {0, 1}},
                {"output_dir", out}};
    }

    ExperimentConfig load(const nlohmann::json& j) const {
        std::ofstream(root / "cfg.json") << j.dump(2);
        return load_experiment_config(root / "cfg.json");
    }
};

}  // namespace

TEST_CASE("gen-data is reproducible and hashes its content") {
    Workspace ws;
    const auto cfg = ws.load(ws.config());
    const auto a = cmd_gen_data(cfg);
    const std::string first = slurp(a.train);
    const auto b = cmd_gen_data(cfg);
    CHECK(a.sha256 == b.sha256);
    CHECK(a.sha256.size() == 64);
    CHECK(slurp(b.train) == first);
    const auto manifest = nlohmann::json::parse(slurp(a.manifest));
    CHECK(manifest.at("sha256") == a.sha256);
    CHECK(manifest.at("data").at("scenes") == 60);
}

TEST_CASE("config errors name the path or field") {
    Workspace ws;
    auto j = ws.config();
    j["taxonomy"] = "missing_tax.json";
    try {
        ws.load(j);
        FAIL("expected Io");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Io);
        CHECK(std::string(e.what()).find("missing_tax.json") != std::string::npos);
    }
    j = ws.config();
    j["data"]["noise"] = -1.0;
    try {
        ws.load(j);
        FAIL("expected Validation");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Validation);
        CHECK(std::string(e.what()).find("data.noise") != std::string::npos);
    }
    j = ws.config();
    j["seeds"] = nlohmann::json::array();
    CHECK_THROWS_AS(ws.load(j), Error);
    j = ws.config();
    j["training"]["metric"] = "hamming";
    CHECK_THROWS_AS(ws.load(j), Error);
}

TEST_CASE("class histogram of a large dataset follows the power law (KS)") {
    Workspace ws;
    auto j = ws.config();
    j["data"]["scenes"] = 4000;
    j["data"]["max_objects"] = 4;
    j["data"]["imbalance"] = 1.5;
    const auto cfg = ws.load(j);
    const auto files = cmd_gen_data(cfg);
    const Dataset ds = read_dataset_file(files.train.string());
    std::map<std::string, double> hist;
    double n = 0.0;
    for (const auto& s : ds.scenes)
        for (const auto& o : s.objects) {
            hist[o.leaf] += 1.0;
            n += 1.0;
        }
    REQUIRE(n >= 1e4);
    double z = 0.0;
    for (std::size_t k = 0; k < ds.leaves.size(); ++k) z += std::pow(k + 1.0, -1.5);
    double emp = 0.0, model = 0.0, d = 0.0;
    for (std::size_t k = 0; k < ds.leaves.size(); ++k) {
        emp += hist[ds.leaves[k]] / n;
        model += std::pow(k + 1.0, -1.5) / z;
        d = std::max(d, std::abs(emp - model));
    }
    // asymptotic critical value at alpha = 0.01 (conservative for discrete data)
    CHECK(d < 1.628 / std::sqrt(n));
}

TEST_CASE("train writes every artifact with stable headers") {
    Workspace ws;
    auto j = ws.config();
    j["modes"] = {"hnc", "flat_nc", "learned_head"};
    j["seeds"] = {0};
    const auto cfg = ws.load(j);
    cmd_gen_data(cfg);
    const auto runs = cmd_train(cfg, false);
    REQUIRE(runs.size() == 3);
    const fs::path out = cfg.output_dir;
    CHECK(first_line(out / "epochs.csv") == kEpochCsvHeader);
    CHECK(first_line(out / "summary.csv") == "run_id,mode,seed,phase,accuracy,acc_old,acc_new,forgetting,mean_box_l1");
    for (const char* r : {"hnc-s0", "flat_nc-s0", "learned_head-s0"}) {
        const fs::path dir = out / "runs" / r;
        CHECK(first_line(dir / "epochs.csv") == kEpochCsvHeader);
        for (int p = 0; p < 2; ++p) {
            CHECK(first_line(dir / ("assignments_p" + std::to_string(p) + ".csv")) == kAssignmentCsvHeader);
            CHECK(fs::exists(dir / ("snapshot_p" + std::to_string(p) + ".json")));
            CHECK(fs::exists(dir / ("metrics_p" + std::to_string(p) + ".json")));
        }
    }
    // 3 modes x (3 + 3) epochs
    std::istringstream lines(slurp(out / "epochs.csv"));
    std::string line;
    std::size_t rows = 0;
    std::getline(lines, line);
    while (std::getline(lines, line)) {
        ++rows;
        CHECK(std::count(line.begin(), line.end(), ',') == 11);
    }
    CHECK(rows == 18);

    // the hnc leaf frame grows to |C_1| + |C_2| with the old columns intact
    const auto s0 = nlohmann::json::parse(slurp(out / "runs/hnc-s0/snapshot_p0.json"));
    const auto s1 = nlohmann::json::parse(slurp(out / "runs/hnc-s0/snapshot_p1.json"));
    const auto h0 = class_head_from_json(s0.at("head")), h1 = class_head_from_json(s1.at("head"));
    REQUIRE(h1.tree);
    CHECK(h1.tree->level_frame(1).size() == 6);
    CHECK(h1.tree->level_frame(1).vectors.leftCols(4) == h0.tree->level_frame(1).vectors);
    const auto f1 = class_head_from_json(nlohmann::json::parse(slurp(out / "runs/flat_nc-s0/snapshot_p1.json")).at("head"));
    CHECK(f1.flat->size() == 6);

    try {
        cmd_train(cfg, false);
        FAIL("expected ResumeConflict");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::ResumeConflict);
    }
    CHECK_NOTHROW(cmd_train(cfg, true));
}

TEST_CASE("train and report are byte-identical on rerun") {
    Workspace ws;
    const auto a = ws.load(ws.config("out_a"));
    const auto b = ws.load(ws.config("out_b"));
    for (const auto* c : {&a, &b}) {
        cmd_gen_data(*c);
        cmd_train(*c, false);
        cmd_instability_report(c->output_dir);
    }
    for (const char* f : {"epochs.csv", "summary.csv", "instability.csv", "instability_summary.csv",
                          "runs/hnc-s1/assignments_p1.csv", "runs/learned_head-s0/snapshot_p1.json"})
        CHECK(slurp(a.output_dir / f) == slurp(b.output_dir / f));
}

TEST_CASE("eval reproduces the stored metrics") {
    Workspace ws;
    auto j = ws.config();
    j["modes"] = {"hnc"};
    j["seeds"] = {0};
    const auto cfg = ws.load(j);
    cmd_gen_data(cfg);
    cmd_train(cfg, false);
    const auto m0 = cmd_eval(cfg, HeadMode::Hnc, 0, 0);
    CHECK(m0.forgetting == 0.0);
    const auto m1 = cmd_eval(cfg, HeadMode::Hnc, 0, 1);
    const auto stored = eval_metrics_from_json(
        nlohmann::json::parse(slurp(cfg.output_dir / "runs/hnc-s0/metrics_p1.json")));
    CHECK(m1.accuracy == stored.accuracy);
    CHECK(m1.forgetting == stored.forgetting);
    try {
        cmd_eval(cfg, HeadMode::FlatNc, 0, 1);
        FAIL("expected MissingSnapshot");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::MissingSnapshot);
    }
}

TEST_CASE("instability report on synthetic records") {
    Workspace ws;
    const fs::path dir = ws.root / "log" / "runs" / "hnc-s4";
    fs::create_directories(dir);
    std::vector<AssignmentRecord> recs;
    for (int e = 1; e <= 4; ++e) {
        recs.push_back({"x", e, {0, 1}});
        // one of four objects changes at epochs 3 and 4
        recs.push_back({"y", e, {2, e >= 3 ? std::size_t(e) : std::size_t(3)}});
    }
    std::ofstream(dir / "assignments_p0.csv") << [&] {
        std::ostringstream s;
        write_assignment_csv(s, recs);
        return s.str();
    }();
    const fs::path still = ws.root / "log" / "runs" / "flat_nc-s4";
    fs::create_directories(still);
    std::vector<AssignmentRecord> same;
    for (int e = 1; e <= 3; ++e) same.push_back({"x", e, {5}});
    std::ofstream(still / "assignments_p0.csv") << [&] {
        std::ostringstream s;
        write_assignment_csv(s, same);
        return s.str();
    }();

    const auto series = cmd_instability_report(ws.root / "log");
    REQUIRE(series.size() == 2);
    CHECK(series[0].mode == "flat_nc");
    CHECK(series[0].values == std::vector<double>{0.0, 0.0});
    CHECK(series[1].mode == "hnc");
    CHECK(series[1].seed == 4);
    // epoch 3: query 3 -> 3 (unchanged); epoch 4: 3 -> 4
    CHECK(series[1].values == std::vector<double>{0.0, 0.0, 0.25});
    CHECK(series[1].last3_mean() == doctest::Approx(0.25 / 3.0));
    CHECK(first_line(ws.root / "log" / "instability.csv") == kInstabilityCsvHeader);
    CHECK(first_line(ws.root / "log" / "instability_summary.csv") == kInstabilitySummaryHeader);

    std::vector<AssignmentRecord> one{{"x", 1, {0}}};
    try {
        instability_series(one);
        FAIL("expected InsufficientEpochs");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::InsufficientEpochs);
    }
}

TEST_CASE("a 12-epoch run gives 11 instability values") {
    Workspace ws;
    auto j = ws.config();
    j["modes"] = {"learned_head"};
    j["seeds"] = {2};
    j["training"]["phase_epochs"] = {12, 12};
    const auto cfg = ws.load(j);
    cmd_gen_data(cfg);
    cmd_train(cfg, false);
    const auto series = cmd_instability_report(cfg.output_dir);
    REQUIRE(series.size() == 1);
    CHECK(series[0].phase == 1);
    CHECK(series[0].values.size() == 11);
}

TEST_CASE("output root override") {
    Workspace ws;
    const fs::path other = ws.root / "elsewhere";
    ::setenv("HNC_OUTPUT_ROOT", other.c_str(), 1);
    const auto cfg = ws.load(ws.config());
    ::unsetenv("HNC_OUTPUT_ROOT");
    CHECK(cfg.output_dir == other);
}

TEST_CASE("verify suite passes and catches an injected frame") {
    VerifyOptions o;
    o.taxonomies = 5;
    o.gradient_instances = 50;
    o.pipeline_coordinates = 20;
    o.matcher_matrices = 10;
    o.inject_perturbed_frame = true;
    for (const auto& c : cmd_verify(o)) {
        INFO(c.name << ": " << c.detail);
        CHECK(c.pass == (c.name != "etf.injected"));
    }
}

TEST_CASE("command line exit codes") {
    const std::string cli = HNC_CLI_PATH;
    CHECK(std::system((cli + " verify --quick > /dev/null").c_str()) == 0);
    CHECK(WEXITSTATUS(std::system((cli + " verify --quick --inject-perturbed-frame > /dev/null").c_str())) == 1);
    CHECK(WEXITSTATUS(std::system((cli + " gen-data -c /nonexistent.json 2> /dev/null").c_str())) == 2);
    CHECK(WEXITSTATUS(std::system((cli + " --kernels scalar verify --quick > /dev/null").c_str())) == 0);
}

// Command line driver: gen-data, train, eval, instability-report, verify.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hnc/errors.hpp"
#include "hnc/experiment.hpp"
#include "hnc/kernels.hpp"

namespace {

int run(int argc, char** argv) {
    CLI::App app{"Hierarchical prototype experiments on synthetic detection scenes"};
    app.require_subcommand(1);
    std::string kernels;
    app.add_option("--kernels", kernels, "Force a kernel set (scalar or avx2)")->check(CLI::IsMember({"scalar", "avx2"}));

    std::string config_path;
    bool force = false;
    std::size_t workers = 0;

    auto* gen = app.add_subcommand("gen-data", "Generate train/test scenes and a manifest with a content hash");
    gen->add_option("-c,--config", config_path, "Experiment config (JSON)")->required();

    auto* train = app.add_subcommand("train", "Run every (mode, seed) over all phases");
    train->add_option("-c,--config", config_path, "Experiment config (JSON)")->required();
    train->add_flag("--force", force, "Overwrite existing run directories");
    train->add_option("-j,--workers", workers, "Parallel runs (overrides the config)");

    std::string mode_name;
    std::uint64_t seed = 0;
    std::size_t phase = 0;
    auto* eval = app.add_subcommand("eval", "Evaluate a stored snapshot on the test set");
    eval->add_option("-c,--config", config_path, "Experiment config (JSON)")->required();
    eval->add_option("--mode", mode_name, "learned_head, flat_nc or hnc")->required();
    eval->add_option("--seed", seed, "Run seed")->required();
    eval->add_option("--phase", phase, "Phase index (0-based)")->required();

    std::string log_dir;
    std::optional<std::size_t> report_phase;
    auto* report = app.add_subcommand("instability-report", "Per-epoch matching instability per run");
    auto* dir_opt = report->add_option("--log-dir", log_dir, "Output directory of a train run");
    report->add_option("-c,--config", config_path, "Take the log directory from this config")->excludes(dir_opt);
    report->add_option("--phase", report_phase, "Phase to report (default: last)");

    hnc::VerifyOptions vopt;
    bool quick = false;
    auto* verify = app.add_subcommand("verify", "Geometry, hierarchy, gradient and matcher checks");
    verify->add_option("--seed", vopt.seed, "Sweep seed");
    verify->add_option("--taxonomies", vopt.taxonomies, "Random taxonomies in the hierarchy sweep");
    verify->add_flag("--inject-perturbed-frame", vopt.inject_perturbed_frame,
                     "Also verify a deliberately perturbed frame (must fail)");
    verify->add_flag("--quick", quick, "Smaller sweeps");

    CLI11_PARSE(app, argc, argv);

    if (!kernels.empty() && !hnc::kernels::select(kernels == "avx2" ? hnc::kernels::Isa::Avx2 : hnc::kernels::Isa::Scalar)) {
        std::cerr << "error: kernel set '" << kernels << "' is not available on this machine\n";
        return 2;
    }

    if (*gen) {
        const auto cfg = hnc::load_experiment_config(config_path);
        const auto files = hnc::cmd_gen_data(cfg);
        std::cout << "wrote " << files.train.string() << " and " << files.test.string() << "\nsha256 " << files.sha256
                  << '\n';
        return 0;
    }
    if (*train) {
        auto cfg = hnc::load_experiment_config(config_path);
        if (workers > 0) cfg.workers = workers;
        const auto runs = hnc::cmd_train(cfg, force);
        for (const auto& r : runs) {
            const auto& m = r.phases.back().metrics;
            std::printf("%-20s acc=%.4f acc_old=%.4f acc_new=%.4f forgetting=%.4f\n",
                        hnc::run_id(r.mode, r.seed).c_str(), m.accuracy, m.acc_old, m.acc_new, m.forgetting);
        }
        std::cout << "logs in " << cfg.output_dir.string() << '\n';
        return 0;
    }
    if (*eval) {
        const auto cfg = hnc::load_experiment_config(config_path);
        const auto m = hnc::cmd_eval(cfg, hnc::head_mode_from_string(mode_name), seed, phase);
        std::cout << hnc::to_json(m).dump(2) << '\n';
        return 0;
    }
    if (*report) {
        std::filesystem::path dir = log_dir;
        if (!config_path.empty()) dir = hnc::load_experiment_config(config_path).output_dir;
        if (dir.empty()) {
            std::cerr << "error: give --log-dir or --config\n";
            return 2;
        }
        for (const auto& s : hnc::cmd_instability_report(dir, report_phase))
            std::printf("%-14s seed %-4llu phase %zu  last-3 mean IS %.4f\n", s.mode.c_str(),
                        static_cast<unsigned long long>(s.seed), s.phase, s.last3_mean());
        std::cout << "wrote " << (dir / "instability.csv").string() << '\n';
        return 0;
    }
    if (*verify) {
        if (quick) {
            vopt.taxonomies = std::min<std::size_t>(vopt.taxonomies, 10);
            vopt.gradient_instances = 100;
            vopt.pipeline_coordinates = 30;
            vopt.matcher_matrices = 50;
        }
        bool ok = true;
        for (const auto& c : hnc::cmd_verify(vopt)) {
            std::printf("%s %-16s %s\n", c.pass ? "PASS" : "FAIL", c.name.c_str(), c.detail.c_str());
            ok = ok && c.pass;
        }
        return ok ? 0 : 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const hnc::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}

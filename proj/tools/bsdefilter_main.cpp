#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bsdef/config.hpp"
#include "bsdef/errors.hpp"
#include "bsdef/eval.hpp"
#include "bsdef/rng.hpp"

namespace fs = std::filesystem;
using namespace bsdef;

namespace {

constexpr const char* kVersion = "bsdefilter 1.0.0";

struct CliOverrides {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::string mode;
    std::optional<int> threads;
};

RunConfig resolve_config(const CliOverrides& cli) {
    RunConfig cfg;
    if (!cli.config_path.empty()) {
        cfg = load_run_config(cli.config_path);
        if (!cli.mode.empty() && cli.mode != cfg.mode) {
            // Mode switches the protocol defaults; a file plus a conflicting
            // --mode is ambiguous about which values the file meant to pin.
            throw ConfigError("--mode conflicts with mode in " + cli.config_path);
        }
    } else {
        cfg = default_run_config(cli.mode.empty() ? "desk" : cli.mode, "ou");
    }
    if (!cli.out_dir.empty()) cfg.out_dir = cli.out_dir;
    if (cli.seed) cfg.seed = *cli.seed;
    if (cli.threads) cfg.threads = *cli.threads;
    if (cfg.threads < 1) throw ConfigError("--threads must be >= 1");
    return cfg;
}

EvalSettings eval_settings(const RunConfig& cfg) {
    EvalSettings s = cfg.eval;
    s.seed = cfg.seed;
    s.prior_mean = cfg.prior_mean;
    s.prior_std = cfg.prior_std;
    return s;
}

void write_manifest(const RunConfig& cfg, const std::string& command) {
    fs::create_directories(cfg.out_dir);
    const fs::path path = fs::path(cfg.out_dir) / "manifest.json";
    std::ofstream f(path);
    if (!f) throw ArtifactError("cannot write " + path.string());
    f << "{\n  \"version\": \"" << kVersion << "\",\n  \"command\": \"" << command
      << "\",\n  \"config\": " << run_config_json(cfg) << "\n}\n";
}

TrainConfig train_config(const RunConfig& cfg) {
    TrainConfig t = cfg.training;
    t.seed = cfg.seed;
    return t;
}

std::string filter_dir(const RunConfig& cfg, int n) {
    return (fs::path(cfg.out_dir) / ("filter_N" + std::to_string(n))).string();
}

int cmd_simulate(const RunConfig& cfg) {
    write_manifest(cfg, "simulate");
    const FilterProblem prob = build_problem(cfg);
    const TimeGrid grid(cfg.horizon, cfg.num_obs, cfg.n_list.front());
    const TrajectoryBatch batch =
        simulate_observations(prob, grid, cfg.simulate_samples, cfg.seed);
    const fs::path path = fs::path(cfg.out_dir) / "batch.bin";
    save_batch(batch, grid, prob.dynamics.dim, prob.observation.obs_dim, path.string());
    std::printf("wrote %s: M=%d K=%d N=%d d=%d d'=%d\n", path.c_str(), batch.samples(),
                grid.num_obs, grid.substeps, prob.dynamics.dim, prob.observation.obs_dim);
    std::printf("obs mean %.6f, obs sd %.6f\n", batch.obs.mean(),
                std::sqrt((batch.obs.array() - batch.obs.mean()).square().mean()));
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    write_manifest(cfg, "train");
    const FilterProblem prob = build_problem(cfg);
    const TrainConfig tcfg = train_config(cfg);
    for (int n : cfg.n_list) {
        const TimeGrid grid(cfg.horizon, cfg.num_obs, n);
        const std::string dir = filter_dir(cfg, n);
        std::printf("training N=%d -> %s\n", n, dir.c_str());
        const TrainedFilter tf = train_filter(prob, grid, tcfg, &dir);
        double last = 0.0;
        if (!tf.loss_history.empty() && !tf.loss_history.back().empty()) {
            last = tf.loss_history.back().back();
        }
        std::printf("done N=%d: %zu steps, final-step last loss %.6g\n", n, tf.steps.size(),
                    last);
    }
    return 0;
}

std::vector<ErrorReport> evaluate_all(const RunConfig& cfg) {
    const EvalSettings settings = eval_settings(cfg);
    std::vector<ErrorReport> reports;
    for (int n : cfg.n_list) {
        const std::string dir = filter_dir(cfg, n);
        if (!fs::exists(fs::path(dir) / "manifest.json")) {
            throw ArtifactError("no trained filter at " + dir + " (run train first)");
        }
        const TrainedFilter tf = load_filter(dir);
        std::printf("evaluating N=%d\n", n);
        reports.push_back(compute_error_report(tf, settings));
        std::printf("  e_K=%.6g  E=%.6g\n", reports.back().e_k.back(),
                    reports.back().accumulated_E);
    }
    return reports;
}

int cmd_evaluate(const RunConfig& cfg) {
    write_manifest(cfg, "evaluate");
    const std::vector<ErrorReport> reports = evaluate_all(cfg);
    const fs::path out(cfg.out_dir);
    write_e_over_time_csv(reports, cfg.horizon, (out / "e_over_time.csv").string());
    write_E_over_time_csv(reports, (out / "E_over_time.csv").string());
    if (reports.size() >= 2) {
        write_convergence_csv(summarize_convergence(reports), (out / "convergence.csv").string());
    }
    std::printf("wrote CSV reports to %s\n", cfg.out_dir.c_str());
    return 0;
}

int cmd_reference(const RunConfig& cfg) {
    write_manifest(cfg, "reference");
    const FilterProblem prob = build_problem(cfg);
    const TimeGrid grid(cfg.horizon, cfg.num_obs, cfg.n_list.front());
    const TrajectoryBatch batch = simulate_observations(prob, grid, 1, cfg.seed);
    const EvalSettings settings = eval_settings(cfg);
    const VectorXd x_pts =
        QuadratureGrid{settings.x_lo, settings.x_hi, settings.x_points}.all_points();
    const ReferenceProvider ref = make_reference_provider(prob, settings, x_pts);
    const std::vector<VectorXd> dens = ref(batch.obs.row(0));

    const fs::path path = fs::path(cfg.out_dir) / "reference.csv";
    std::ofstream f(path);
    if (!f) throw ArtifactError("cannot write " + path.string());
    f << "k,x,density\n";
    char buf[80];
    for (std::size_t k = 0; k < dens.size(); ++k) {
        for (Eigen::Index i = 0; i < x_pts.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", k + 1, x_pts[i], dens[k][i]);
            f << buf;
        }
    }
    std::printf("wrote %s (%zu time points, %d grid points)\n", path.c_str(), dens.size(),
                settings.x_points);
    return 0;
}

int cmd_convergence(const RunConfig& cfg) {
    write_manifest(cfg, "convergence");
    if (cfg.n_list.size() < 2) {
        throw ConfigError("convergence needs a substeps list with at least two N values");
    }
    const FilterProblem prob = build_problem(cfg);
    const TrainConfig tcfg = train_config(cfg);
    for (int n : cfg.n_list) {
        const std::string dir = filter_dir(cfg, n);
        if (fs::exists(fs::path(dir) / "manifest.json")) {
            std::printf("reusing trained filter N=%d\n", n);
            continue;
        }
        std::printf("training N=%d -> %s\n", n, dir.c_str());
        train_filter(prob, TimeGrid(cfg.horizon, cfg.num_obs, n), tcfg, &dir);
    }
    const std::vector<ErrorReport> reports = evaluate_all(cfg);
    const ConvergenceSummary summary = summarize_convergence(reports);
    const fs::path out(cfg.out_dir);
    write_e_over_time_csv(reports, cfg.horizon, (out / "e_over_time.csv").string());
    write_E_over_time_csv(reports, (out / "E_over_time.csv").string());
    write_convergence_csv(summary, (out / "convergence.csv").string());
    std::printf("slope e_K: %.4f   slope E: %.4f\n", summary.slope_e, summary.slope_E);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deep BSDE nonlinear filter: training, reference filters, error reports"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    CliOverrides cli;
    app.add_option("--config", cli.config_path, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--out", cli.out_dir, "output directory (overrides config)");
    app.add_option("--seed", cli.seed, "master seed (overrides config)");
    app.add_option("--mode", cli.mode, "protocol defaults: desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    app.add_option("--threads", cli.threads, "worker cap (overrides config)");

    auto* sim = app.add_subcommand("simulate", "draw a trajectory/observation batch");
    auto* train = app.add_subcommand("train", "sequential deep BSDE training per N");
    auto* eval = app.add_subcommand("evaluate", "error reports for trained filters");
    auto* ref = app.add_subcommand("reference", "reference filter densities on the x grid");
    auto* conv = app.add_subcommand("convergence", "train + evaluate the whole N ladder");
    // Accept the global flags after the subcommand name as well.
    for (CLI::App* sub : {sim, train, eval, ref, conv}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        const RunConfig cfg = resolve_config(cli);
        if (sim->parsed()) return cmd_simulate(cfg);
        if (train->parsed()) return cmd_train(cfg);
        if (eval->parsed()) return cmd_evaluate(cfg);
        if (ref->parsed()) return cmd_reference(cfg);
        if (conv->parsed()) return cmd_convergence(cfg);
        std::fprintf(stderr, "no subcommand\n");
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const ArtifactError& e) {
        std::fprintf(stderr, "artifact error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

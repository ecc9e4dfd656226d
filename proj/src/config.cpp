#include "bsdef/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "bsdef/errors.hpp"

namespace bsdef {

using nlohmann::json;

RunConfig default_run_config(const std::string& mode, const std::string& problem) {
    RunConfig cfg;
    cfg.mode = mode;
    cfg.problem = problem;
    if (problem != "ou" && problem != "bistable") {
        throw ConfigError("unknown problem: " + problem);
    }
    if (mode == "paper") {
        cfg.n_list = {1, 2, 4, 8, 16, 32, 64};
        cfg.training.batch_size = 512;
        cfg.training.batches_per_epoch = 200;
        cfg.training.max_epochs = 100;
        cfg.training.patience = 5;
        cfg.training.learning_rate = 1e-4;
        cfg.training.pretrain_steps = 2000;
        cfg.training.train_quad = QuadratureGrid{-5.0, 5.0, 1000};
        cfg.eval.m_eval = 10000;
        cfg.eval.x_points = 1000;
        cfg.eval.ek_obs = 10000;
        cfg.eval.ek_probes = 64;
        cfg.eval.ek_inner_batch = 256;
        cfg.eval.pf_particles = 100000;
    } else if (mode == "desk") {
        // Sized for a single CPU core; every knob overridable in the file.
        cfg.n_list = problem == "bistable" ? std::vector<int>{1, 16}
                                           : std::vector<int>{1, 4, 16};
        cfg.training.batch_size = 256;
        cfg.training.batches_per_epoch = 50;
        cfg.training.max_epochs = 40;
        cfg.training.patience = 6;
        cfg.training.learning_rate = 1e-3;
        cfg.training.lr_decay = 0.93;
        cfg.training.explore_frac = 0.25;
        cfg.training.pretrain_steps = 2000;
        cfg.training.train_quad = QuadratureGrid{-5.0, 5.0, 64};
        cfg.eval.m_eval = problem == "bistable" ? 32 : 1000;
        cfg.eval.x_points = 1000;
        cfg.eval.ek_obs = 128;
        cfg.eval.ek_probes = 16;
        cfg.eval.ek_inner_batch = 128;
        cfg.eval.pf_particles = 10000;
    } else {
        throw ConfigError("unknown mode: " + mode + " (expected desk or paper)");
    }
    cfg.eval.ref_substeps = 128;
    return cfg;
}

namespace {

void require_keys(const json& j, const std::string& scope, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config section '" + scope + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw ConfigError("unknown config key: " + scope + "." + it.key());
        }
    }
}

QuadratureGrid parse_quad(const json& j, const std::string& scope, QuadratureGrid base) {
    require_keys(j, scope, {"lo", "hi", "points"});
    base.lo = j.value("lo", base.lo);
    base.hi = j.value("hi", base.hi);
    base.points = j.value("points", base.points);
    return base;
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config parse error: " + std::string(e.what()));
    }
    require_keys(j, "", {"problem", "mode", "seed", "out", "threads", "grid", "prior", "training",
                         "evaluation", "simulate"});

    const std::string mode = j.value("mode", "desk");
    const std::string problem = j.value("problem", "ou");
    RunConfig cfg = default_run_config(mode, problem);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.out_dir = j.value("out", cfg.out_dir);
    cfg.threads = j.value("threads", cfg.threads);

    if (j.contains("grid")) {
        const json& g = j["grid"];
        require_keys(g, "grid", {"horizon", "num_obs", "substeps", "substeps_list"});
        cfg.horizon = g.value("horizon", cfg.horizon);
        cfg.num_obs = g.value("num_obs", cfg.num_obs);
        if (g.contains("substeps_list")) {
            cfg.n_list = g["substeps_list"].get<std::vector<int>>();
        }
        if (g.contains("substeps")) cfg.n_list = {g["substeps"].get<int>()};
        if (cfg.n_list.empty()) throw ConfigError("grid: empty substeps list");
        for (int n : cfg.n_list) {
            if (n < 1) throw ConfigError("grid: substeps must be >= 1");
        }
        if (cfg.horizon <= 0 || cfg.num_obs < 1) throw ConfigError("grid: need T > 0 and K >= 1");
    }
    if (j.contains("prior")) {
        const json& p = j["prior"];
        require_keys(p, "prior", {"mean", "std"});
        cfg.prior_mean = p.value("mean", cfg.prior_mean);
        cfg.prior_std = p.value("std", cfg.prior_std);
        if (cfg.prior_std <= 0) throw ConfigError("prior: std must be positive");
    }
    if (j.contains("training")) {
        const json& t = j["training"];
        require_keys(t, "training",
                     {"batch_size", "batches_per_epoch", "max_epochs", "patience",
                      "learning_rate", "lr_decay", "explore_frac", "explore_spread",
                      "pretrain_steps", "later_epochs", "later_lr", "obs_pool", "param_ema",
                      "warm_start", "quadrature"});
        cfg.training.batch_size = t.value("batch_size", cfg.training.batch_size);
        cfg.training.batches_per_epoch =
            t.value("batches_per_epoch", cfg.training.batches_per_epoch);
        cfg.training.max_epochs = t.value("max_epochs", cfg.training.max_epochs);
        cfg.training.patience = t.value("patience", cfg.training.patience);
        cfg.training.learning_rate = t.value("learning_rate", cfg.training.learning_rate);
        cfg.training.lr_decay = t.value("lr_decay", cfg.training.lr_decay);
        cfg.training.explore_frac = t.value("explore_frac", cfg.training.explore_frac);
        cfg.training.explore_spread = t.value("explore_spread", cfg.training.explore_spread);
        cfg.training.pretrain_steps = t.value("pretrain_steps", cfg.training.pretrain_steps);
        cfg.training.later_epochs = t.value("later_epochs", cfg.training.later_epochs);
        cfg.training.later_lr = t.value("later_lr", cfg.training.later_lr);
        cfg.training.obs_pool = t.value("obs_pool", cfg.training.obs_pool);
        cfg.training.param_ema = t.value("param_ema", cfg.training.param_ema);
        if (cfg.training.obs_pool < 0) throw ConfigError("training: obs_pool must be >= 0");
        if (cfg.training.pretrain_steps < 0) {
            throw ConfigError("training: pretrain_steps must be >= 0");
        }
        if (cfg.training.later_epochs < 0 || cfg.training.later_lr < 0) {
            throw ConfigError("training: later_epochs and later_lr must be >= 0");
        }
        if (cfg.training.param_ema < 0 || cfg.training.param_ema >= 1) {
            throw ConfigError("training: param_ema must be in [0, 1)");
        }
        cfg.training.warm_start = t.value("warm_start", cfg.training.warm_start);
        if (cfg.training.lr_decay <= 0 || cfg.training.lr_decay > 1) {
            throw ConfigError("training: lr_decay must be in (0, 1]");
        }
        if (cfg.training.explore_frac < 0 || cfg.training.explore_frac > 1 ||
            cfg.training.explore_spread <= 0) {
            throw ConfigError("training: explore_frac in [0,1], explore_spread > 0");
        }
        if (t.contains("quadrature")) {
            cfg.training.train_quad =
                parse_quad(t["quadrature"], "training.quadrature", cfg.training.train_quad);
        }
        if (cfg.training.batch_size < 1 || cfg.training.batches_per_epoch < 1 ||
            cfg.training.max_epochs < 0 || cfg.training.patience < 1) {
            throw ConfigError("training: counts must be positive");
        }
        if (cfg.training.patience > std::max(cfg.training.max_epochs, 1)) {
            throw ConfigError("training: patience must be <= max_epochs");
        }
    }
    if (j.contains("evaluation")) {
        const json& e = j["evaluation"];
        require_keys(e, "evaluation",
                     {"m_eval", "x_points", "x_lo", "x_hi", "ek_obs", "ek_probes",
                      "ek_inner_batch", "pf_particles", "ref_substeps"});
        cfg.eval.m_eval = e.value("m_eval", cfg.eval.m_eval);
        cfg.eval.x_points = e.value("x_points", cfg.eval.x_points);
        cfg.eval.x_lo = e.value("x_lo", cfg.eval.x_lo);
        cfg.eval.x_hi = e.value("x_hi", cfg.eval.x_hi);
        cfg.eval.ek_obs = e.value("ek_obs", cfg.eval.ek_obs);
        cfg.eval.ek_probes = e.value("ek_probes", cfg.eval.ek_probes);
        cfg.eval.ek_inner_batch = e.value("ek_inner_batch", cfg.eval.ek_inner_batch);
        cfg.eval.pf_particles = e.value("pf_particles", cfg.eval.pf_particles);
        cfg.eval.ref_substeps = e.value("ref_substeps", cfg.eval.ref_substeps);
        if (cfg.eval.m_eval < 1 || cfg.eval.x_points < 2 || cfg.eval.ek_obs < 1 ||
            cfg.eval.ek_probes < 1 || cfg.eval.ek_inner_batch < 1 || cfg.eval.pf_particles < 1) {
            throw ConfigError("evaluation: counts must be positive");
        }
    }
    if (j.contains("simulate")) {
        const json& s = j["simulate"];
        require_keys(s, "simulate", {"samples"});
        cfg.simulate_samples = s.value("samples", cfg.simulate_samples);
        if (cfg.simulate_samples < 1) throw ConfigError("simulate: samples must be >= 1");
    }
    return cfg;
}

FilterProblem build_problem(const RunConfig& cfg) {
    if (cfg.problem == "ou") {
        return make_ou_problem(cfg.horizon, cfg.num_obs, cfg.prior_mean, cfg.prior_std);
    }
    if (cfg.problem == "bistable") {
        return make_bistable_problem(cfg.horizon, cfg.num_obs, cfg.prior_mean, cfg.prior_std);
    }
    throw ConfigError("unknown problem: " + cfg.problem);
}

std::string run_config_json(const RunConfig& cfg) {
    json j;
    j["problem"] = cfg.problem;
    j["mode"] = cfg.mode;
    j["seed"] = cfg.seed;
    j["out"] = cfg.out_dir;
    j["threads"] = cfg.threads;
    j["grid"] = {{"horizon", cfg.horizon},
                 {"num_obs", cfg.num_obs},
                 {"substeps_list", cfg.n_list}};
    j["prior"] = {{"mean", cfg.prior_mean}, {"std", cfg.prior_std}};
    j["training"] = {{"batch_size", cfg.training.batch_size},
                     {"batches_per_epoch", cfg.training.batches_per_epoch},
                     {"max_epochs", cfg.training.max_epochs},
                     {"patience", cfg.training.patience},
                     {"learning_rate", cfg.training.learning_rate},
                     {"lr_decay", cfg.training.lr_decay},
                     {"explore_frac", cfg.training.explore_frac},
                     {"explore_spread", cfg.training.explore_spread},
                     {"pretrain_steps", cfg.training.pretrain_steps},
                     {"later_epochs", cfg.training.later_epochs},
                     {"later_lr", cfg.training.later_lr},
                     {"obs_pool", cfg.training.obs_pool},
                     {"param_ema", cfg.training.param_ema},
                     {"warm_start", cfg.training.warm_start},
                     {"quadrature", {{"lo", cfg.training.train_quad.lo},
                                     {"hi", cfg.training.train_quad.hi},
                                     {"points", cfg.training.train_quad.points}}}};
    j["evaluation"] = {{"m_eval", cfg.eval.m_eval},
                       {"x_points", cfg.eval.x_points},
                       {"x_lo", cfg.eval.x_lo},
                       {"x_hi", cfg.eval.x_hi},
                       {"ek_obs", cfg.eval.ek_obs},
                       {"ek_probes", cfg.eval.ek_probes},
                       {"ek_inner_batch", cfg.eval.ek_inner_batch},
                       {"pf_particles", cfg.eval.pf_particles},
                       {"ref_substeps", cfg.eval.ref_substeps}};
    j["simulate"] = {{"samples", cfg.simulate_samples}};
    return j.dump(2);
}

}  // namespace bsdef

#pragma once

#include <string>
#include <vector>

#include "bsdef/deepbsde.hpp"
#include "bsdef/eval.hpp"

namespace bsdef {

// Fully resolved run configuration. Defaults come from the mode:
//   "paper" - the full experiment protocol,
//   "desk"  - a scaled-down protocol sized for CI-style single-machine runs.
struct RunConfig {
    std::string problem = "ou";
    std::string mode = "desk";
    std::uint64_t seed = 1;
    std::string out_dir = "run_out";
    int threads = 1;

    double horizon = 1.0;
    int num_obs = 10;        // K
    std::vector<int> n_list; // substep ladder; single entry = plain train

    double prior_mean = 0.0;
    double prior_std = 1.0;

    TrainConfig training;
    EvalSettings eval;

    int simulate_samples = 1000;
};

// Mode/problem defaults without reading a file.
RunConfig default_run_config(const std::string& mode, const std::string& problem);

// Parse a JSON config file; unknown keys are rejected. Keys present in the
// file override the mode defaults.
RunConfig load_run_config(const std::string& path);

FilterProblem build_problem(const RunConfig& cfg);

// Full echo of the configuration for run manifests.
std::string run_config_json(const RunConfig& cfg);

}  // namespace bsdef

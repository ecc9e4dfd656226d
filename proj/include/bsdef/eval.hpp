#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bsdef/deepbsde.hpp"
#include "bsdef/reference.hpp"

namespace bsdef {

struct EvalSettings {
    int m_eval = 10000;    // observation sequences for e_k
    int x_points = 1000;   // I
    int ek_obs = 10000;    // observation sequences for E_k
    int ek_probes = 64;    // start points x for E_k
    int ek_inner_batch = 256;
    int pf_particles = 100000;
    int ref_substeps = 128;
    double x_lo = -5.0;
    double x_hi = 5.0;
    std::uint64_t seed = 0;
    double prior_mean = 0.0;
    double prior_std = 1.0;
};

struct ErrorReport {
    int substeps = 0;  // N of the evaluated filter
    std::vector<double> e_k;
    std::vector<double> E_k;
    double accumulated_E = 0.0;  // sum_k E_k
    EvalSettings settings;
};

// Normalized reference densities at t_1..t_K on a fixed x grid, for one
// observation sequence (Kalman for "ou", bootstrap PF + KDE for "bistable").
using ReferenceProvider =
    std::function<std::vector<VectorXd>(const Eigen::RowVectorXd& obs_row)>;

ReferenceProvider make_reference_provider(const FilterProblem& prob, const EvalSettings& settings,
                                          const VectorXd& x_pts);

// e_k = max over observation sequences and grid points of
// |p_k(t_k, x_i, O) - p_hat_k(x_i, O)| (both densities normalized).
double compute_e_k(const TrainedFilter& tf, const ReferenceProvider& ref, int k,
                   const MatrixXd& obs_rows, const VectorXd& x_pts);
std::vector<double> compute_e_all(const TrainedFilter& tf, const ReferenceProvider& ref,
                                  const MatrixXd& obs_rows, const VectorXd& x_pts);

// E_k = max over observation sequences and probe points x of the RMS
// terminal mismatch of the step-(k-1) rollout started at x.
double compute_E_k(const TrainedFilter& tf, int k, const MatrixXd& obs_rows,
                   const VectorXd& probes, int inner_batch, std::uint64_t seed);
std::vector<double> compute_E_all(const TrainedFilter& tf, const MatrixXd& obs_rows,
                                  const VectorXd& probes, int inner_batch, std::uint64_t seed);

ErrorReport compute_error_report(const TrainedFilter& tf, const EvalSettings& settings);

struct ConvergenceSummary {
    std::vector<int> substeps;     // N values
    std::vector<double> e_K;       // terminal sup error per N
    std::vector<double> E;         // accumulated residual per N
    double slope_e = 0.0;          // least-squares slope of log2 e_K vs log2 N
    double slope_E = 0.0;
};

// Least-squares slope of log2(y) against log2(N); needs >= 2 points.
double fit_log2_slope(const std::vector<int>& n_values, const std::vector<double>& y);

ConvergenceSummary summarize_convergence(const std::vector<ErrorReport>& reports);

// CSV exports (fixed column order, %.17g values).
void write_e_over_time_csv(const std::vector<ErrorReport>& reports, double horizon,
                           const std::string& path);
void write_E_over_time_csv(const std::vector<ErrorReport>& reports, const std::string& path);
void write_convergence_csv(const ConvergenceSummary& summary, const std::string& path);

}  // namespace bsdef

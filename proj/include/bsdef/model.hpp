#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace bsdef {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// State dynamics dS = mu(S) dt + sigma(S) dW, together with the analytic
// derivatives of mu and a = sigma sigma^T that enter the Fokker-Planck
// adjoint driver.
struct DynamicsModel {
    std::function<VectorXd(const VectorXd&)> mu;
    std::function<MatrixXd(const VectorXd&)> sigma;
    // sum_i d mu_i / d x_i
    std::function<double(const VectorXd&)> div_mu;
    // component j: sum_i d a_ij / d x_i
    std::function<VectorXd(const VectorXd&)> a_first_derivs;
    // sum_ij d^2 a_ij / d x_i d x_j
    std::function<double(const VectorXd&)> a_second_trace;
    int dim = 1;

    // Batched forms over sample columns; derived from the pointwise fields
    // by ensure_batched() when a model does not supply vectorized versions.
    std::function<MatrixXd(const MatrixXd&)> mu_cols;
    // column m: sigma(x_m) * u_m
    std::function<MatrixXd(const MatrixXd&, const MatrixXd&)> sigma_apply;
    // cu (M) and cv (d x M) of the driver linear form per column
    std::function<void(const MatrixXd&, VectorXd&, MatrixXd&)> driver_coeffs_cols;
};

// Fill any missing batched fields with per-column loops over the pointwise
// functions.
void ensure_batched(DynamicsModel& dyn);

// Build the derivative fields by central finite differences of mu and
// a = sigma sigma^T (step 1e-5 * max(1,|x_i|)). Intended for prototyping
// models without hand-derived coefficients.
DynamicsModel make_dynamics_fd(std::function<VectorXd(const VectorXd&)> mu,
                               std::function<MatrixXd(const VectorXd&)> sigma, int dim);

// Largest relative mismatch between the supplied derivative fields of `dyn`
// and finite differences of its mu/sigma, over the given sample points.
double validate_derivatives(const DynamicsModel& dyn, const std::vector<VectorXd>& points);

struct ObservationModel {
    std::function<VectorXd(const VectorXd&)> h;
    MatrixXd noise_cov;  // R, SPD
    std::function<double(const VectorXd& o, const VectorXd& x)> likelihood;
    int obs_dim = 1;
};

// Gaussian observation model o = h(x) + N(0, R).
ObservationModel make_gaussian_observation(std::function<VectorXd(const VectorXd&)> h,
                                           MatrixXd noise_cov);

struct FilterProblem {
    std::string name;
    DynamicsModel dynamics;
    ObservationModel observation;
    std::function<double(const VectorXd&)> prior;  // pi_0 density
    std::function<VectorXd(std::uint64_t seed, std::uint64_t sample)> prior_sample;
    double horizon = 1.0;  // T
    int num_obs = 10;      // K, observations at t_k = k T / K
    // Gaussian prior parameters of the built-in problems, recorded so a
    // trained filter can be persisted and rebuilt.
    double prior_mean = 0.0;
    double prior_std = 1.0;
};

// Driver f~(x,u,v) = sum_ij da_ij/dx_i v_j + 1/2 sum_ij d2a_ij/dx_idx_j u
//                    - sum_i dmu_i/dx_i u - 2 sum_i mu_i v_i.
// Linear in (u,v) for fixed x.
double driver_f_tilde(const DynamicsModel& dyn, const VectorXd& x, double u, const VectorXd& v);

// Coefficients of the driver as a linear form: f~(x,u,v) = cu(x) u + cv(x).v
struct DriverCoeffs {
    double cu;
    VectorXd cv;
};
DriverCoeffs driver_coeffs(const DynamicsModel& dyn, const VectorXd& x);

// f(x,u,z) = f~(x, u, (sigma sigma^T)^{-1} sigma z).
double driver_f(const DynamicsModel& dyn, const VectorXd& x, double u, const VectorXd& z);

// The paper's two experiment problems. Both use T=1, K=10, sigma=1, h(x)=x,
// R=1 and a standard normal prior (prior configurable).
FilterProblem make_ou_problem(double T = 1.0, int K = 10, double prior_mean = 0.0,
                              double prior_std = 1.0);
FilterProblem make_bistable_problem(double T = 1.0, int K = 10, double prior_mean = 0.0,
                                    double prior_std = 1.0);

}  // namespace bsdef

#pragma once

#include <cstdint>
#include <vector>

#include "bsdef/grid.hpp"
#include "bsdef/model.hpp"

namespace bsdef {

struct GaussianBelief {
    VectorXd mean;
    MatrixXd cov;
};

// Continuous-time prediction for linear drift mu(x) = A x by an Euler
// moment recursion with `substeps` steps of size dt/substeps:
//   m += A m delta,  P += (A P + P A^T + sigma sigma^T) delta.
GaussianBelief kalman_predict(const GaussianBelief& belief, const MatrixXd& a_lin,
                              const MatrixXd& sigma, double dt, int substeps);

// Exact scalar Ornstein-Uhlenbeck moments (dX = -X dt + s dW), used as an
// oracle for the Euler recursion.
GaussianBelief ou_exact_predict(const GaussianBelief& belief, double s, double dt);

GaussianBelief kalman_update(const GaussianBelief& belief, const MatrixXd& h_lin,
                             const MatrixXd& noise_cov, const VectorXd& o);

// Posterior beliefs at t_1..t_K for one observation sequence (row layout of
// TrajectoryBatch::obs), starting from the given prior belief.
std::vector<GaussianBelief> kalman_posteriors(const GaussianBelief& prior, const MatrixXd& a_lin,
                                              const MatrixXd& sigma, const MatrixXd& h_lin,
                                              const MatrixXd& noise_cov,
                                              const Eigen::RowVectorXd& obs_row, int K, double dt,
                                              int substeps);

VectorXd gaussian_density_grid(const GaussianBelief& belief, const VectorXd& x_pts);

struct ParticleEnsemble {
    MatrixXd positions;  // d x P
    VectorXd weights;    // sums to 1
};

ParticleEnsemble init_ensemble(const FilterProblem& prob, int particles, std::uint64_t seed);

// Bootstrap step: Euler-Maruyama propagation over `substeps` fine steps of
// total length dt, weighting by the likelihood of `o`, then systematic
// resampling back to uniform weights.
ParticleEnsemble pf_step(const ParticleEnsemble& ens, const FilterProblem& prob, double dt,
                         int substeps, const VectorXd& o, std::uint64_t seed, std::uint64_t step_id);

// Silverman bandwidth (d = 1): 0.9 min(sd, IQR/1.34) P^(-1/5), floored at 1e-6.
double silverman_bandwidth(const ParticleEnsemble& ens);

// Equal-weight Gaussian KDE at a point.
double kde_density(const ParticleEnsemble& ens, double x, double bandwidth = 0.0);

// KDE on an equidistant grid with kernels truncated at 8 bandwidths.
VectorXd kde_density_grid(const ParticleEnsemble& ens, const QuadratureGrid& grid,
                          double bandwidth = 0.0);

// Particle-filter reference densities at t_1..t_K on x_pts (equidistant).
std::vector<VectorXd> pf_reference_densities(const FilterProblem& prob,
                                             const Eigen::RowVectorXd& obs_row, int particles,
                                             int substeps, const QuadratureGrid& grid,
                                             std::uint64_t seed);

// Kalman reference densities for the OU problem on x_pts.
std::vector<VectorXd> kalman_reference_densities(const FilterProblem& prob,
                                                 const Eigen::RowVectorXd& obs_row, int substeps,
                                                 const VectorXd& x_pts, double prior_mean,
                                                 double prior_var);

}  // namespace bsdef

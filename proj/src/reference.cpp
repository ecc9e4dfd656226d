#include "bsdef/reference.hpp"

#include <algorithm>
#include <cmath>

#include "bsdef/errors.hpp"
#include "bsdef/rng.hpp"

namespace bsdef {

GaussianBelief kalman_predict(const GaussianBelief& belief, const MatrixXd& a_lin,
                              const MatrixXd& sigma, double dt, int substeps) {
    const double delta = dt / substeps;
    const MatrixXd q = sigma * sigma.transpose();
    GaussianBelief b = belief;
    for (int s = 0; s < substeps; ++s) {
        b.mean = b.mean + a_lin * b.mean * delta;
        b.cov = b.cov + (a_lin * b.cov + b.cov * a_lin.transpose() + q) * delta;
        b.cov = 0.5 * (b.cov + b.cov.transpose());
    }
    const Eigen::LLT<MatrixXd> llt(b.cov);
    if (llt.info() != Eigen::Success) {
        throw NumericalError("kalman_predict: covariance lost positive definiteness");
    }
    return b;
}

GaussianBelief ou_exact_predict(const GaussianBelief& belief, double s, double dt) {
    GaussianBelief b = belief;
    const double e = std::exp(-dt);
    b.mean = belief.mean * e;
    b.cov = belief.cov * e * e;
    b.cov.array() += 0.5 * s * s * (1.0 - e * e);
    return b;
}

GaussianBelief kalman_update(const GaussianBelief& belief, const MatrixXd& h_lin,
                             const MatrixXd& noise_cov, const VectorXd& o) {
    const MatrixXd innov_cov = h_lin * belief.cov * h_lin.transpose() + noise_cov;
    const Eigen::LLT<MatrixXd> llt(innov_cov);
    if (llt.info() != Eigen::Success) {
        throw NumericalError("kalman_update: singular innovation covariance");
    }
    const MatrixXd gain = belief.cov * h_lin.transpose() * llt.solve(
                              MatrixXd::Identity(innov_cov.rows(), innov_cov.cols()));
    GaussianBelief b;
    b.mean = belief.mean + gain * (o - h_lin * belief.mean);
    const MatrixXd i_kh =
        MatrixXd::Identity(belief.cov.rows(), belief.cov.cols()) - gain * h_lin;
    // Joseph form keeps the posterior covariance symmetric positive definite.
    b.cov = i_kh * belief.cov * i_kh.transpose() + gain * noise_cov * gain.transpose();
    b.cov = 0.5 * (b.cov + b.cov.transpose());
    return b;
}

std::vector<GaussianBelief> kalman_posteriors(const GaussianBelief& prior, const MatrixXd& a_lin,
                                              const MatrixXd& sigma, const MatrixXd& h_lin,
                                              const MatrixXd& noise_cov,
                                              const Eigen::RowVectorXd& obs_row, int K, double dt,
                                              int substeps) {
    std::vector<GaussianBelief> out;
    out.reserve(K);
    const int dp = static_cast<int>(h_lin.rows());
    GaussianBelief b = prior;
    for (int k = 0; k < K; ++k) {
        b = kalman_predict(b, a_lin, sigma, dt, substeps);
        const VectorXd o = obs_row.segment(static_cast<Eigen::Index>(k) * dp, dp).transpose();
        b = kalman_update(b, h_lin, noise_cov, o);
        out.push_back(b);
    }
    return out;
}

VectorXd gaussian_density_grid(const GaussianBelief& belief, const VectorXd& x_pts) {
    if (belief.mean.size() != 1) {
        throw std::invalid_argument("gaussian_density_grid: d = 1 only");
    }
    const double m = belief.mean[0];
    const double var = belief.cov(0, 0);
    const double norm = 1.0 / std::sqrt(2.0 * M_PI * var);
    return (norm * (-0.5 * (x_pts.array() - m).square() / var).exp()).matrix();
}

ParticleEnsemble init_ensemble(const FilterProblem& prob, int particles, std::uint64_t seed) {
    ParticleEnsemble ens;
    ens.positions.resize(prob.dynamics.dim, particles);
    for (int p = 0; p < particles; ++p) {
        ens.positions.col(p) = prob.prior_sample(seed ^ 0x9e3779b9ULL, p);
    }
    ens.weights = VectorXd::Constant(particles, 1.0 / particles);
    return ens;
}

namespace {

std::vector<int> systematic_resample(const VectorXd& weights, double u0) {
    const int P = static_cast<int>(weights.size());
    std::vector<int> idx(P);
    double cum = weights[0];
    int j = 0;
    for (int p = 0; p < P; ++p) {
        const double u = (p + u0) / P;
        while (u > cum && j < P - 1) cum += weights[++j];
        idx[p] = j;
    }
    return idx;
}

}  // namespace

ParticleEnsemble pf_step(const ParticleEnsemble& ens, const FilterProblem& prob, double dt,
                         int substeps, const VectorXd& o, std::uint64_t seed,
                         std::uint64_t step_id) {
    const int P = static_cast<int>(ens.positions.cols());
    const int d = prob.dynamics.dim;
    const double delta = dt / substeps;
    const double sqrt_delta = std::sqrt(delta);

    ParticleEnsemble out;
    out.positions = ens.positions;
    MatrixXd noise(d, P);
    for (int s = 0; s < substeps; ++s) {
        for (int p = 0; p < P; ++p) {
            for (int i = 0; i < d; ++i) {
                noise(i, p) = sqrt_delta * rng::normal(seed, rng::kStateIncrement,
                                                       step_id * substeps + s, p * d + i);
            }
        }
        out.positions = out.positions + prob.dynamics.mu_cols(out.positions) * delta +
                        prob.dynamics.sigma_apply(out.positions, noise);
    }

    VectorXd w(P);
    for (int p = 0; p < P; ++p) {
        w[p] = ens.weights[p] * prob.observation.likelihood(o, out.positions.col(p));
    }
    const double total = w.sum();
    if (!(total > 0.0)) throw NumericalError("pf_step: all particle weights vanished");
    w /= total;

    const double u0 = rng::uniform(seed, rng::kResample, step_id);
    const std::vector<int> idx = systematic_resample(w, u0);
    MatrixXd resampled(d, P);
    for (int p = 0; p < P; ++p) resampled.col(p) = out.positions.col(idx[p]);
    out.positions = std::move(resampled);
    out.weights = VectorXd::Constant(P, 1.0 / P);
    return out;
}

double silverman_bandwidth(const ParticleEnsemble& ens) {
    const int P = static_cast<int>(ens.positions.cols());
    if (P < 2) throw std::invalid_argument("silverman_bandwidth: P >= 2 required");
    std::vector<double> xs(static_cast<std::size_t>(P));
    for (int p = 0; p < P; ++p) xs[static_cast<std::size_t>(p)] = ens.positions(0, p);
    const double mean = ens.positions.row(0).mean();
    const double sd = std::sqrt((ens.positions.row(0).array() - mean).square().sum() / (P - 1));
    std::sort(xs.begin(), xs.end());
    auto quantile = [&](double q) {
        const double pos = q * (P - 1);
        const int lo = static_cast<int>(pos);
        const int hi = std::min(lo + 1, P - 1);
        return xs[lo] + (pos - lo) * (xs[hi] - xs[lo]);
    };
    const double iqr = quantile(0.75) - quantile(0.25);
    const double spread = std::min(sd, iqr / 1.34);
    return std::max(0.9 * spread * std::pow(static_cast<double>(P), -0.2), 1e-6);
}

double kde_density(const ParticleEnsemble& ens, double x, double bandwidth) {
    const int P = static_cast<int>(ens.positions.cols());
    const double h = bandwidth > 0.0 ? bandwidth : silverman_bandwidth(ens);
    const double norm = 1.0 / (P * h * std::sqrt(2.0 * M_PI));
    double acc = 0.0;
    for (int p = 0; p < P; ++p) {
        const double z = (x - ens.positions(0, p)) / h;
        acc += std::exp(-0.5 * z * z);
    }
    return norm * acc;
}

VectorXd kde_density_grid(const ParticleEnsemble& ens, const QuadratureGrid& grid,
                          double bandwidth) {
    const int P = static_cast<int>(ens.positions.cols());
    const double h = bandwidth > 0.0 ? bandwidth : silverman_bandwidth(ens);
    const double dz = grid.dz();
    const int reach = static_cast<int>(std::ceil(8.0 * h / dz));
    VectorXd out = VectorXd::Zero(grid.points);
    for (int p = 0; p < P; ++p) {
        const double xp = ens.positions(0, p);
        const int center = static_cast<int>(std::lround((xp - grid.lo) / dz));
        const int j0 = std::max(0, center - reach);
        const int j1 = std::min(grid.points - 1, center + reach);
        for (int j = j0; j <= j1; ++j) {
            const double z = (grid.point(j) - xp) / h;
            out[j] += std::exp(-0.5 * z * z);
        }
    }
    out *= 1.0 / (P * h * std::sqrt(2.0 * M_PI));
    return out;
}

std::vector<VectorXd> pf_reference_densities(const FilterProblem& prob,
                                             const Eigen::RowVectorXd& obs_row, int particles,
                                             int substeps, const QuadratureGrid& grid,
                                             std::uint64_t seed) {
    const int K = prob.num_obs;
    const int dp = prob.observation.obs_dim;
    const double dt = prob.horizon / K;
    std::vector<VectorXd> out;
    out.reserve(K);
    ParticleEnsemble ens = init_ensemble(prob, particles, seed);
    for (int k = 0; k < K; ++k) {
        const VectorXd o = obs_row.segment(static_cast<Eigen::Index>(k) * dp, dp).transpose();
        ens = pf_step(ens, prob, dt, substeps, o, seed, static_cast<std::uint64_t>(k));
        out.push_back(kde_density_grid(ens, grid));
    }
    return out;
}

std::vector<VectorXd> kalman_reference_densities(const FilterProblem& prob,
                                                 const Eigen::RowVectorXd& obs_row, int substeps,
                                                 const VectorXd& x_pts, double prior_mean,
                                                 double prior_var) {
    if (prob.dynamics.dim != 1) {
        throw std::invalid_argument("kalman_reference_densities: d = 1 only");
    }
    GaussianBelief prior;
    prior.mean = VectorXd::Constant(1, prior_mean);
    prior.cov = MatrixXd::Constant(1, 1, prior_var);
    const MatrixXd a_lin = MatrixXd::Constant(1, 1, -1.0);  // OU drift
    const MatrixXd sigma = MatrixXd::Identity(1, 1);
    const MatrixXd h_lin = MatrixXd::Identity(1, 1);
    const std::vector<GaussianBelief> beliefs =
        kalman_posteriors(prior, a_lin, sigma, h_lin, prob.observation.noise_cov, obs_row,
                          prob.num_obs, prob.horizon / prob.num_obs, substeps);
    std::vector<VectorXd> out;
    out.reserve(beliefs.size());
    for (const GaussianBelief& b : beliefs) out.push_back(gaussian_density_grid(b, x_pts));
    return out;
}

}  // namespace bsdef

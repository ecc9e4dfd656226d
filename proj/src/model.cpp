#include "bsdef/model.hpp"

#include <cmath>

#include "bsdef/errors.hpp"
#include "bsdef/rng.hpp"

namespace bsdef {

namespace {

bool all_finite(const VectorXd& x) { return x.allFinite(); }

double fd_step(double xi) { return 1e-5 * std::max(1.0, std::abs(xi)); }

MatrixXd diffusion_a(const std::function<MatrixXd(const VectorXd&)>& sigma, const VectorXd& x) {
    const MatrixXd s = sigma(x);
    return s * s.transpose();
}

}  // namespace

double driver_f_tilde(const DynamicsModel& dyn, const VectorXd& x, double u, const VectorXd& v) {
    if (!all_finite(x) || !std::isfinite(u) || !all_finite(v)) {
        throw std::domain_error("driver_f_tilde: non-finite input");
    }
    const DriverCoeffs c = driver_coeffs(dyn, x);
    return c.cu * u + c.cv.dot(v);
}

DriverCoeffs driver_coeffs(const DynamicsModel& dyn, const VectorXd& x) {
    DriverCoeffs c;
    c.cu = 0.5 * dyn.a_second_trace(x) - dyn.div_mu(x);
    c.cv = dyn.a_first_derivs(x) - 2.0 * dyn.mu(x);
    return c;
}

double driver_f(const DynamicsModel& dyn, const VectorXd& x, double u, const VectorXd& z) {
    const MatrixXd a = diffusion_a(dyn.sigma, x);
    Eigen::FullPivLU<MatrixXd> lu(a);
    if (!lu.isInvertible()) {
        throw NumericalError("driver_f: sigma sigma^T is singular (ellipticity violated)");
    }
    const VectorXd v = lu.solve(dyn.sigma(x) * z);
    return driver_f_tilde(dyn, x, u, v);
}

void ensure_batched(DynamicsModel& dyn) {
    if (!dyn.mu_cols) {
        auto mu = dyn.mu;
        dyn.mu_cols = [mu](const MatrixXd& x) {
            MatrixXd out(x.rows(), x.cols());
            for (Eigen::Index m = 0; m < x.cols(); ++m) out.col(m) = mu(x.col(m));
            return out;
        };
    }
    if (!dyn.sigma_apply) {
        auto sigma = dyn.sigma;
        dyn.sigma_apply = [sigma](const MatrixXd& x, const MatrixXd& u) {
            MatrixXd out(x.rows(), x.cols());
            for (Eigen::Index m = 0; m < x.cols(); ++m) out.col(m) = sigma(x.col(m)) * u.col(m);
            return out;
        };
    }
    if (!dyn.driver_coeffs_cols) {
        const DynamicsModel self = dyn;  // pointwise fields only
        dyn.driver_coeffs_cols = [self](const MatrixXd& x, VectorXd& cu, MatrixXd& cv) {
            cu.resize(x.cols());
            cv.resize(x.rows(), x.cols());
            for (Eigen::Index m = 0; m < x.cols(); ++m) {
                const DriverCoeffs c = driver_coeffs(self, x.col(m));
                cu[m] = c.cu;
                cv.col(m) = c.cv;
            }
        };
    }
}

DynamicsModel make_dynamics_fd(std::function<VectorXd(const VectorXd&)> mu,
                               std::function<MatrixXd(const VectorXd&)> sigma, int dim) {
    DynamicsModel dyn;
    dyn.mu = mu;
    dyn.sigma = sigma;
    dyn.dim = dim;
    dyn.div_mu = [mu, dim](const VectorXd& x) {
        double s = 0.0;
        for (int i = 0; i < dim; ++i) {
            VectorXd xp = x, xm = x;
            const double h = fd_step(x[i]);
            xp[i] += h;
            xm[i] -= h;
            s += (mu(xp)[i] - mu(xm)[i]) / (2.0 * h);
        }
        return s;
    };
    dyn.a_first_derivs = [sigma, dim](const VectorXd& x) {
        VectorXd out = VectorXd::Zero(dim);
        for (int i = 0; i < dim; ++i) {
            VectorXd xp = x, xm = x;
            const double h = fd_step(x[i]);
            xp[i] += h;
            xm[i] -= h;
            const MatrixXd ap = diffusion_a(sigma, xp);
            const MatrixXd am = diffusion_a(sigma, xm);
            out += (ap.row(i) - am.row(i)).transpose() / (2.0 * h);
        }
        return out;
    };
    dyn.a_second_trace = [sigma, dim](const VectorXd& x) {
        double s = 0.0;
        for (int i = 0; i < dim; ++i) {
            for (int j = 0; j < dim; ++j) {
                const double hi = fd_step(x[i]);
                const double hj = fd_step(x[j]);
                if (i == j) {
                    VectorXd xp = x, xm = x;
                    xp[i] += hi;
                    xm[i] -= hi;
                    s += (diffusion_a(sigma, xp)(i, i) - 2.0 * diffusion_a(sigma, x)(i, i) +
                          diffusion_a(sigma, xm)(i, i)) /
                         (hi * hi);
                } else {
                    VectorXd xpp = x, xpm = x, xmp = x, xmm = x;
                    xpp[i] += hi;
                    xpp[j] += hj;
                    xpm[i] += hi;
                    xpm[j] -= hj;
                    xmp[i] -= hi;
                    xmp[j] += hj;
                    xmm[i] -= hi;
                    xmm[j] -= hj;
                    s += (diffusion_a(sigma, xpp)(i, j) - diffusion_a(sigma, xpm)(i, j) -
                          diffusion_a(sigma, xmp)(i, j) + diffusion_a(sigma, xmm)(i, j)) /
                         (4.0 * hi * hj);
                }
            }
        }
        return s;
    };
    return dyn;
}

double validate_derivatives(const DynamicsModel& dyn, const std::vector<VectorXd>& points) {
    const DynamicsModel fd = make_dynamics_fd(dyn.mu, dyn.sigma, dyn.dim);
    double worst = 0.0;
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); };
    for (const VectorXd& x : points) {
        worst = std::max(worst, rel(dyn.div_mu(x), fd.div_mu(x)));
        worst = std::max(worst, rel(dyn.a_second_trace(x), fd.a_second_trace(x)));
        const VectorXd va = dyn.a_first_derivs(x);
        const VectorXd vf = fd.a_first_derivs(x);
        for (int i = 0; i < dyn.dim; ++i) worst = std::max(worst, rel(va[i], vf[i]));
    }
    return worst;
}

ObservationModel make_gaussian_observation(std::function<VectorXd(const VectorXd&)> h,
                                           MatrixXd noise_cov) {
    ObservationModel obs;
    obs.h = h;
    obs.noise_cov = noise_cov;
    obs.obs_dim = static_cast<int>(noise_cov.rows());
    const Eigen::LLT<MatrixXd> llt(noise_cov);
    if (llt.info() != Eigen::Success) {
        throw NumericalError("observation noise covariance is not SPD");
    }
    const MatrixXd r_inv = noise_cov.inverse();
    const double log_norm = -0.5 * (obs.obs_dim * std::log(2.0 * M_PI) +
                                    std::log(noise_cov.determinant()));
    obs.likelihood = [h, r_inv, log_norm](const VectorXd& o, const VectorXd& x) {
        const VectorXd r = o - h(x);
        return std::exp(log_norm - 0.5 * r.dot(r_inv * r));
    };
    return obs;
}

namespace {

FilterProblem make_scalar_problem(const std::string& name, DynamicsModel dyn, double T, int K,
                                  double prior_mean, double prior_std) {
    FilterProblem p;
    p.name = name;
    p.dynamics = std::move(dyn);
    p.observation = make_gaussian_observation(
        [](const VectorXd& x) { return x; }, MatrixXd::Identity(1, 1));
    const double ps2 = prior_std * prior_std;
    p.prior = [prior_mean, prior_std, ps2](const VectorXd& x) {
        const double z = x[0] - prior_mean;
        return std::exp(-0.5 * z * z / ps2) / (prior_std * std::sqrt(2.0 * M_PI));
    };
    p.prior_sample = [prior_mean, prior_std](std::uint64_t seed, std::uint64_t sample) {
        VectorXd x(1);
        x[0] = prior_mean + prior_std * rng::normal(seed, rng::kPriorSample, sample, 0);
        return x;
    };
    p.horizon = T;
    p.num_obs = K;
    p.prior_mean = prior_mean;
    p.prior_std = prior_std;
    return p;
}

}  // namespace

FilterProblem make_ou_problem(double T, int K, double prior_mean, double prior_std) {
    DynamicsModel dyn;
    dyn.dim = 1;
    dyn.mu = [](const VectorXd& x) { return VectorXd(-x); };
    dyn.sigma = [](const VectorXd&) { return MatrixXd::Identity(1, 1); };
    dyn.div_mu = [](const VectorXd&) { return -1.0; };
    dyn.a_first_derivs = [](const VectorXd&) { return VectorXd::Zero(1); };
    dyn.a_second_trace = [](const VectorXd&) { return 0.0; };
    dyn.mu_cols = [](const MatrixXd& x) { return MatrixXd(-x); };
    dyn.sigma_apply = [](const MatrixXd&, const MatrixXd& u) { return u; };
    dyn.driver_coeffs_cols = [](const MatrixXd& x, VectorXd& cu, MatrixXd& cv) {
        cu = VectorXd::Ones(x.cols());
        cv = 2.0 * x;  // -2 mu
    };
    return make_scalar_problem("ou", std::move(dyn), T, K, prior_mean, prior_std);
}

FilterProblem make_bistable_problem(double T, int K, double prior_mean, double prior_std) {
    DynamicsModel dyn;
    dyn.dim = 1;
    dyn.mu = [](const VectorXd& x) {
        VectorXd m(1);
        m[0] = 0.4 * (5.0 * x[0] - x[0] * x[0] * x[0]);
        return m;
    };
    dyn.sigma = [](const VectorXd&) { return MatrixXd::Identity(1, 1); };
    dyn.div_mu = [](const VectorXd& x) { return 2.0 - 1.2 * x[0] * x[0]; };
    dyn.a_first_derivs = [](const VectorXd&) { return VectorXd::Zero(1); };
    dyn.a_second_trace = [](const VectorXd&) { return 0.0; };
    dyn.mu_cols = [](const MatrixXd& x) {
        return MatrixXd(0.4 * (5.0 * x.array() - x.array().cube()));
    };
    dyn.sigma_apply = [](const MatrixXd&, const MatrixXd& u) { return u; };
    dyn.driver_coeffs_cols = [](const MatrixXd& x, VectorXd& cu, MatrixXd& cv) {
        cu = (1.2 * x.array().square() - 2.0).matrix().transpose();
        cv = (-0.8 * (5.0 * x.array() - x.array().cube())).matrix();
    };
    return make_scalar_problem("bistable", std::move(dyn), T, K, prior_mean, prior_std);
}

}  // namespace bsdef

#include "bsdef/eval.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "bsdef/errors.hpp"
#include "bsdef/rng.hpp"

namespace bsdef {

namespace {

constexpr double kLikelihoodFloor = 1e-300;

QuadratureGrid x_grid_of(const EvalSettings& s) {
    return QuadratureGrid{s.x_lo, s.x_hi, s.x_points};
}

}  // namespace

ReferenceProvider make_reference_provider(const FilterProblem& prob, const EvalSettings& settings,
                                          const VectorXd& x_pts) {
    if (prob.name == "ou") {
        const int substeps = settings.ref_substeps;
        const double pm = settings.prior_mean;
        const double pv = settings.prior_std * settings.prior_std;
        return [prob, substeps, x_pts, pm, pv](const Eigen::RowVectorXd& obs_row) {
            return kalman_reference_densities(prob, obs_row, substeps, x_pts, pm, pv);
        };
    }
    if (prob.name == "bistable") {
        QuadratureGrid grid;
        grid.lo = x_pts[0];
        grid.hi = x_pts[x_pts.size() - 1];
        grid.points = static_cast<int>(x_pts.size());
        const int particles = settings.pf_particles;
        const int substeps = settings.ref_substeps;
        const std::uint64_t seed = settings.seed;
        return [prob, particles, substeps, grid, seed](const Eigen::RowVectorXd& obs_row) {
            // Key the PF noise on the observation content so distinct
            // sequences get independent particles under one seed.
            std::uint64_t h = seed;
            for (Eigen::Index i = 0; i < obs_row.size(); ++i) {
                std::uint64_t bits;
                static_assert(sizeof(bits) == sizeof(double));
                std::memcpy(&bits, &obs_row[i], sizeof(bits));
                h = rng::key(h, bits);
            }
            return pf_reference_densities(prob, obs_row, particles, substeps, grid, h);
        };
    }
    throw ConfigError("no reference filter for problem: " + prob.name);
}

std::vector<double> compute_e_all(const TrainedFilter& tf, const ReferenceProvider& ref,
                                  const MatrixXd& obs_rows, const VectorXd& x_pts) {
    const int K = tf.problem.num_obs;
    std::vector<double> e(K, 0.0);
    for (Eigen::Index m = 0; m < obs_rows.rows(); ++m) {
        const std::vector<VectorXd> ref_dens = ref(obs_rows.row(m));
        for (int k = 1; k <= K; ++k) {
            const VectorXd phat = filter_density_grid(tf, k, obs_rows.row(m), x_pts, true);
            const double diff = (phat - ref_dens[k - 1]).cwiseAbs().maxCoeff();
            e[k - 1] = std::max(e[k - 1], diff);
        }
    }
    return e;
}

double compute_e_k(const TrainedFilter& tf, const ReferenceProvider& ref, int k,
                   const MatrixXd& obs_rows, const VectorXd& x_pts) {
    if (k < 1 || k > tf.problem.num_obs) throw std::invalid_argument("compute_e_k: bad k");
    double e = 0.0;
    for (Eigen::Index m = 0; m < obs_rows.rows(); ++m) {
        const std::vector<VectorXd> ref_dens = ref(obs_rows.row(m));
        const VectorXd phat = filter_density_grid(tf, k, obs_rows.row(m), x_pts, true);
        e = std::max(e, (phat - ref_dens[k - 1]).cwiseAbs().maxCoeff());
    }
    return e;
}

namespace {

// Normalization constant C(o_{1:j}) of the step-j target for one
// observation sequence (j >= 1).
double target_constant(const TrainedFilter& tf, int j, const Eigen::RowVectorXd& obs_row) {
    const MlpParams& w_prev = tf.steps[j - 1].w;
    const int dp = tf.problem.observation.obs_dim;
    const int K = tf.problem.num_obs;
    const VectorXd obs_pad = pad_observations_row(obs_row, j - 1, K, dp);
    const VectorXd o_j = obs_row.segment(static_cast<Eigen::Index>(j - 1) * dp, dp).transpose();
    const QuadratureGrid& quad = tf.quad;

    const VectorXd z = quad.all_points();
    MatrixXd input(w_prev.spec.input_dim, z.size());
    input.row(0) = z.transpose();
    input.bottomRows(obs_pad.size()).colwise() = obs_pad;
    const MatrixXd wv = forward_batch(w_prev, input);
    double c = 0.0;
    VectorXd zx(1);
    for (int i = 0; i < quad.points; ++i) {
        zx[0] = z[i];
        c += wv(0, i) * std::max(tf.problem.observation.likelihood(o_j, zx), kLikelihoodFloor);
    }
    c *= quad.dz();
    if (!(c > 1e-300)) throw NumericalError("compute_E_k: degenerate normalization constant");
    return c;
}

}  // namespace

double compute_E_k(const TrainedFilter& tf, int k, const MatrixXd& obs_rows,
                   const VectorXd& probes, int inner_batch, std::uint64_t seed) {
    const int K = tf.problem.num_obs;
    if (k < 1 || k > K) throw std::invalid_argument("compute_E_k: bad k");
    if (static_cast<int>(tf.steps.size()) < k) {
        throw ArtifactError("compute_E_k: filter has no trained step " + std::to_string(k - 1));
    }
    const int j = k - 1;  // minimization problem index
    const StepNetworks& nets = tf.steps[j];
    const FilterProblem& prob = tf.problem;
    const int d = prob.dynamics.dim;
    const int dp = prob.observation.obs_dim;
    const double sqrt_tau = std::sqrt(tf.grid.tau);
    const int N = tf.grid.substeps;
    const int B = inner_batch;

    double worst = 0.0;
    for (Eigen::Index m = 0; m < obs_rows.rows(); ++m) {
        const VectorXd obs_pad = pad_observations_row(obs_rows.row(m), j, K, dp);
        // The target evaluates the previous optimum, whose observation input
        // stops one step earlier than the problem-j networks'.
        const VectorXd obs_pad_prev = pad_observations_row(obs_rows.row(m), j - 1, K, dp);
        const double c = j >= 1 ? target_constant(tf, j, obs_rows.row(m)) : 1.0;
        const VectorXd o_j =
            j >= 1 ? VectorXd(obs_rows.row(m).segment(static_cast<Eigen::Index>(j - 1) * dp, dp)
                                  .transpose())
                   : VectorXd();

        for (Eigen::Index p = 0; p < probes.size(); ++p) {
            IntervalData data;
            data.x_start = MatrixXd::Constant(d, B, probes[p]);
            data.obs_input = MatrixXd(obs_pad.size(), B);
            data.obs_input.colwise() = obs_pad;
            data.dw.reserve(N);
            for (int n = 0; n < N; ++n) {
                MatrixXd dw(d, B);
                for (int b = 0; b < B; ++b) {
                    for (int i = 0; i < d; ++i) {
                        dw(i, b) = sqrt_tau * rng::normal(seed, rng::kEval,
                                                          (static_cast<std::uint64_t>(k) << 32) +
                                                              static_cast<std::uint64_t>(m),
                                                          (static_cast<std::uint64_t>(p) << 32) +
                                                              static_cast<std::uint64_t>(n),
                                                          b * d + i);
                    }
                }
                data.dw.push_back(std::move(dw));
            }
            const RolloutResult res = rollout(nets, prob, tf.grid, data);
            const MatrixXd& x_term = res.x_path.back();

            VectorXd target(B);
            if (j == 0) {
                for (int b = 0; b < B; ++b) target[b] = prob.prior(x_term.col(b));
            } else {
                const MlpParams& w_prev = tf.steps[j - 1].w;
                MatrixXd input(w_prev.spec.input_dim, B);
                input.topRows(d) = x_term;
                input.bottomRows(obs_pad_prev.size()).colwise() = obs_pad_prev;
                const MatrixXd wv = forward_batch(w_prev, input);
                for (int b = 0; b < B; ++b) {
                    const double lik = std::max(
                        prob.observation.likelihood(o_j, x_term.col(b)), kLikelihoodFloor);
                    target[b] = wv(0, b) * lik / c;
                }
            }
            const double rms =
                std::sqrt((res.y_terminal - target).squaredNorm() / static_cast<double>(B));
            worst = std::max(worst, rms);
        }
    }
    return worst;
}

std::vector<double> compute_E_all(const TrainedFilter& tf, const MatrixXd& obs_rows,
                                  const VectorXd& probes, int inner_batch, std::uint64_t seed) {
    std::vector<double> out;
    for (int k = 1; k <= tf.problem.num_obs; ++k) {
        out.push_back(compute_E_k(tf, k, obs_rows, probes, inner_batch, seed));
    }
    return out;
}

ErrorReport compute_error_report(const TrainedFilter& tf, const EvalSettings& settings) {
    ErrorReport report;
    report.substeps = tf.grid.substeps;
    report.settings = settings;

    const VectorXd x_pts = x_grid_of(settings).all_points();
    const ReferenceProvider ref = make_reference_provider(tf.problem, settings, x_pts);

    const TrajectoryBatch eval_batch = simulate_observations(
        tf.problem, tf.grid, settings.m_eval, rng::key(settings.seed, rng::kEval, 1));
    report.e_k = compute_e_all(tf, ref, eval_batch.obs, x_pts);

    const MatrixXd ek_obs =
        settings.ek_obs == settings.m_eval
            ? eval_batch.obs
            : simulate_observations(tf.problem, tf.grid, settings.ek_obs,
                                    rng::key(settings.seed, rng::kEval, 2))
                  .obs;
    const VectorXd probes =
        QuadratureGrid{settings.x_lo, settings.x_hi, settings.ek_probes}.all_points();
    report.E_k = compute_E_all(tf, ek_obs, probes, settings.ek_inner_batch,
                               rng::key(settings.seed, rng::kEval, 3));
    report.accumulated_E = 0.0;
    for (double v : report.E_k) report.accumulated_E += v;
    return report;
}

double fit_log2_slope(const std::vector<int>& n_values, const std::vector<double>& y) {
    if (n_values.size() < 2 || n_values.size() != y.size()) {
        throw std::invalid_argument("fit_log2_slope: need at least two (N, y) pairs");
    }
    const double n = static_cast<double>(n_values.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n_values.size(); ++i) {
        const double xi = std::log2(static_cast<double>(n_values[i]));
        const double yi = std::log2(y[i]);
        sx += xi;
        sy += yi;
        sxx += xi * xi;
        sxy += xi * yi;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

ConvergenceSummary summarize_convergence(const std::vector<ErrorReport>& reports) {
    ConvergenceSummary s;
    for (const ErrorReport& r : reports) {
        s.substeps.push_back(r.substeps);
        s.e_K.push_back(r.e_k.back());
        s.E.push_back(r.accumulated_E);
    }
    s.slope_e = fit_log2_slope(s.substeps, s.e_K);
    s.slope_E = fit_log2_slope(s.substeps, s.E);
    return s;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::ofstream open_csv(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw ArtifactError("cannot open for writing: " + path);
    return f;
}

}  // namespace

void write_e_over_time_csv(const std::vector<ErrorReport>& reports, double horizon,
                           const std::string& path) {
    std::ofstream f = open_csv(path);
    f << "N,k,t_k,e_k\n";
    for (const ErrorReport& r : reports) {
        const double dt = horizon / static_cast<double>(r.e_k.size());
        for (std::size_t k = 1; k <= r.e_k.size(); ++k) {
            f << r.substeps << "," << k << "," << fmt(k * dt) << "," << fmt(r.e_k[k - 1]) << "\n";
        }
    }
}

void write_E_over_time_csv(const std::vector<ErrorReport>& reports, const std::string& path) {
    std::ofstream f = open_csv(path);
    f << "N,k,E_k\n";
    for (const ErrorReport& r : reports) {
        for (std::size_t k = 1; k <= r.E_k.size(); ++k) {
            f << r.substeps << "," << k << "," << fmt(r.E_k[k - 1]) << "\n";
        }
    }
}

void write_convergence_csv(const ConvergenceSummary& summary, const std::string& path) {
    std::ofstream f = open_csv(path);
    f << "N,e_K,E,slope_e,slope_E\n";
    for (std::size_t i = 0; i < summary.substeps.size(); ++i) {
        f << summary.substeps[i] << "," << fmt(summary.e_K[i]) << "," << fmt(summary.E[i]) << ","
          << fmt(summary.slope_e) << "," << fmt(summary.slope_E) << "\n";
    }
}

}  // namespace bsdef

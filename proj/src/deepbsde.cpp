#include "bsdef/deepbsde.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "bsdef/errors.hpp"
#include "bsdef/rng.hpp"

namespace bsdef {

namespace {

constexpr double kLikelihoodFloor = 1e-300;

int obs_input_dim(const FilterProblem& prob) {
    return (prob.num_obs - 1) * prob.observation.obs_dim;
}

int net_input_dim(const FilterProblem& prob) {
    return prob.dynamics.dim + obs_input_dim(prob);
}

// Stacks states on top of the shared observation block.
MatrixXd net_input(const MatrixXd& x_cols, const MatrixXd& obs_input) {
    MatrixXd in(x_cols.rows() + obs_input.rows(), x_cols.cols());
    in.topRows(x_cols.rows()) = x_cols;
    in.bottomRows(obs_input.rows()) = obs_input;
    return in;
}

std::vector<MatrixXd> integrate_x_path(const DynamicsModel& dyn, double tau,
                                       const MatrixXd& x_start,
                                       const std::vector<MatrixXd>& dw) {
    std::vector<MatrixXd> path;
    path.reserve(dw.size() + 1);
    path.push_back(x_start);
    MatrixXd x = x_start;
    for (std::size_t n = 0; n < dw.size(); ++n) {
        x = x + dyn.mu_cols(x) * tau + dyn.sigma_apply(x, dw[n]);
        if (!x.allFinite()) {
            throw NumericalError("rollout: X diverged at substep " + std::to_string(n));
        }
        path.push_back(x);
    }
    return path;
}

struct DriverTerms {
    std::vector<VectorXd> cu;   // per substep, length M
    std::vector<MatrixXd> cv;   // per substep, d x M
    std::vector<MatrixXd> sdw;  // sigma(X_n) dW_n, d x M
};

DriverTerms driver_terms(const DynamicsModel& dyn, const std::vector<MatrixXd>& x_path,
                         const std::vector<MatrixXd>& dw) {
    DriverTerms t;
    const std::size_t N = dw.size();
    t.cu.resize(N);
    t.cv.resize(N);
    t.sdw.resize(N);
    for (std::size_t n = 0; n < N; ++n) {
        dyn.driver_coeffs_cols(x_path[n], t.cu[n], t.cv[n]);
        t.sdw[n] = dyn.sigma_apply(x_path[n], dw[n]);
    }
    return t;
}

void check_nets(const StepNetworks& nets, const FilterProblem& prob, const TimeGrid& grid) {
    if (static_cast<int>(nets.v.size()) != grid.substeps) {
        throw std::invalid_argument("StepNetworks: expected N v-networks");
    }
    if (nets.w.spec.input_dim != net_input_dim(prob)) {
        throw std::invalid_argument("StepNetworks: input dimension mismatch");
    }
}

}  // namespace

IntervalData slice_interval(const FilterProblem& prob, const TimeGrid& grid,
                            const TrajectoryBatch& batch, int k) {
    if (k < 0 || k >= grid.num_obs) throw std::invalid_argument("slice_interval: bad k");
    const int d = prob.dynamics.dim;
    const int dp = prob.observation.obs_dim;
    const int N = grid.substeps;
    const Eigen::Index m = batch.x0.rows();

    IntervalData data;
    data.x_start = batch.x0.transpose();
    auto dw_at = [&](int interval, int n) {
        MatrixXd dw(d, m);
        for (int i = 0; i < d; ++i) {
            dw.row(i) = batch.dw.col((static_cast<Eigen::Index>(interval) * N + n) * d + i);
        }
        return dw;
    };
    for (int j = 0; j < k; ++j) {
        for (int n = 0; n < N; ++n) {
            const MatrixXd dw = dw_at(j, n);
            data.x_start = data.x_start + prob.dynamics.mu_cols(data.x_start) * grid.tau +
                           prob.dynamics.sigma_apply(data.x_start, dw);
        }
    }
    data.dw.reserve(N);
    for (int n = 0; n < N; ++n) data.dw.push_back(dw_at(k, n));

    data.obs_input.resize(obs_input_dim(prob), m);
    data.obs_input.setZero();
    data.obs_input.topRows(static_cast<Eigen::Index>(k) * dp) =
        batch.obs.leftCols(static_cast<Eigen::Index>(k) * dp).transpose();
    return data;
}

RolloutResult rollout(const StepNetworks& nets, const FilterProblem& prob, const TimeGrid& grid,
                      const IntervalData& data) {
    check_nets(nets, prob, grid);
    const int N = grid.substeps;
    const double tau = grid.tau;
    const Eigen::Index m = data.x_start.cols();

    RolloutResult res;
    res.x_path = integrate_x_path(prob.dynamics, tau, data.x_start, data.dw);
    const DriverTerms t = driver_terms(prob.dynamics, res.x_path, data.dw);

    Eigen::RowVectorXd y = forward_batch(nets.w, net_input(data.x_start, data.obs_input)).row(0);
    for (int n = 0; n < N; ++n) {
        const MatrixXd vout = forward_batch(nets.v[n], net_input(res.x_path[n], data.obs_input));
        const Eigen::RowVectorXd f =
            t.cu[n].transpose().cwiseProduct(y) + (t.cv[n].cwiseProduct(vout)).colwise().sum();
        y = y - f * tau + (vout.cwiseProduct(t.sdw[n])).colwise().sum();
        if (!y.allFinite()) {
            throw NumericalError("rollout: Y diverged at substep " + std::to_string(n));
        }
    }
    res.y_terminal = y.transpose();
    (void)m;
    return res;
}

RolloutResult rollout(const StepNetworks& nets, const FilterProblem& prob, const TimeGrid& grid,
                      const TrajectoryBatch& batch, int k) {
    return rollout(nets, prob, grid, slice_interval(prob, grid, batch, k));
}

double loss(const StepNetworks& nets, const FilterProblem& prob, const TimeGrid& grid,
            const IntervalData& data, const TargetFn& target) {
    const RolloutResult res = rollout(nets, prob, grid, data);
    const Eigen::Index m = res.y_terminal.size();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
        const double g = target(res.x_path.back().col(i), static_cast<int>(i));
        const double r = res.y_terminal[i] - g;
        acc += r * r;
    }
    return acc / static_cast<double>(m);
}

LossGradients loss_gradient(const StepNetworks& nets, const FilterProblem& prob,
                            const TimeGrid& grid, const IntervalData& data,
                            const VectorXd& target_values, const VectorXd* weights) {
    check_nets(nets, prob, grid);
    const int N = grid.substeps;
    const double tau = grid.tau;
    const Eigen::Index m = data.x_start.cols();
    if (target_values.size() != m) {
        throw std::invalid_argument("loss_gradient: target size mismatch");
    }
    if (weights && weights->size() != m) {
        throw std::invalid_argument("loss_gradient: weight size mismatch");
    }

    const std::vector<MatrixXd> x_path =
        integrate_x_path(prob.dynamics, tau, data.x_start, data.dw);
    const DriverTerms t = driver_terms(prob.dynamics, x_path, data.dw);

    // Forward with caches.
    ForwardCache w_cache;
    std::vector<ForwardCache> v_caches(N);
    std::vector<MatrixXd> vouts(N);
    Eigen::RowVectorXd y =
        forward_batch(nets.w, net_input(data.x_start, data.obs_input), &w_cache).row(0);
    for (int n = 0; n < N; ++n) {
        vouts[n] = forward_batch(nets.v[n], net_input(x_path[n], data.obs_input), &v_caches[n]);
        const Eigen::RowVectorXd f = t.cu[n].transpose().cwiseProduct(y) +
                                     (t.cv[n].cwiseProduct(vouts[n])).colwise().sum();
        y = y - f * tau + (vouts[n].cwiseProduct(t.sdw[n])).colwise().sum();
        if (!y.allFinite()) {
            throw NumericalError("loss_gradient: Y diverged at substep " + std::to_string(n));
        }
    }

    LossGradients out;
    out.v.resize(N);
    const Eigen::RowVectorXd residual = (y - target_values.transpose());
    out.value = residual.squaredNorm() / static_cast<double>(m);

    // Reverse sweep: ybar_n accumulates (1 - tau * df/du) per substep.
    Eigen::RowVectorXd ybar = 2.0 * residual / static_cast<double>(m);
    for (int n = N - 1; n >= 0; --n) {
        const MatrixXd vcot =
            (-tau * t.cv[n] + t.sdw[n]).array().rowwise() * ybar.array();
        out.v[n] = backward_batch(nets.v[n], v_caches[n], vcot);
        ybar = ybar.cwiseProduct(
            (Eigen::RowVectorXd::Ones(m) - tau * t.cu[n].transpose()));
    }
    out.w = backward_batch(nets.w, w_cache, ybar);
    return out;
}

namespace {

// w_prev evaluated at all (z_j, obs_m) pairs; returns J x M.
MatrixXd eval_w_on_grid_batch(const MlpParams& w_prev, const VectorXd& z_pts,
                              const MatrixXd& obs_input) {
    const Eigen::Index J = z_pts.size();
    const Eigen::Index M = obs_input.cols();
    const Eigen::Index in_dim = 1 + obs_input.rows();
    MatrixXd input(in_dim, J * M);
    for (Eigen::Index s = 0; s < M; ++s) {
        input.block(0, s * J, 1, J) = z_pts.transpose();
        input.block(1, s * J, obs_input.rows(), J).colwise() = obs_input.col(s);
    }
    const MatrixXd flat = forward_batch(w_prev, input);  // 1 x (J*M)
    MatrixXd out(J, M);
    for (Eigen::Index s = 0; s < M; ++s) out.col(s) = flat.row(0).segment(s * J, J).transpose();
    return out;
}

// Observation block pad(o_{1:k-1}) for the previous optimum, one column per
// row of obs_rows.
MatrixXd prev_obs_input(const FilterProblem& prob, int k, const MatrixXd& obs_rows) {
    const int dp = prob.observation.obs_dim;
    const int K = prob.num_obs;
    MatrixXd obs_input = MatrixXd::Zero((K - 1) * dp, obs_rows.rows());
    obs_input.topRows(static_cast<Eigen::Index>(k - 1) * dp) =
        obs_rows.leftCols(static_cast<Eigen::Index>(k - 1) * dp).transpose();
    return obs_input;
}

// Per-row quadrature constants C = integral of w_prev(z, o_{1:k-1}) L(o_k, z).
VectorXd quad_constants(const FilterProblem& prob, int k, const MlpParams& w_prev,
                        const MatrixXd& obs_rows, const QuadratureGrid& quad) {
    if (prob.dynamics.dim != 1) {
        throw ConfigError("build_target: quadrature normalization implemented for d = 1 only");
    }
    const Eigen::Index m = obs_rows.rows();
    const int dp = prob.observation.obs_dim;
    const MatrixXd obs_input = prev_obs_input(prob, k, obs_rows);
    const VectorXd z = quad.all_points();
    const MatrixXd w_grid = eval_w_on_grid_batch(w_prev, z, obs_input);  // J x M

    VectorXd c = VectorXd::Zero(m);
    VectorXd zx(1);
    for (Eigen::Index i = 0; i < m; ++i) {
        const VectorXd o_k = obs_rows.row(i).segment(static_cast<Eigen::Index>(k - 1) * dp, dp)
                                 .transpose();
        double acc = 0.0;
        for (int j = 0; j < quad.points; ++j) {
            zx[0] = z[j];
            acc += w_grid(j, i) * std::max(prob.observation.likelihood(o_k, zx), kLikelihoodFloor);
        }
        c[i] = acc * quad.dz();
        if (!(c[i] > 1e-300)) {
            throw NumericalError("build_target: degenerate normalization constant (observation "
                                 "support missed the grid)");
        }
    }
    return c;
}

// Numerator times likelihood over precomputed constants.
VectorXd target_from_constants(const FilterProblem& prob, int k, const MlpParams& w_prev,
                               const MatrixXd& obs_rows, const MatrixXd& x_terminal,
                               const VectorXd& constants) {
    const Eigen::Index m = x_terminal.cols();
    const int dp = prob.observation.obs_dim;
    const MatrixXd obs_input = prev_obs_input(prob, k, obs_rows);
    const MatrixXd w_term = forward_batch(w_prev, net_input(x_terminal, obs_input));
    VectorXd target(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        const VectorXd o_k = obs_rows.row(i).segment(static_cast<Eigen::Index>(k - 1) * dp, dp)
                                 .transpose();
        const double lik =
            std::max(prob.observation.likelihood(o_k, x_terminal.col(i)), kLikelihoodFloor);
        target[i] = w_term(0, i) * lik / constants[i];
    }
    if (!target.allFinite()) throw NumericalError("build_target: non-finite target");
    return target;
}

}  // namespace

VectorXd build_target(const FilterProblem& prob, int k, const MlpParams* w_prev,
                      const MatrixXd& obs_rows, const MatrixXd& x_terminal,
                      const QuadratureGrid& quad) {
    const Eigen::Index m = x_terminal.cols();
    if (k == 0) {
        VectorXd target(m);
        for (Eigen::Index i = 0; i < m; ++i) target[i] = prob.prior(x_terminal.col(i));
        return target;
    }
    if (!w_prev) throw std::invalid_argument("build_target: k >= 1 needs the previous optimum");
    const VectorXd c = quad_constants(prob, k, *w_prev, obs_rows, quad);
    return target_from_constants(prob, k, *w_prev, obs_rows, x_terminal, c);
}

namespace {

// Supervised initialization of the density head: fit the network's
// pre-exponential output to log pi_0 on a wide sample of x. A plain MSE fit
// of the exponential head cannot learn the density tails (the gradient with
// respect to the log-output carries a factor w, which vanishes exactly
// where the density is small), whereas in log space the tail signal is as
// strong as the bulk signal. Starting from a log-quadratic shape, the BSDE
// training only has to apply bulk-scale corrections and the tails stay put
// for the same vanishing-gradient reason.
void pretrain_w_log_prior(MlpParams& w, const FilterProblem& prob, const TrainConfig& cfg,
                          std::uint64_t seed) {
    if (cfg.pretrain_steps <= 0 || prob.dynamics.dim != 1) return;
    const int B = cfg.batch_size;
    AdamState adam = make_adam(w, 1e-3);
    MatrixXd input = MatrixXd::Zero(w.spec.input_dim, B);
    VectorXd x(1);
    for (int t = 0; t < cfg.pretrain_steps; ++t) {
        ForwardCache cache;
        for (int b = 0; b < B; ++b) {
            input(0, b) = prob.prior_mean +
                          cfg.explore_spread * prob.prior_std * rng::normal(seed, 0xbeadULL, t, b);
        }
        const MatrixXd out = forward_batch(w, input, &cache);
        MatrixXd cot(1, B);
        for (int b = 0; b < B; ++b) {
            x[0] = input(0, b);
            const double target = std::log(std::max(prob.prior(x), 1e-300));
            // d/d out of (1/B) (log out - target)^2.
            cot(0, b) = 2.0 * (cache.out_pre(0, b) - target) / (B * std::max(out(0, b), 1e-300));
        }
        adam_step(w, backward_batch(w, cache, cot), adam);
    }
}

void ema_mlp(MlpParams& avg, const MlpParams& cur, double d) {
    for (std::size_t l = 0; l < avg.weights.size(); ++l) {
        avg.weights[l] = d * avg.weights[l] + (1.0 - d) * cur.weights[l];
        avg.biases[l] = d * avg.biases[l] + (1.0 - d) * cur.biases[l];
    }
}

void scale_mlp(MlpParams& p, double s) {
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        p.weights[l] *= s;
        p.biases[l] *= s;
    }
}

StepNetworks zeros_like(const StepNetworks& nets) {
    StepNetworks z = nets;
    scale_mlp(z.w, 0.0);
    for (MlpParams& vp : z.v) scale_mlp(vp, 0.0);
    return z;
}

StepNetworks init_step_networks(const FilterProblem& prob, const TimeGrid& grid, int k,
                                const TrainConfig& cfg) {
    const int in_dim = net_input_dim(prob);
    StepNetworks nets;
    nets.step_index = k;
    // Start the exponential head near the prior's mode scale.
    double mode = 0.0;
    VectorXd x(1);
    if (prob.dynamics.dim == 1) {
        for (int j = 0; j < cfg.train_quad.points; ++j) {
            x[0] = cfg.train_quad.point(j);
            mode = std::max(mode, prob.prior(x));
        }
    } else {
        mode = 1.0;
    }
    const double final_bias = std::log(std::max(mode, 1e-8));
    nets.w = init_mlp(w_net_spec(in_dim), rng::key(cfg.seed, rng::kInit, k, 0), 1e-2, final_bias);
    pretrain_w_log_prior(nets.w, prob, cfg, rng::key(cfg.seed, rng::kInit, k, 0xbeadULL));
    for (int n = 0; n < grid.substeps; ++n) {
        nets.v.push_back(init_mlp(v_net_spec(in_dim, prob.dynamics.dim),
                                  rng::key(cfg.seed, rng::kInit, k, 1 + n), 1e-2, 0.0));
    }
    return nets;
}

}  // namespace

StepTrainResult train_step_k(const FilterProblem& prob, const TimeGrid& grid, int k,
                             const MlpParams* w_prev, const TrainConfig& cfg,
                             const StepNetworks* warm_start) {
    if (k >= 1 && !w_prev) throw std::invalid_argument("train_step_k: missing previous optimum");
    StepTrainResult result;
    result.nets = warm_start ? *warm_start : init_step_networks(prob, grid, k, cfg);
    result.nets.step_index = k;
    const bool shortened = warm_start != nullptr && cfg.later_epochs > 0;
    const int max_epochs = shortened ? cfg.later_epochs : cfg.max_epochs;
    const double base_lr =
        (shortened && cfg.later_lr > 0.0) ? cfg.later_lr : cfg.learning_rate;
    if (max_epochs == 0) return result;

    AdamState w_adam = make_adam(result.nets.w, base_lr);
    std::vector<AdamState> v_adam;
    for (const MlpParams& vp : result.nets.v) v_adam.push_back(make_adam(vp, base_lr));

    // Pool of observation sequences with precomputed normalization
    // constants. The first rows follow the model law, the trailing
    // explore_frac fraction is drawn wide; batches sample the two parts in
    // the same proportion so the exploration mix is unchanged.
    const bool use_pool = k >= 1 && cfg.obs_pool > 0;
    MatrixXd pool_obs;
    VectorXd pool_c;
    int pool_explore = 0;
    if (use_pool) {
        const std::uint64_t pool_seed =
            rng::key(cfg.seed, 0x900bULL + static_cast<std::uint64_t>(k));
        TrajectoryBatch pool_batch = simulate_observations(prob, grid, cfg.obs_pool, pool_seed);
        pool_explore = std::clamp(
            static_cast<int>(std::lround(cfg.explore_frac * cfg.obs_pool)), 0, cfg.obs_pool);
        const std::uint64_t pool_explore_seed = rng::key(pool_seed, 0x9e1fULL);
        for (int m = cfg.obs_pool - pool_explore; m < cfg.obs_pool; ++m) {
            for (int j = 0; j < pool_batch.obs.cols(); ++j) {
                pool_batch.obs(m, j) =
                    prob.prior_mean + cfg.explore_spread * rng::normal(pool_explore_seed, 1, m, j);
            }
        }
        pool_obs = std::move(pool_batch.obs);
        pool_c.resize(cfg.obs_pool);
        const int chunk = 1024;  // bounds the J x chunk forward-pass footprint
        for (int lo = 0; lo < cfg.obs_pool; lo += chunk) {
            const int n = std::min(chunk, cfg.obs_pool - lo);
            pool_c.segment(lo, n) =
                quad_constants(prob, k, *w_prev, pool_obs.middleRows(lo, n), cfg.train_quad);
        }
    }

    StepNetworks best = result.nets;
    double best_loss = std::numeric_limits<double>::infinity();
    int stale_epochs = 0;
    const bool use_ema = cfg.param_ema > 0.0 && cfg.param_ema < 1.0;
    StepNetworks ema = use_ema ? zeros_like(result.nets) : StepNetworks{};
    long ema_steps = 0;

    for (int epoch = 0; epoch < max_epochs; ++epoch) {
        const double epoch_lr = base_lr * std::pow(cfg.lr_decay, epoch);
        w_adam.learning_rate = epoch_lr;
        for (AdamState& st : v_adam) st.learning_rate = epoch_lr;
        double epoch_loss = 0.0;
        for (int b = 0; b < cfg.batches_per_epoch; ++b) {
            const std::uint64_t batch_seed =
                rng::key(cfg.seed, 0xdadaULL + static_cast<std::uint64_t>(k), epoch, b);
            TrajectoryBatch batch =
                simulate_observations(prob, grid, cfg.batch_size, batch_seed);
            const int n_explore = std::clamp(
                static_cast<int>(std::lround(cfg.explore_frac * cfg.batch_size)), 0,
                cfg.batch_size);
            const std::uint64_t explore_seed = rng::key(batch_seed, 0x9e1fULL);
            std::vector<int> pool_idx;
            if (use_pool) {
                pool_idx.resize(cfg.batch_size);
                const int pool_model = cfg.obs_pool - pool_explore;
                const std::uint64_t idx_seed = rng::key(batch_seed, 0x9007ULL);
                for (int m = 0; m < cfg.batch_size; ++m) {
                    const bool explore_row = m >= cfg.batch_size - n_explore;
                    int part = explore_row ? pool_explore : pool_model;
                    int base = explore_row ? pool_model : 0;
                    if (part <= 0) {
                        part = cfg.obs_pool;
                        base = 0;
                    }
                    const int j = std::min(
                        part - 1, static_cast<int>(rng::uniform(idx_seed, 0, m, 0) * part));
                    pool_idx[m] = base + std::max(j, 0);
                    batch.obs.row(m) = pool_obs.row(pool_idx[m]);
                }
            } else if (n_explore > 0) {
                for (int m = cfg.batch_size - n_explore; m < cfg.batch_size; ++m) {
                    for (int j = 0; j < batch.obs.cols(); ++j) {
                        batch.obs(m, j) = prob.prior_mean +
                                          cfg.explore_spread * rng::normal(explore_seed, 1, m, j);
                    }
                }
            }
            IntervalData data = slice_interval(prob, grid, batch, k);
            if (n_explore > 0) {
                for (int m = cfg.batch_size - n_explore; m < cfg.batch_size; ++m) {
                    for (int i = 0; i < data.x_start.rows(); ++i) {
                        data.x_start(i, m) = prob.prior_mean +
                                             cfg.explore_spread * rng::normal(explore_seed, 2, m, i);
                    }
                }
            }
            // The terminal states are theta-independent; targets can be
            // computed before the gradient pass.
            const std::vector<MatrixXd> x_path =
                integrate_x_path(prob.dynamics, grid.tau, data.x_start, data.dw);
            VectorXd target;
            if (use_pool) {
                VectorXd c(cfg.batch_size);
                for (int m = 0; m < cfg.batch_size; ++m) c[m] = pool_c[pool_idx[m]];
                target = target_from_constants(prob, k, *w_prev, batch.obs, x_path.back(), c);
            } else {
                target = build_target(prob, k, w_prev, batch.obs, x_path.back(), cfg.train_quad);
            }
            const LossGradients g = loss_gradient(result.nets, prob, grid, data, target);
            if (!std::isfinite(g.value)) {
                throw NumericalError("train_step_k: divergent loss at step " + std::to_string(k));
            }
            epoch_loss += g.value;
            adam_step(result.nets.w, g.w, w_adam);
            for (int n = 0; n < grid.substeps; ++n) {
                adam_step(result.nets.v[n], g.v[n], v_adam[n]);
            }
            if (use_ema) {
                ema_mlp(ema.w, result.nets.w, cfg.param_ema);
                for (int n = 0; n < grid.substeps; ++n) {
                    ema_mlp(ema.v[n], result.nets.v[n], cfg.param_ema);
                }
                ++ema_steps;
            }
        }
        epoch_loss /= cfg.batches_per_epoch;
        result.epoch_losses.push_back(epoch_loss);
        if (epoch_loss < best_loss) {
            best_loss = epoch_loss;
            if (use_ema) {
                // Bias-corrected average (the accumulator starts at zero).
                best = ema;
                const double corr = 1.0 / (1.0 - std::pow(cfg.param_ema, ema_steps));
                scale_mlp(best.w, corr);
                for (MlpParams& vp : best.v) scale_mlp(vp, corr);
            } else {
                best = result.nets;
            }
            stale_epochs = 0;
        } else {
            ++stale_epochs;
            if (stale_epochs >= cfg.patience) break;
        }
    }
    result.nets = best;
    return result;
}

TrainedFilter train_filter(const FilterProblem& prob, const TimeGrid& grid, const TrainConfig& cfg,
                           const std::string* checkpoint_dir) {
    TrainedFilter tf;
    tf.problem = prob;
    tf.grid = grid;
    tf.quad = cfg.train_quad;
    tf.config = cfg;
    tf.prior_mean = prob.prior_mean;
    tf.prior_std = prob.prior_std;

    int start_k = 0;
    if (checkpoint_dir && std::filesystem::exists(*checkpoint_dir + "/manifest.json")) {
        TrainedFilter partial = load_filter(*checkpoint_dir);
        if (partial.grid.num_obs != grid.num_obs || partial.grid.substeps != grid.substeps) {
            throw ArtifactError("checkpoint grid does not match the requested grid");
        }
        tf = std::move(partial);
        start_k = static_cast<int>(tf.steps.size());
    }

    for (int k = start_k; k < grid.num_obs; ++k) {
        const MlpParams* w_prev = k > 0 ? &tf.steps[k - 1].w : nullptr;
        const StepNetworks* warm =
            (cfg.warm_start && k > 0) ? &tf.steps[k - 1] : nullptr;
        StepTrainResult res = train_step_k(prob, grid, k, w_prev, cfg, warm);
        tf.steps.push_back(std::move(res.nets));
        tf.loss_history.push_back(std::move(res.epoch_losses));
        if (checkpoint_dir) save_filter(tf, *checkpoint_dir);
    }
    return tf;
}

namespace {

void check_density_step(const TrainedFilter& tf, int k) {
    if (k < 1 || k > static_cast<int>(tf.steps.size())) {
        throw std::invalid_argument("filter_density: k must be in 1..K");
    }
}

}  // namespace

VectorXd filter_density_grid(const TrainedFilter& tf, int k, const Eigen::RowVectorXd& obs_row,
                             const VectorXd& x_pts, bool normalized) {
    check_density_step(tf, k);
    const int dp = tf.problem.observation.obs_dim;
    const int K = tf.problem.num_obs;
    const MlpParams& w = tf.steps[k - 1].w;

    const VectorXd obs_pad = pad_observations_row(obs_row, k - 1, K, dp);
    const VectorXd o_k = obs_row.segment(static_cast<Eigen::Index>(k - 1) * dp, dp).transpose();

    auto density_at = [&](const VectorXd& pts) {
        MatrixXd input(w.spec.input_dim, pts.size());
        input.row(0) = pts.transpose();
        input.bottomRows(obs_pad.size()).colwise() = obs_pad;
        const MatrixXd wv = forward_batch(w, input);
        VectorXd out(pts.size());
        VectorXd x(1);
        for (Eigen::Index i = 0; i < pts.size(); ++i) {
            x[0] = pts[i];
            out[i] = wv(0, i) *
                     std::max(tf.problem.observation.likelihood(o_k, x), kLikelihoodFloor);
        }
        return out;
    };

    VectorXd dens = density_at(x_pts);
    if (normalized) {
        const double c = normalize_values(density_at(tf.quad.all_points()), tf.quad);
        dens /= c;
    }
    return dens;
}

double filter_density(const TrainedFilter& tf, int k, const VectorXd& x, const MatrixXd& obs_rows,
                      int sample, bool normalized) {
    if (tf.problem.dynamics.dim != 1) {
        throw ConfigError("filter_density: grid evaluation implemented for d = 1 only");
    }
    VectorXd pts(1);
    pts[0] = x[0];
    return filter_density_grid(tf, k, obs_rows.row(sample), pts, normalized)[0];
}

void save_filter(const TrainedFilter& tf, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "bsdefilter/1";
    manifest["problem"] = tf.problem.name;
    manifest["horizon"] = tf.grid.horizon;
    manifest["num_obs"] = tf.grid.num_obs;
    manifest["substeps"] = tf.grid.substeps;
    manifest["tau"] = tf.grid.tau;
    manifest["prior_mean"] = tf.prior_mean;
    manifest["prior_std"] = tf.prior_std;
    manifest["quad"] = {{"lo", tf.quad.lo}, {"hi", tf.quad.hi}, {"points", tf.quad.points}};
    manifest["config"] = {{"batch_size", tf.config.batch_size},
                          {"batches_per_epoch", tf.config.batches_per_epoch},
                          {"max_epochs", tf.config.max_epochs},
                          {"patience", tf.config.patience},
                          {"learning_rate", tf.config.learning_rate},
                          {"lr_decay", tf.config.lr_decay},
                          {"explore_frac", tf.config.explore_frac},
                          {"explore_spread", tf.config.explore_spread},
                          {"pretrain_steps", tf.config.pretrain_steps},
                          {"later_epochs", tf.config.later_epochs},
                          {"later_lr", tf.config.later_lr},
                          {"obs_pool", tf.config.obs_pool},
                          {"param_ema", tf.config.param_ema},
                          {"seed", tf.config.seed},
                          {"warm_start", tf.config.warm_start},
                          {"train_quad", {{"lo", tf.config.train_quad.lo},
                                          {"hi", tf.config.train_quad.hi},
                                          {"points", tf.config.train_quad.points}}}};
    manifest["trained_steps"] = tf.steps.size();
    manifest["loss_history"] = tf.loss_history;

    char name[64];
    for (std::size_t k = 0; k < tf.steps.size(); ++k) {
        std::snprintf(name, sizeof(name), "/w_%03zu.net", k);
        save_params(tf.steps[k].w, dir + name);
        for (std::size_t n = 0; n < tf.steps[k].v.size(); ++n) {
            std::snprintf(name, sizeof(name), "/v_%03zu_%03zu.net", k, n);
            save_params(tf.steps[k].v[n], dir + name);
        }
    }
    std::ofstream f(dir + "/manifest.json");
    if (!f) throw ArtifactError("cannot write manifest in " + dir);
    f << manifest.dump(2) << "\n";
}

TrainedFilter load_filter(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw ArtifactError("missing manifest: " + dir);
    nlohmann::json manifest;
    f >> manifest;
    if (manifest.value("format", "") != "bsdefilter/1") {
        throw ArtifactError("unsupported filter manifest format");
    }

    TrainedFilter tf;
    tf.prior_mean = manifest["prior_mean"].get<double>();
    tf.prior_std = manifest["prior_std"].get<double>();
    const std::string problem = manifest["problem"].get<std::string>();
    const double T = manifest["horizon"].get<double>();
    const int K = manifest["num_obs"].get<int>();
    if (problem == "ou") {
        tf.problem = make_ou_problem(T, K, tf.prior_mean, tf.prior_std);
    } else if (problem == "bistable") {
        tf.problem = make_bistable_problem(T, K, tf.prior_mean, tf.prior_std);
    } else {
        throw ArtifactError("unknown problem in manifest: " + problem);
    }
    tf.grid = TimeGrid(T, K, manifest["substeps"].get<int>());
    tf.quad = QuadratureGrid{manifest["quad"]["lo"].get<double>(),
                             manifest["quad"]["hi"].get<double>(),
                             manifest["quad"]["points"].get<int>()};
    const auto& cfg = manifest["config"];
    tf.config.batch_size = cfg["batch_size"].get<int>();
    tf.config.batches_per_epoch = cfg["batches_per_epoch"].get<int>();
    tf.config.max_epochs = cfg["max_epochs"].get<int>();
    tf.config.patience = cfg["patience"].get<int>();
    tf.config.learning_rate = cfg["learning_rate"].get<double>();
    tf.config.lr_decay = cfg.value("lr_decay", 1.0);
    tf.config.explore_frac = cfg.value("explore_frac", 0.0);
    tf.config.explore_spread = cfg.value("explore_spread", 2.5);
    tf.config.pretrain_steps = cfg.value("pretrain_steps", 0);
    tf.config.later_epochs = cfg.value("later_epochs", 0);
    tf.config.later_lr = cfg.value("later_lr", 0.0);
    tf.config.obs_pool = cfg.value("obs_pool", 0);
    tf.config.param_ema = cfg.value("param_ema", 0.0);
    tf.config.seed = cfg["seed"].get<std::uint64_t>();
    tf.config.warm_start = cfg["warm_start"].get<bool>();
    tf.config.train_quad = QuadratureGrid{cfg["train_quad"]["lo"].get<double>(),
                                          cfg["train_quad"]["hi"].get<double>(),
                                          cfg["train_quad"]["points"].get<int>()};
    tf.loss_history = manifest["loss_history"].get<std::vector<std::vector<double>>>();

    const auto steps = manifest["trained_steps"].get<std::size_t>();
    char name[64];
    for (std::size_t k = 0; k < steps; ++k) {
        StepNetworks nets;
        nets.step_index = static_cast<int>(k);
        std::snprintf(name, sizeof(name), "/w_%03zu.net", k);
        nets.w = load_params(dir + name);
        for (int n = 0; n < tf.grid.substeps; ++n) {
            std::snprintf(name, sizeof(name), "/v_%03zu_%03d.net", k, n);
            nets.v.push_back(load_params(dir + name));
        }
        tf.steps.push_back(std::move(nets));
    }
    return tf;
}

}  // namespace bsdef

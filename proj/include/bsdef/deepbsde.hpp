#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bsdef/grid.hpp"
#include "bsdef/model.hpp"
#include "bsdef/net.hpp"
#include "bsdef/sim.hpp"

namespace bsdef {

// Networks of one minimization problem k: the density head w and the N
// gradient controls v_0..v_{N-1}.
struct StepNetworks {
    int step_index = 0;
    MlpParams w;
    std::vector<MlpParams> v;
};

struct TrainConfig {
    int batch_size = 512;
    int batches_per_epoch = 200;
    int max_epochs = 100;
    int patience = 5;
    double learning_rate = 1e-4;
    // Per-epoch multiplicative decay of the Adam step size (1.0 = constant).
    double lr_decay = 1.0;
    std::uint64_t seed = 0;
    bool warm_start = true;
    // Fraction of each batch whose interval start states and observation
    // inputs are redrawn from N(prior_mean, explore_spread^2) instead of the
    // model law. Targets are pointwise functions of (x, o), so this leaves
    // the minimizer unchanged and only reweights the regression toward the
    // tail regions that the sup-norm error reports probe; the model law
    // alone places almost no samples there.
    double explore_frac = 0.0;
    double explore_spread = 2.5;
    // Adam steps of supervised log-space fitting of freshly initialized
    // density heads to log pi_0 before BSDE training (0 = flat-start
    // initialization). Plain MSE training cannot shape the density tails
    // (its log-space gradient vanishes with the density value), so the
    // tails must start correct.
    int pretrain_steps = 0;
    // Optional shorter schedule for warm-started steps k >= 1, which begin
    // at the previous step's optimum and only need to absorb one new
    // observation coordinate. 0 keeps max_epochs / learning_rate.
    int later_epochs = 0;
    double later_lr = 0.0;
    // Size of the per-step pool of observation sequences whose target
    // normalization constants C^(m) are quadrature-integrated once up front;
    // batches then draw observation rows from the pool (with fresh start
    // states and Brownian increments). The quadrature otherwise dominates
    // the cost of every step k >= 1. 0 = fresh observations every batch.
    int obs_pool = 0;
    // Per-step exponential moving average of the parameters (Polyak-style
    // iterate averaging); the averaged parameters are what training returns.
    // Averaging over ~1/(1-decay) Adam steps shrinks the stochastic
    // optimization noise floor by roughly its square root. 0 disables.
    double param_ema = 0.0;
    // Grid for the per-sample normalization constants C^(m) of the targets.
    QuadratureGrid train_quad{-5.0, 5.0, 1000};
};

struct TrainedFilter {
    FilterProblem problem;
    TimeGrid grid{1.0, 10, 1};
    QuadratureGrid quad{-5.0, 5.0, 1000};  // inference-time normalization
    std::vector<StepNetworks> steps;       // k = 0..K-1
    std::vector<std::vector<double>> loss_history;
    TrainConfig config;
    double prior_mean = 0.0;  // recorded for persistence
    double prior_std = 1.0;
};

// Batch data restricted to observation interval k, in network layout
// (columns = samples).
struct IntervalData {
    MatrixXd x_start;          // d x M, the auxiliary state at t_k
    MatrixXd obs_input;        // (K-1)d' x M, pad(o_{1:k})
    std::vector<MatrixXd> dw;  // N entries, d x M
};

// Integrates the stored auxiliary increments through intervals 0..k-1 and
// slices interval k.
IntervalData slice_interval(const FilterProblem& prob, const TimeGrid& grid,
                            const TrajectoryBatch& batch, int k);

struct RolloutResult {
    VectorXd y_terminal;            // M
    std::vector<MatrixXd> x_path;   // N+1 entries, d x M
};

// Forward pass of the discrete (X, Y) system on interval k:
//   Y_0 = w(X_0, o),  Y_{n+1} = Y_n - f~(X_n, Y_n, v_n) tau + v_n . sigma dW_n.
RolloutResult rollout(const StepNetworks& nets, const FilterProblem& prob, const TimeGrid& grid,
                      const IntervalData& data);
RolloutResult rollout(const StepNetworks& nets, const FilterProblem& prob, const TimeGrid& grid,
                      const TrajectoryBatch& batch, int k);

using TargetFn = std::function<double(const VectorXd& x_terminal, int sample)>;

// Mean squared terminal mismatch (1/M) sum |Y_N - g(X_N)|^2.
double loss(const StepNetworks& nets, const FilterProblem& prob, const TimeGrid& grid,
            const IntervalData& data, const TargetFn& target);

struct LossGradients {
    double value = 0.0;
    MlpGradients w;
    std::vector<MlpGradients> v;
};

// Exact reverse-mode gradient of `loss` with respect to every parameter of
// w and all v_n (the Y-cotangent accumulates the factor 1 - tau df/du per
// substep).
LossGradients loss_gradient(const StepNetworks& nets, const FilterProblem& prob,
                            const TimeGrid& grid, const IntervalData& data,
                            const VectorXd& target_values);

// Training targets g_k at the terminal states: pi_0 for k = 0, otherwise
// w*_{k-1}(x, o_{1:k-1}) L(o_k, x) / C^(m) with the per-sample quadrature
// constant C^(m).
VectorXd build_target(const FilterProblem& prob, int k, const MlpParams* w_prev,
                      const MatrixXd& obs_rows, const MatrixXd& x_terminal,
                      const QuadratureGrid& quad);

struct StepTrainResult {
    StepNetworks nets;
    std::vector<double> epoch_losses;
};

// One sequential minimization problem: Adam on fresh data every epoch,
// early stopping on the epoch-averaged loss, best-epoch parameters kept.
StepTrainResult train_step_k(const FilterProblem& prob, const TimeGrid& grid, int k,
                             const MlpParams* w_prev, const TrainConfig& cfg,
                             const StepNetworks* warm_start);

// Full sequential training k = 0..K-1. If checkpoint_dir is given, each
// finished step is persisted there and an interrupted run resumes after the
// last completed step.
TrainedFilter train_filter(const FilterProblem& prob, const TimeGrid& grid, const TrainConfig& cfg,
                           const std::string* checkpoint_dir = nullptr);

// p_hat_k(x, o_{1:k}) = w*_{k-1}(x, o_{1:k-1}) L(o_k, x), k = 1..K,
// optionally normalized on tf.quad.
double filter_density(const TrainedFilter& tf, int k, const VectorXd& x,
                      const MatrixXd& obs_rows, int sample, bool normalized);
VectorXd filter_density_grid(const TrainedFilter& tf, int k, const Eigen::RowVectorXd& obs_row,
                             const VectorXd& x_pts, bool normalized);

void save_filter(const TrainedFilter& tf, const std::string& dir);
TrainedFilter load_filter(const std::string& dir);

}  // namespace bsdef

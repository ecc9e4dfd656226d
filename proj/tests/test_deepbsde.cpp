#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "bsdef/deepbsde.hpp"
#include "bsdef/errors.hpp"
#include "bsdef/rng.hpp"

using namespace bsdef;

namespace {

// Zero-drift unit-diffusion problem: the driver vanishes identically.
FilterProblem make_driftless_problem(int K) {
    FilterProblem p = make_ou_problem(1.0, K);
    p.name = "driftless";
    p.dynamics.mu = [](const VectorXd& x) { return VectorXd(VectorXd::Zero(x.size())); };
    p.dynamics.div_mu = [](const VectorXd&) { return 0.0; };
    p.dynamics.mu_cols = [](const MatrixXd& x) { return MatrixXd(MatrixXd::Zero(x.rows(), x.cols())); };
    p.dynamics.driver_coeffs_cols = [](const MatrixXd& x, VectorXd& cu, MatrixXd& cv) {
        cu = VectorXd::Zero(x.cols());
        cv = MatrixXd::Zero(x.rows(), x.cols());
    };
    return p;
}

int input_dim(const FilterProblem& p) {
    return p.dynamics.dim + (p.num_obs - 1) * p.observation.obs_dim;
}

MlpParams zeroed(MlpParams p) {
    for (auto& w : p.weights) w.setZero();
    for (auto& b : p.biases) b.setZero();
    return p;
}

// Hidden biases init to zero; a fully saturated previous layer then puts a
// ReLU preactivation exactly at its kink, where central differences disagree
// with the (zero) subgradient. Nudge biases so FD probes differentiable points.
MlpParams debiased(MlpParams p, std::uint64_t seed) {
    for (std::size_t l = 0; l + 1 < p.biases.size(); ++l) {
        for (Eigen::Index i = 0; i < p.biases[l].size(); ++i) {
            p.biases[l][i] = 0.1 * (2.0 * rng::uniform(seed, 77, l, i) - 1.0);
        }
    }
    return p;
}

// Small networks for fast tests; only the input dimension is contractual.
StepNetworks tiny_nets(const FilterProblem& p, int N, std::uint64_t seed, int k = 0) {
    const int in = input_dim(p);
    StepNetworks nets;
    nets.step_index = k;
    nets.w = debiased(init_mlp(MlpSpec{in, 4, 2, 1, OutputActivation::Exponential},
                               rng::key(seed, 1), 0.3, 0.1),
                      rng::key(seed, 3));
    for (int n = 0; n < N; ++n) {
        nets.v.push_back(debiased(init_mlp(MlpSpec{in, 4, 2, p.dynamics.dim,
                                                   OutputActivation::None},
                                           rng::key(seed, 2, n), 0.3, 0.05),
                                  rng::key(seed, 4, n)));
    }
    return nets;
}

std::string bytes_of(const TrainedFilter& tf) {
    std::string all;
    for (const StepNetworks& s : tf.steps) {
        const auto wb = serialize(s.w);
        all.append(wb.begin(), wb.end());
        for (const MlpParams& v : s.v) {
            const auto vb = serialize(v);
            all.append(vb.begin(), vb.end());
        }
    }
    return all;
}

// Max relative mismatch between loss_gradient and central finite differences
// over every parameter of one randomized tiny instance.
double gradient_fd_mismatch(const FilterProblem& prob, int N, int k, std::uint64_t seed) {
    const TimeGrid grid(prob.horizon, prob.num_obs, N);
    const int M = 4;
    const TrajectoryBatch batch = simulate_observations(prob, grid, M, rng::key(seed, 7));
    const IntervalData data = slice_interval(prob, grid, batch, k);

    StepNetworks nets = tiny_nets(prob, N, seed, k);

    // theta-independent targets (fixed before differentiation).
    MlpParams w_prev = init_mlp(MlpSpec{input_dim(prob), 4, 2, 1, OutputActivation::Exponential},
                                rng::key(seed, 9), 0.3, 0.0);
    MatrixXd x_term;
    {
        const RolloutResult r = rollout(nets, prob, grid, data);
        x_term = r.x_path.back();
    }
    const VectorXd target = build_target(prob, k, k > 0 ? &w_prev : nullptr, batch.obs, x_term,
                                         QuadratureGrid{-5.0, 5.0, 64});
    const TargetFn target_fn = [&target](const VectorXd&, int sample) { return target[sample]; };

    const LossGradients g = loss_gradient(nets, prob, grid, data, target);
    CHECK(g.value == doctest::Approx(loss(nets, prob, grid, data, target_fn)).epsilon(1e-12));

    const double h = 1e-6;
    double worst = 0.0;
    auto probe = [&](double& theta, double analytic) {
        const double saved = theta;
        theta = saved + h;
        const double up = loss(nets, prob, grid, data, target_fn);
        theta = saved - h;
        const double down = loss(nets, prob, grid, data, target_fn);
        theta = saved;
        const double fd = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(fd - analytic) / std::max(std::abs(fd), 1e-4));
    };
    auto probe_net = [&](MlpParams& p, const MlpGradients& pg) {
        for (std::size_t l = 0; l < p.weights.size(); ++l) {
            for (Eigen::Index i = 0; i < p.weights[l].size(); ++i) {
                probe(p.weights[l].data()[i], pg.weights[l].data()[i]);
            }
            for (Eigen::Index i = 0; i < p.biases[l].size(); ++i) {
                probe(p.biases[l][i], pg.biases[l][i]);
            }
        }
    };
    probe_net(nets.w, g.w);
    for (int n = 0; n < N; ++n) probe_net(nets.v[n], g.v[n]);
    return worst;
}

TrainConfig tiny_train_config(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.batch_size = 32;
    cfg.batches_per_epoch = 5;
    cfg.max_epochs = 2;
    cfg.patience = 2;
    cfg.learning_rate = 1e-3;
    cfg.seed = seed;
    cfg.train_quad = QuadratureGrid{-5.0, 5.0, 64};
    return cfg;
}

}  // namespace

TEST_CASE("slice_interval integrates the auxiliary path prefix") {
    const FilterProblem prob = make_ou_problem(1.0, 3);
    const TimeGrid grid(1.0, 3, 2);
    const TrajectoryBatch batch = simulate_observations(prob, grid, 5, 4);

    const IntervalData d0 = slice_interval(prob, grid, batch, 0);
    CHECK((d0.x_start - batch.x0.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(d0.obs_input.isZero(0.0));
    REQUIRE(d0.dw.size() == 2);

    const IntervalData d2 = slice_interval(prob, grid, batch, 2);
    for (int s = 0; s < 5; ++s) {
        std::vector<VectorXd> incr;
        for (int c = 0; c < 4; ++c) incr.push_back(batch.dw.row(s).segment(c, 1).transpose());
        const auto path = euler_maruyama_path(prob.dynamics, batch.x0.row(s).transpose(), incr,
                                              grid.tau);
        CHECK(d2.x_start(0, s) == doctest::Approx(path.back()[0]).epsilon(1e-12));
        // First two observations enter the padded input; the rest stays zero.
        CHECK(d2.obs_input(0, s) == doctest::Approx(batch.obs(s, 0)));
        CHECK(d2.obs_input(1, s) == doctest::Approx(batch.obs(s, 1)));
    }
    CHECK_THROWS_AS((void)slice_interval(prob, grid, batch, 3), std::invalid_argument);
}

TEST_CASE("rollout with vanishing driver and controls returns w(X0)") {
    const FilterProblem prob = make_driftless_problem(3);
    const TimeGrid grid(1.0, 3, 2);
    const TrajectoryBatch batch = simulate_observations(prob, grid, 6, 8);

    StepNetworks nets = tiny_nets(prob, 2, 15);
    for (auto& v : nets.v) v = zeroed(v);

    const IntervalData data = slice_interval(prob, grid, batch, 1);
    const RolloutResult res = rollout(nets, prob, grid, data);
    const MatrixXd w0 = forward_batch(nets.w, [&] {
        MatrixXd in(input_dim(prob), 6);
        in.topRows(1) = data.x_start;
        in.bottomRows(2) = data.obs_input;
        return in;
    }());
    CHECK((res.y_terminal.transpose() - w0.row(0)).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("single-substep rollout matches the hand formula") {
    const FilterProblem prob = make_ou_problem(1.0, 3);
    const TimeGrid grid(1.0, 3, 1);
    const TrajectoryBatch batch = simulate_observations(prob, grid, 4, 9);

    const double c = 0.7;
    StepNetworks nets = tiny_nets(prob, 1, 16);
    nets.v[0] = zeroed(nets.v[0]);
    nets.v[0].biases.back()[0] = c;

    const IntervalData data = slice_interval(prob, grid, batch, 0);
    const RolloutResult res = rollout(nets, prob, grid, data);
    for (int s = 0; s < 4; ++s) {
        MatrixXd in(input_dim(prob), 1);
        in(0, 0) = data.x_start(0, s);
        in.bottomRows(2).setZero();
        const double w = forward_batch(nets.w, in)(0, 0);
        const double f = driver_f_tilde(prob.dynamics, data.x_start.col(s), w,
                                        VectorXd::Constant(1, c));
        const double expect = w - f * grid.tau + c * data.dw[0](0, s);
        CHECK(res.y_terminal[s] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("OU rollout with unit w and zero controls is (1 - tau)^N") {
    const FilterProblem prob = make_ou_problem(1.0, 2);
    for (int N : {1, 2, 5}) {
        const TimeGrid grid(1.0, 2, N);
        const TrajectoryBatch batch = simulate_observations(prob, grid, 3, 21);
        StepNetworks nets = tiny_nets(prob, N, 22);
        nets.w = zeroed(nets.w);  // exponential head: w = exp(0) = 1
        for (auto& v : nets.v) v = zeroed(v);
        const RolloutResult res = rollout(nets, prob, grid, batch, 0);
        for (int s = 0; s < 3; ++s) {
            CHECK(res.y_terminal[s] ==
                  doctest::Approx(std::pow(1.0 - grid.tau, N)).epsilon(1e-12));
        }
    }
}

TEST_CASE("loss vanishes for an exactly represented constant target") {
    const FilterProblem prob = make_driftless_problem(2);
    const TimeGrid grid(1.0, 2, 2);
    const TrajectoryBatch batch = simulate_observations(prob, grid, 8, 30);
    const double c = 1.7;

    StepNetworks nets = tiny_nets(prob, 2, 31);
    nets.w = zeroed(nets.w);
    nets.w.biases.back()[0] = std::log(c);
    for (auto& v : nets.v) v = zeroed(v);

    const IntervalData data = slice_interval(prob, grid, batch, 0);
    CHECK(loss(nets, prob, grid, data, [&](const VectorXd&, int) { return c; }) ==
          doctest::Approx(0.0).epsilon(1e-14));

    // Quadratic response with curvature 2 to a bias shift of a linear head.
    StepNetworks lin = nets;
    lin.w.spec.output_activation = OutputActivation::None;
    lin.w.biases.back()[0] = c;
    const double delta = 1e-3;
    lin.w.biases.back()[0] = c + delta;
    const double up = loss(lin, prob, grid, data, [&](const VectorXd&, int) { return c; });
    lin.w.biases.back()[0] = c - delta;
    const double down = loss(lin, prob, grid, data, [&](const VectorXd&, int) { return c; });
    CHECK((up + down) / (delta * delta) == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("loss_gradient matches finite differences on randomized tiny instances") {
    int instance = 0;
    for (const FilterProblem& prob : {make_ou_problem(1.0, 3), make_bistable_problem(1.0, 3)}) {
        for (int N : {1, 2, 3}) {
            for (int k : {0, 2}) {
                const double worst = gradient_fd_mismatch(prob, N, k, 1000 + instance);
                CAPTURE(prob.name);
                CAPTURE(N);
                CAPTURE(k);
                CHECK(worst <= 1e-4);
                ++instance;
            }
        }
    }
    CHECK(instance == 12);
}

TEST_CASE("build_target: prior at step zero") {
    const FilterProblem prob = make_ou_problem(1.0, 3);
    MatrixXd x_term = MatrixXd::Zero(1, 2);
    x_term(0, 1) = 1.0;
    const VectorXd t = build_target(prob, 0, nullptr, MatrixXd::Zero(2, 3), x_term,
                                    QuadratureGrid{-5.0, 5.0, 1000});
    CHECK(t[0] == doctest::Approx(0.3989422804).epsilon(1e-9));
    CHECK(t[1] == doctest::Approx(0.2419707245).epsilon(1e-9));
}

TEST_CASE("build_target: flat previous optimum reduces to the normalized likelihood") {
    const FilterProblem prob = make_ou_problem(1.0, 3);
    MlpParams w_prev = zeroed(init_mlp(
        MlpSpec{input_dim(prob), 4, 2, 1, OutputActivation::Exponential}, 3));  // w == 1
    MatrixXd obs = MatrixXd::Zero(1, 3);  // o_1 = 0
    MatrixXd x_term = MatrixXd::Zero(1, 1);
    const VectorXd t = build_target(prob, 1, &w_prev, obs, x_term,
                                    QuadratureGrid{-5.0, 5.0, 1000});
    CHECK(t[0] == doctest::Approx(0.39894).epsilon(1e-4));
}

TEST_CASE("build_target is invariant to scaling the previous optimum") {
    const FilterProblem prob = make_ou_problem(1.0, 3);
    MlpParams w_prev = init_mlp(MlpSpec{input_dim(prob), 4, 2, 1, OutputActivation::Exponential},
                                5, 0.3, 0.0);
    MatrixXd obs = MatrixXd::Random(3, 3);
    MatrixXd x_term = MatrixXd::Random(1, 3);
    const QuadratureGrid quad{-5.0, 5.0, 200};
    const VectorXd a = build_target(prob, 2, &w_prev, obs, x_term, quad);
    w_prev.biases.back().array() += std::log(3.7);  // scales w by 3.7
    const VectorXd b = build_target(prob, 2, &w_prev, obs, x_term, quad);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12 * a.cwiseAbs().maxCoeff());
}

TEST_CASE("build_target rejects observations whose support misses the grid") {
    const FilterProblem prob = make_ou_problem(1.0, 3);
    MlpParams w_prev = zeroed(init_mlp(
        MlpSpec{input_dim(prob), 4, 2, 1, OutputActivation::Exponential}, 3));
    w_prev.biases.back()[0] = -100.0;  // clamped exponential head, w ~ 1e-27
    MatrixXd obs = MatrixXd::Zero(1, 3);
    obs(0, 0) = 1e6;
    CHECK_THROWS_AS((void)build_target(prob, 1, &w_prev, obs, MatrixXd::Zero(1, 1),
                                       QuadratureGrid{-5.0, 5.0, 100}),
                    NumericalError);
}

TEST_CASE("train_step_k with max_epochs = 0 returns the initialization") {
    const FilterProblem prob = make_ou_problem(1.0, 2);
    const TimeGrid grid(1.0, 2, 1);
    TrainConfig cfg = tiny_train_config(3);
    cfg.max_epochs = 0;
    const StepNetworks warm = tiny_nets(prob, 1, 44);
    const StepTrainResult res = train_step_k(prob, grid, 0, nullptr, cfg, &warm);
    CHECK(serialize(res.nets.w) == serialize(warm.w));
    CHECK(serialize(res.nets.v[0]) == serialize(warm.v[0]));
    CHECK(res.epoch_losses.empty());
}

TEST_CASE("training is deterministic and reduces the loss") {
    const FilterProblem prob = make_ou_problem(1.0, 1);  // K = 1: no observation inputs
    const TimeGrid grid(1.0, 1, 1);
    TrainConfig cfg = tiny_train_config(5);
    cfg.max_epochs = 4;
    cfg.patience = 4;
    const TrainedFilter a = train_filter(prob, grid, cfg);
    const TrainedFilter b = train_filter(prob, grid, cfg);
    CHECK(bytes_of(a) == bytes_of(b));
    REQUIRE(a.loss_history.size() == 1);
    REQUIRE(a.loss_history[0].size() >= 2);
    CHECK(a.loss_history[0].back() <= a.loss_history[0].front());
}

TEST_CASE("normalized filter density integrates to one and stays nonnegative") {
    const FilterProblem prob = make_ou_problem(1.0, 2);
    const TimeGrid grid(1.0, 2, 1);
    const TrainedFilter tf = train_filter(prob, grid, tiny_train_config(6));
    const TrajectoryBatch batch = simulate_observations(prob, grid, 2, 60);

    for (int k = 1; k <= 2; ++k) {
        const VectorXd dens =
            filter_density_grid(tf, k, batch.obs.row(0), tf.quad.all_points(), true);
        CHECK(dens.minCoeff() >= 0.0);
        CHECK(normalize_values(dens, tf.quad) == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK_THROWS_AS((void)filter_density_grid(tf, 0, batch.obs.row(0), tf.quad.all_points(), true),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)filter_density_grid(tf, 3, batch.obs.row(0), tf.quad.all_points(), true),
                    std::invalid_argument);

    // Unnormalized density is w * likelihood.
    const VectorXd x = tf.quad.all_points().segment(40, 1);
    const double d = filter_density(tf, 1, x, batch.obs, 0, false);
    CHECK(d >= 0.0);
}

TEST_CASE("trained filter persists, reloads, and resumes") {
    namespace fs = std::filesystem;
    const FilterProblem prob = make_ou_problem(1.0, 2);
    const TimeGrid grid(1.0, 2, 1);
    const TrainConfig cfg = tiny_train_config(7);

    const fs::path dir = fs::temp_directory_path() / "bsdef_filter_test";
    fs::remove_all(dir);
    const std::string dirs = dir.string();
    const TrainedFilter tf = train_filter(prob, grid, cfg, &dirs);

    const TrainedFilter loaded = load_filter(dirs);
    CHECK(bytes_of(loaded) == bytes_of(tf));
    CHECK(loaded.problem.name == "ou");
    CHECK(loaded.grid.substeps == 1);
    CHECK(loaded.quad.points == cfg.train_quad.points);
    CHECK(loaded.loss_history == tf.loss_history);

    // A complete checkpoint short-circuits retraining.
    const TrainedFilter again = train_filter(prob, grid, cfg, &dirs);
    CHECK(bytes_of(again) == bytes_of(tf));

    // A partial checkpoint resumes at the next step and reproduces the
    // one-shot result bit for bit.
    TrainedFilter partial = tf;
    partial.steps.resize(1);
    partial.loss_history.resize(1);
    const fs::path dir2 = fs::temp_directory_path() / "bsdef_filter_test_partial";
    fs::remove_all(dir2);
    const std::string dir2s = dir2.string();
    save_filter(partial, dir2s);
    const TrainedFilter resumed = train_filter(prob, grid, cfg, &dir2s);
    CHECK(bytes_of(resumed) == bytes_of(tf));

    // Grid mismatch against an existing checkpoint is an artifact error.
    CHECK_THROWS_AS((void)train_filter(prob, TimeGrid(1.0, 2, 2), cfg, &dirs), ArtifactError);
    CHECK_THROWS_AS((void)load_filter((dir / "nope").string()), ArtifactError);

    fs::remove_all(dir);
    fs::remove_all(dir2);
}

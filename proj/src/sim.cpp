#include "bsdef/sim.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "bsdef/errors.hpp"
#include "bsdef/rng.hpp"

namespace bsdef {

std::vector<VectorXd> euler_maruyama_path(const DynamicsModel& dyn, const VectorXd& x0,
                                          const std::vector<VectorXd>& increments, double tau) {
    if (increments.empty() || tau <= 0.0) {
        throw std::invalid_argument("euler_maruyama_path: need increments and tau > 0");
    }
    std::vector<VectorXd> path;
    path.reserve(increments.size() + 1);
    path.push_back(x0);
    VectorXd x = x0;
    for (std::size_t n = 0; n < increments.size(); ++n) {
        x = x + dyn.mu(x) * tau + dyn.sigma(x) * increments[n];
        if (!x.allFinite()) {
            throw NumericalError("euler_maruyama_path diverged at step " + std::to_string(n));
        }
        path.push_back(x);
    }
    return path;
}

TrajectoryBatch simulate_observations(const FilterProblem& prob, const TimeGrid& grid, int m,
                                      std::uint64_t seed) {
    if (m < 1) throw std::invalid_argument("simulate_observations: m >= 1 required");
    const int d = prob.dynamics.dim;
    const int dp = prob.observation.obs_dim;
    const int K = grid.num_obs;
    const int N = grid.substeps;
    const double sqrt_tau = std::sqrt(grid.tau);

    TrajectoryBatch batch;
    batch.seed = seed;
    batch.x0.resize(m, d);
    batch.dw.resize(m, K * N * d);
    batch.obs.resize(m, K * dp);

    const Eigen::LLT<MatrixXd> llt(prob.observation.noise_cov);
    const MatrixXd noise_chol = llt.matrixL();

    for (int s = 0; s < m; ++s) {
        batch.x0.row(s) = prob.prior_sample(seed, static_cast<std::uint64_t>(s)).transpose();
        for (int c = 0; c < K * N * d; ++c) {
            batch.dw(s, c) = sqrt_tau * rng::normal(seed, rng::kAuxIncrement, s, c);
        }
        // Latent state path on the fine grid, driven by the independent B.
        VectorXd state = prob.prior_sample(seed ^ 0x5bd1e995u, static_cast<std::uint64_t>(s));
        VectorXd db(d);
        for (int k = 0; k < K; ++k) {
            for (int n = 0; n < N; ++n) {
                for (int i = 0; i < d; ++i) {
                    db[i] = sqrt_tau * rng::normal(seed, rng::kStateIncrement, s, (k * N + n) * d + i);
                }
                state = state + prob.dynamics.mu(state) * grid.tau + prob.dynamics.sigma(state) * db;
                if (!state.allFinite()) {
                    throw NumericalError("simulate_observations: state diverged, sample " +
                                         std::to_string(s));
                }
            }
            VectorXd v(dp);
            for (int i = 0; i < dp; ++i) {
                v[i] = rng::normal(seed, rng::kObsNoise, s, k * dp + i);
            }
            batch.obs.row(s).segment(k * dp, dp) =
                (prob.observation.h(state) + noise_chol * v).transpose();
        }
    }
    return batch;
}

VectorXd pad_observations(const std::vector<VectorXd>& obs_prefix, int K) {
    const int k = static_cast<int>(obs_prefix.size());
    if (k > K - 1) throw std::invalid_argument("pad_observations: prefix longer than K-1");
    const int dp = k > 0 ? static_cast<int>(obs_prefix[0].size()) : 1;
    VectorXd out = VectorXd::Zero((K - 1) * dp);
    for (int i = 0; i < k; ++i) out.segment(i * dp, dp) = obs_prefix[i];
    return out;
}

VectorXd pad_observations_row(const Eigen::RowVectorXd& obs_row, int k, int K, int dp) {
    if (k > K - 1) throw std::invalid_argument("pad_observations_row: prefix longer than K-1");
    VectorXd out = VectorXd::Zero((K - 1) * dp);
    out.head(k * dp) = obs_row.head(k * dp).transpose();
    return out;
}

namespace {

constexpr char kBatchMagic[16] = {'B', 'S', 'D', 'E', 'B', 'A', 'T', 'C', 'H'};
constexpr std::uint64_t kBatchVersion = 1;

void write_u64(std::ofstream& f, std::uint64_t v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::ifstream& f) {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!f) throw ArtifactError("batch file truncated");
    return v;
}

void write_matrix(std::ofstream& f, const MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            const double v = m(r, c);
            f.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
    }
}

void read_matrix(std::ifstream& f, MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            double v = 0;
            f.read(reinterpret_cast<char*>(&v), sizeof(v));
            if (!f) throw ArtifactError("batch file truncated");
            m(r, c) = v;
        }
    }
}

}  // namespace

void save_batch(const TrajectoryBatch& batch, const TimeGrid& grid, int dim, int obs_dim,
                const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ArtifactError("cannot open for writing: " + path);
    f.write(kBatchMagic, sizeof(kBatchMagic));
    write_u64(f, kBatchVersion);
    write_u64(f, static_cast<std::uint64_t>(batch.samples()));
    write_u64(f, static_cast<std::uint64_t>(grid.num_obs));
    write_u64(f, static_cast<std::uint64_t>(grid.substeps));
    write_u64(f, static_cast<std::uint64_t>(dim));
    write_u64(f, static_cast<std::uint64_t>(obs_dim));
    write_u64(f, batch.seed);
    const double T = grid.horizon;
    f.write(reinterpret_cast<const char*>(&T), sizeof(T));
    write_matrix(f, batch.x0);
    write_matrix(f, batch.dw);
    write_matrix(f, batch.obs);
    if (!f) throw ArtifactError("write failed: " + path);
}

TrajectoryBatch load_batch(const std::string& path, TimeGrid* grid_out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArtifactError("cannot open: " + path);
    char magic[16] = {};
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kBatchMagic, sizeof(magic)) != 0) {
        throw ArtifactError("not a batch file: " + path);
    }
    if (read_u64(f) != kBatchVersion) throw ArtifactError("unsupported batch version");
    const auto m = static_cast<Eigen::Index>(read_u64(f));
    const int K = static_cast<int>(read_u64(f));
    const int N = static_cast<int>(read_u64(f));
    const int d = static_cast<int>(read_u64(f));
    const int dp = static_cast<int>(read_u64(f));
    const std::uint64_t seed = read_u64(f);
    double T = 0;
    f.read(reinterpret_cast<char*>(&T), sizeof(T));
    if (!f) throw ArtifactError("batch file truncated");
    if (grid_out) *grid_out = TimeGrid(T, K, N);

    TrajectoryBatch batch;
    batch.seed = seed;
    batch.x0.resize(m, d);
    batch.dw.resize(m, static_cast<Eigen::Index>(K) * N * d);
    batch.obs.resize(m, static_cast<Eigen::Index>(K) * dp);
    read_matrix(f, batch.x0);
    read_matrix(f, batch.dw);
    read_matrix(f, batch.obs);
    return batch;
}

}  // namespace bsdef

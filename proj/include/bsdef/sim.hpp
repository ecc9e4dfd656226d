#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bsdef/model.hpp"

namespace bsdef {

// Two-level time grid: K observation intervals, N Euler substeps each,
// uniform step tau = T / (K N).
struct TimeGrid {
    double horizon;
    int num_obs;   // K
    int substeps;  // N
    double tau;

    TimeGrid(double T, int K, int N)
        : horizon(T), num_obs(K), substeps(N), tau(T / (static_cast<double>(K) * N)) {}
};

// One Monte Carlo batch of the system (S, O, X, dW). Layouts (row = sample):
//   x0:  M x d
//   dw:  M x (K*N*d), increment n of interval k at columns [(k*N+n)*d, ...+d)
//   obs: M x (K*d'), observation k at columns [k*d', ...+d')
struct TrajectoryBatch {
    MatrixXd x0;
    MatrixXd dw;
    MatrixXd obs;
    std::uint64_t seed = 0;

    int samples() const { return static_cast<int>(x0.rows()); }
};

// Euler-Maruyama: x_{n+1} = x_n + mu(x_n) tau + sigma(x_n) dw_n.
// Returns the full path (increments.size() + 1 points, first = x0).
// Throws NumericalError naming the step index if the state leaves R^d.
std::vector<VectorXd> euler_maruyama_path(const DynamicsModel& dyn, const VectorXd& x0,
                                          const std::vector<VectorXd>& increments, double tau);

// Draws M independent samples: X0 ~ pi_0, fresh dW, and observations
// O_k = h(S_{t_k}) + V_k where S is an independent Euler-Maruyama path on
// the same fine grid. Fully determined by (prob, grid, m, seed).
TrajectoryBatch simulate_observations(const FilterProblem& prob, const TimeGrid& grid, int m,
                                      std::uint64_t seed);

// Fixed-width network input for the first k observations: o_1..o_k followed
// by zeros, total length (K-1)*d'.
VectorXd pad_observations(const std::vector<VectorXd>& obs_prefix, int K);

// Same, reading observation columns [0, k*dp) from a batch row.
VectorXd pad_observations_row(const Eigen::RowVectorXd& obs_row, int k, int K, int dp);

// Flat binary batch file (magic "BSDEBATCH", little-endian, 64-bit fields).
void save_batch(const TrajectoryBatch& batch, const TimeGrid& grid, int dim, int obs_dim,
                const std::string& path);
TrajectoryBatch load_batch(const std::string& path, TimeGrid* grid_out = nullptr);

}  // namespace bsdef

#pragma once

#include <functional>

#include <Eigen/Dense>

namespace bsdef {

// Equidistant 1-d quadrature/evaluation grid on [lo, hi].
struct QuadratureGrid {
    double lo = -5.0;
    double hi = 5.0;
    int points = 1000;  // J

    double dz() const { return (hi - lo) / (points - 1); }
    double point(int j) const { return lo + j * dz(); }
    Eigen::VectorXd all_points() const;
};

// Riemann sum over all J points: C = sum_j g(z_j) dz.
double normalize(const std::function<double(double)>& g, const QuadratureGrid& grid);
double normalize_values(const Eigen::VectorXd& values, const QuadratureGrid& grid);

Eigen::VectorXd eval_on_grid(const std::function<double(double)>& g, const QuadratureGrid& grid);

}  // namespace bsdef

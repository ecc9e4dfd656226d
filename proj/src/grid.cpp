#include "bsdef/grid.hpp"

#include <stdexcept>

#include "bsdef/errors.hpp"

namespace bsdef {

Eigen::VectorXd QuadratureGrid::all_points() const {
    if (points < 2) throw std::invalid_argument("QuadratureGrid: J >= 2 required");
    return Eigen::VectorXd::LinSpaced(points, lo, hi);
}

double normalize_values(const Eigen::VectorXd& values, const QuadratureGrid& grid) {
    if (values.size() != grid.points) {
        throw std::invalid_argument("normalize_values: size mismatch");
    }
    const double c = values.sum() * grid.dz();
    if (c == 0.0) throw NumericalError("normalize: zero mass on the quadrature grid");
    return c;
}

double normalize(const std::function<double(double)>& g, const QuadratureGrid& grid) {
    return normalize_values(eval_on_grid(g, grid), grid);
}

Eigen::VectorXd eval_on_grid(const std::function<double(double)>& g, const QuadratureGrid& grid) {
    Eigen::VectorXd out(grid.points);
    for (int j = 0; j < grid.points; ++j) out[j] = g(grid.point(j));
    return out;
}

}  // namespace bsdef

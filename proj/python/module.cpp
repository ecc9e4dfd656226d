#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "bsdef/config.hpp"
#include "bsdef/errors.hpp"
#include "bsdef/eval.hpp"

namespace py = pybind11;
using namespace bsdef;

namespace {

FilterProblem problem_by_name(const std::string& name, double T, int K, double prior_mean,
                              double prior_std) {
    if (name == "ou") return make_ou_problem(T, K, prior_mean, prior_std);
    if (name == "bistable") return make_bistable_problem(T, K, prior_mean, prior_std);
    throw ConfigError("unknown problem: " + name);
}

}  // namespace

PYBIND11_MODULE(_bsdefilter, m) {
    m.doc() = "Deep BSDE nonlinear filter: core operations";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<NumericalError>(m, "NumericalError");
    py::register_exception<ArtifactError>(m, "ArtifactError");

    py::class_<TimeGrid>(m, "TimeGrid")
        .def(py::init<double, int, int>(), py::arg("horizon"), py::arg("num_obs"),
             py::arg("substeps"))
        .def_readonly("horizon", &TimeGrid::horizon)
        .def_readonly("num_obs", &TimeGrid::num_obs)
        .def_readonly("substeps", &TimeGrid::substeps)
        .def_readonly("tau", &TimeGrid::tau);

    py::class_<QuadratureGrid>(m, "QuadratureGrid")
        .def(py::init([](double lo, double hi, int points) {
                 return QuadratureGrid{lo, hi, points};
             }),
             py::arg("lo") = -5.0, py::arg("hi") = 5.0, py::arg("points") = 1000)
        .def_readonly("lo", &QuadratureGrid::lo)
        .def_readonly("hi", &QuadratureGrid::hi)
        .def_readonly("points", &QuadratureGrid::points)
        .def("all_points", &QuadratureGrid::all_points);

    py::class_<FilterProblem>(m, "FilterProblem")
        .def_readonly("name", &FilterProblem::name)
        .def_readonly("horizon", &FilterProblem::horizon)
        .def_readonly("num_obs", &FilterProblem::num_obs)
        .def("prior", [](const FilterProblem& p, const VectorXd& x) { return p.prior(x); })
        .def("likelihood",
             [](const FilterProblem& p, const VectorXd& o, const VectorXd& x) {
                 return p.observation.likelihood(o, x);
             })
        .def("driver_f_tilde",
             [](const FilterProblem& p, const VectorXd& x, double u, const VectorXd& v) {
                 return driver_f_tilde(p.dynamics, x, u, v);
             });

    m.def("make_problem", &problem_by_name, py::arg("name"), py::arg("horizon") = 1.0,
          py::arg("num_obs") = 10, py::arg("prior_mean") = 0.0, py::arg("prior_std") = 1.0);

    py::class_<TrajectoryBatch>(m, "TrajectoryBatch")
        .def_readonly("x0", &TrajectoryBatch::x0)
        .def_readonly("dw", &TrajectoryBatch::dw)
        .def_readonly("obs", &TrajectoryBatch::obs)
        .def_readonly("seed", &TrajectoryBatch::seed);

    m.def("simulate_observations", &simulate_observations, py::arg("problem"), py::arg("grid"),
          py::arg("samples"), py::arg("seed"));

    m.def(
        "normalize",
        [](const std::function<double(double)>& g, const QuadratureGrid& grid) {
            return normalize(g, grid);
        },
        py::arg("g"), py::arg("grid"));

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("batches_per_epoch", &TrainConfig::batches_per_epoch)
        .def_readwrite("max_epochs", &TrainConfig::max_epochs)
        .def_readwrite("patience", &TrainConfig::patience)
        .def_readwrite("learning_rate", &TrainConfig::learning_rate)
        .def_readwrite("lr_decay", &TrainConfig::lr_decay)
        .def_readwrite("explore_frac", &TrainConfig::explore_frac)
        .def_readwrite("explore_spread", &TrainConfig::explore_spread)
        .def_readwrite("pretrain_steps", &TrainConfig::pretrain_steps)
        .def_readwrite("later_epochs", &TrainConfig::later_epochs)
        .def_readwrite("later_lr", &TrainConfig::later_lr)
        .def_readwrite("obs_pool", &TrainConfig::obs_pool)
        .def_readwrite("param_ema", &TrainConfig::param_ema)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("warm_start", &TrainConfig::warm_start)
        .def_readwrite("train_quad", &TrainConfig::train_quad);

    py::class_<TrainedFilter>(m, "TrainedFilter")
        .def_readonly("loss_history", &TrainedFilter::loss_history)
        .def_property_readonly("num_steps",
                               [](const TrainedFilter& tf) { return tf.steps.size(); })
        .def_property_readonly("substeps",
                               [](const TrainedFilter& tf) { return tf.grid.substeps; })
        .def("density_grid",
             [](const TrainedFilter& tf, int k, const Eigen::RowVectorXd& obs_row,
                const VectorXd& x_pts, bool normalized) {
                 return filter_density_grid(tf, k, obs_row, x_pts, normalized);
             },
             py::arg("k"), py::arg("obs_row"), py::arg("x_pts"), py::arg("normalized") = true);

    m.def(
        "train_filter",
        [](const FilterProblem& prob, const TimeGrid& grid, const TrainConfig& cfg,
           const std::string& checkpoint_dir) {
            return train_filter(prob, grid, cfg,
                                checkpoint_dir.empty() ? nullptr : &checkpoint_dir);
        },
        py::arg("problem"), py::arg("grid"), py::arg("config"), py::arg("checkpoint_dir") = "");
    m.def("save_filter", &save_filter, py::arg("filter"), py::arg("directory"));
    m.def("load_filter", &load_filter, py::arg("directory"));

    m.def("kalman_reference_densities", &kalman_reference_densities, py::arg("problem"),
          py::arg("obs_row"), py::arg("substeps"), py::arg("x_pts"), py::arg("prior_mean"),
          py::arg("prior_var"));
    m.def("pf_reference_densities", &pf_reference_densities, py::arg("problem"),
          py::arg("obs_row"), py::arg("particles"), py::arg("substeps"), py::arg("grid"),
          py::arg("seed"));

    py::class_<EvalSettings>(m, "EvalSettings")
        .def(py::init<>())
        .def_readwrite("m_eval", &EvalSettings::m_eval)
        .def_readwrite("x_points", &EvalSettings::x_points)
        .def_readwrite("ek_obs", &EvalSettings::ek_obs)
        .def_readwrite("ek_probes", &EvalSettings::ek_probes)
        .def_readwrite("ek_inner_batch", &EvalSettings::ek_inner_batch)
        .def_readwrite("pf_particles", &EvalSettings::pf_particles)
        .def_readwrite("ref_substeps", &EvalSettings::ref_substeps)
        .def_readwrite("x_lo", &EvalSettings::x_lo)
        .def_readwrite("x_hi", &EvalSettings::x_hi)
        .def_readwrite("seed", &EvalSettings::seed)
        .def_readwrite("prior_mean", &EvalSettings::prior_mean)
        .def_readwrite("prior_std", &EvalSettings::prior_std);

    py::class_<ErrorReport>(m, "ErrorReport")
        .def_readonly("substeps", &ErrorReport::substeps)
        .def_readonly("e_k", &ErrorReport::e_k)
        .def_readonly("E_k", &ErrorReport::E_k)
        .def_readonly("accumulated_E", &ErrorReport::accumulated_E);

    m.def("compute_error_report", &compute_error_report, py::arg("filter"), py::arg("settings"));
    m.def("fit_log2_slope", &fit_log2_slope, py::arg("substeps"), py::arg("values"));
}

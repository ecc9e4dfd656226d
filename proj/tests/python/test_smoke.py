"""Smoke tests for the _bsdefilter extension module."""
import math

import numpy as np

import _bsdefilter as bf


def test_driver_values():
    ou = bf.make_problem("ou")
    assert ou.name == "ou"
    assert ou.driver_f_tilde(np.array([1.0]), 1.0, np.array([1.0])) == 3.0
    bi = bf.make_problem("bistable")
    assert bi.driver_f_tilde(np.array([1.0]), 1.0, np.array([1.0])) == -4.0
    assert abs(ou.prior(np.array([0.0])) - 1.0 / math.sqrt(2.0 * math.pi)) < 1e-12


def test_simulate_deterministic():
    prob = bf.make_problem("ou")
    grid = bf.TimeGrid(1.0, 10, 2)
    a = bf.simulate_observations(prob, grid, 8, 42)
    b = bf.simulate_observations(prob, grid, 8, 42)
    assert np.array_equal(a.obs, b.obs)
    assert np.array_equal(a.dw, b.dw)
    assert a.obs.shape == (8, 10)
    assert a.dw.shape == (8, 20)


def test_normalize():
    quad = bf.QuadratureGrid(-5.0, 5.0, 1000)
    mass = bf.normalize(lambda x: math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi), quad)
    assert abs(mass - 1.0) < 1e-4


def test_kalman_reference():
    prob = bf.make_problem("ou")
    obs = np.zeros(10)
    x = np.linspace(-5.0, 5.0, 101)
    dens = bf.kalman_reference_densities(prob, obs, 32, x, 0.0, 1.0)
    assert len(dens) == 10
    dz = x[1] - x[0]
    for d in dens:
        assert abs(np.sum(d) * dz - 1.0) < 1e-3
        assert np.all(d >= 0.0)


def test_tiny_train_and_report():
    prob = bf.make_problem("ou", num_obs=2)
    grid = bf.TimeGrid(1.0, 2, 1)
    cfg = bf.TrainConfig()
    cfg.batch_size = 16
    cfg.batches_per_epoch = 2
    cfg.max_epochs = 1
    cfg.patience = 1
    cfg.seed = 3
    tf = bf.train_filter(prob, grid, cfg)
    assert tf.num_steps == 2

    # Evaluate on the same grid the normalization uses: the Riemann sums match.
    x = np.linspace(-5.0, 5.0, 1000)
    dens = tf.density_grid(1, np.zeros(2), x)
    dz = x[1] - x[0]
    assert abs(np.sum(dens) * dz - 1.0) < 1e-9
    assert np.all(dens >= 0.0)

    s = bf.EvalSettings()
    s.m_eval = 4
    s.x_points = 51
    s.ek_obs = 2
    s.ek_probes = 2
    s.ek_inner_batch = 8
    s.pf_particles = 100
    s.ref_substeps = 8
    s.seed = 12
    rep = bf.compute_error_report(tf, s)
    assert len(rep.e_k) == 2
    assert len(rep.E_k) == 2
    assert abs(rep.accumulated_E - sum(rep.E_k)) < 1e-12
    assert all(math.isfinite(v) for v in rep.e_k)


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"{t.__name__}: ok")
    print(f"{len(tests)} python smoke tests passed")


if __name__ == "__main__":
    main()

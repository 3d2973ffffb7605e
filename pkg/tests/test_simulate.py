import math

import numpy as np
import pytest

from netsync import registry
from netsync.expressions import SymbolicCertificate, SymbolicSystem
from netsync.graph import build_graph, path_graph, ring_graph
from netsync.simulate import (
    ExperimentConfig,
    Trace,
    append_results_index,
    csv_header,
    fit_exponential,
    fit_lyapunov_rate,
    fit_rate,
    integrate,
    lyapunov_series,
    manifold_perturbation,
    sandwich_violation,
    sync_distance,
    transverse_error,
    verdicts,
    write_trace_csv,
)
from netsync.synthesis import make_global_controller, make_local_controller


def trace_from(times, X, V=None):
    X = np.asarray(X, dtype=float)
    K, N, n = X.shape
    dist = np.array([sync_distance(x, N) for x in X.reshape(K, -1)])
    e = np.array([np.linalg.norm(transverse_error(x, N)) for x in X.reshape(K, -1)])
    return Trace(np.asarray(times, float), X.reshape(K, -1), N, n, dist, e, np.zeros(K), V=V)


def scalar_global(name, g, ell=None, override=False, **kw):
    ex = registry.get(name)
    P, G = ex.constant_metric
    ctrl = make_global_controller(ex.system, P, G, g, ex.Q, ex.samples(201, 0), ell=ell, allow_low_gain=override,
                                  **kw)
    return ex, ctrl


# -- metrics ---------------------------------------------------------------------------------


def test_sync_distance_examples():
    assert sync_distance([1.0, 1.0, 1.0], 3) == 0.0
    assert sync_distance([0.0, 2.0], 2) == pytest.approx(math.sqrt(2))
    assert sync_distance([0.0, 0.0, 3.0], 3) == pytest.approx(math.sqrt(6))
    assert sync_distance(np.tile([0.3, -2.0], 4), 4) == 0.0


def test_centroid_is_the_minimizer():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5, 2))
    d = sync_distance(X.reshape(-1), 5)
    for _ in range(50):
        z = X.mean(axis=0) + rng.normal(scale=0.1, size=2)
        assert d <= np.sqrt(np.sum((X - z) ** 2)) + 1e-15


def test_lyapunov_series_examples():
    zero = trace_from([0.0], [[[1.0], [1.0]]])
    assert lyapunov_series(zero, [[1.0]])[0][0] == 0.0
    three = trace_from([0.0], [[[0.0], [3.0]]])
    assert lyapunov_series(three, [[1.0]])[0][0] == 9.0


def test_lyapunov_max_increment():
    tr = trace_from([0, 1, 2], [[[0], [3]], [[0], [2]], [[0], [2.5]]])
    V, inc = lyapunov_series(tr, [[1.0]])
    assert np.allclose(V, [9, 4, 6.25]) and inc == pytest.approx(2.25)


def test_sandwich_bounds_random():
    rng = np.random.default_rng(3)
    for N in (2, 3, 7):
        X = rng.normal(size=(20, N, 2))
        assert sandwich_violation(trace_from(np.arange(20.0), X)) <= 0


def test_manifold_perturbation_norms():
    x = manifold_perturbation([0.5, -0.3], 4, 1e-2, np.random.default_rng(0)).reshape(4, 2)
    assert np.allclose(np.linalg.norm(x - [0.5, -0.3], axis=1), 1e-2)


# -- fits ---------------------------------------------------------------------------------


def test_fit_exact_exponential():
    t = np.linspace(0, 10, 1001)
    d = 5 * np.exp(-2 * t)
    tr = Trace(t, np.zeros((len(t), 2)), 2, 1, d, d, np.zeros_like(t))
    fit = fit_rate(tr)
    assert fit.lam == pytest.approx(2.0, abs=1e-10)
    assert fit.k * d[0] == pytest.approx(5.0, rel=1e-9)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-10)
    assert fit.window == pytest.approx((2.0, 8.0))
    assert fit.warning is None


def test_fit_constant_trace():
    t = np.linspace(0, 4, 101)
    d = np.full_like(t, 0.7)
    fit = fit_rate(Trace(t, np.zeros((101, 2)), 2, 1, d, d, np.zeros(101)))
    assert fit.lam == pytest.approx(0.0, abs=1e-12)


def test_fit_starved_window_uses_prefix():
    t = np.linspace(0, 10, 1001)
    y = np.exp(-10 * t)  # below the floor after t ~ 3
    slope, _, r2, used, warning = fit_exponential(t, y, (5.0, 8.0))
    assert warning and "starved" in warning
    assert slope == pytest.approx(-10, rel=1e-9)
    assert used[0] == 0.0


# -- integration --------------------------------------------------------------------------


def test_config_validation():
    ex, ctrl = scalar_global("scalar-sine", ring_graph(3))
    with pytest.raises(ValueError):
        ExperimentConfig(ex.system, ctrl, np.zeros(3), T=1.0, dt=0.0)
    with pytest.raises(ValueError):
        ExperimentConfig(ex.system, ctrl, np.zeros(3), T=1.0, window=(0.5, 2.0))
    with pytest.raises(ValueError):
        ExperimentConfig(ex.system, ctrl, np.zeros(4), T=1.0)
    cfg = ExperimentConfig(ex.system, ctrl, np.zeros(3), T=10.0)
    assert cfg.window == (2.0, 8.0)


def test_zero_drift_equilibrium_on_manifold():
    sys = SymbolicSystem.from_strings(["z"], ["0"], [["1"]]).compile()
    cert = SymbolicCertificate.from_strings(["z"], [[1]], "z", ["1"], rho=1.0).compile()
    ctrl = make_local_controller(sys, cert, ring_graph(4), ell=5.0)
    tr = integrate(ExperimentConfig(sys, ctrl, np.full(4, 0.37), T=1.0, dt=0.01))
    assert np.all(tr.states == 0.37)


def test_manifold_invariance_local():
    ex = registry.get("paper-5B-a")
    ctrl = make_local_controller(ex.system, ex.certificate, path_graph(3))
    tr = integrate(ExperimentConfig(ex.system, ctrl, np.tile([0.4, -0.2], 3), T=2.0, dt=1e-2))
    assert np.max(tr.sync_distance) <= 1e-10


def test_global_scalar_sine_short_run():
    ex, ctrl = scalar_global("scalar-sine", ring_graph(5))
    x0 = np.linspace(-10, 10, 5)
    tr = integrate(ExperimentConfig(ex.system, ctrl, x0, T=5.0, dt=1e-3, decimate=10, lyapunov_P=ctrl.P))
    fit = fit_rate(tr)
    v = verdicts(tr, fit)
    assert v["synchronized"] and v["V_monotone"]
    assert fit_lyapunov_rate(tr).lam >= 1.8
    assert len(tr.times) == 501


def test_zero_gain_unstable_does_not_decay():
    ex, ctrl = scalar_global("scalar-unstable", ring_graph(3), ell=0.0, override=True)
    tr = integrate(ExperimentConfig(ex.system, ctrl, [0.1, 0.2, 0.3], T=3.0, dt=1e-2))
    assert tr.sync_distance[-1] > tr.sync_distance[0] * math.exp(2.9)
    fit = fit_rate(tr)
    assert fit.lam == pytest.approx(-1.0, abs=1e-6)
    assert not verdicts(tr, fit)["synchronized"]


def test_blowup_truncates_trace():
    sys = SymbolicSystem.from_strings(["z"], ["z^2"], [["1"]]).compile()
    g = build_graph(2, [(1, 2)])
    from netsync.certificate import SampleSet

    ctrl = make_global_controller(sys, [[1.0]], [[1.0]], g, [[1.0]], SampleSet(((-1, 1),), (3,)), ell=0.0,
                                  allow_low_gain=True)
    tr = integrate(ExperimentConfig(sys, ctrl, [1.0, 0.5], T=3.0, dt=1e-3))
    assert tr.blowup_time is not None and 0.9 < tr.blowup_time < 1.01
    assert np.all(np.isfinite(tr.states))
    assert tr.times[-1] == pytest.approx(tr.blowup_time)
    assert not verdicts(tr, fit_rate(tr))["finite"]


def test_step_size_order_four():
    ex, ctrl = scalar_global("scalar-sine", ring_graph(3), ell=1.0)
    x0 = np.array([-2.0, 0.5, 3.0])
    finals = [integrate(ExperimentConfig(ex.system, ctrl, x0, T=1.0, dt=dt)).states[-1]
              for dt in (0.1, 0.05, 0.025)]
    d1 = np.linalg.norm(finals[0] - finals[1])
    d2 = np.linalg.norm(finals[1] - finals[2])
    assert d1 / d2 == pytest.approx(16.0, rel=0.15)


def test_permutation_equivariance_on_ring():
    N = 5
    ex, ctrl = scalar_global("scalar-sine", ring_graph(N))
    assert np.all(ctrl.c == 1)
    x0 = np.array([-3.0, 1.0, 4.0, -0.5, 2.0])
    shift = np.roll(np.arange(N), 1)  # rotation is a ring automorphism
    a = integrate(ExperimentConfig(ex.system, ctrl, x0, T=2.0, dt=1e-2))
    b = integrate(ExperimentConfig(ex.system, ctrl, x0[shift], T=2.0, dt=1e-2))
    assert np.allclose(a.states[:, shift], b.states, atol=1e-12)
    # reflection as well
    flip = (-np.arange(N)) % N
    c = integrate(ExperimentConfig(ex.system, ctrl, x0[flip], T=2.0, dt=1e-2))
    assert np.allclose(a.states[:, flip], c.states, atol=1e-12)


def test_integration_deterministic():
    ex, ctrl = scalar_global("scalar-sine", ring_graph(3))
    cfg = lambda: ExperimentConfig(ex.system, ctrl, [1.0, -2.0, 0.5], T=1.0, dt=1e-2)
    assert np.array_equal(integrate(cfg()).states, integrate(cfg()).states)


# -- output ------------------------------------------------------------------------------


def test_csv_output(tmp_path):
    ex, ctrl = scalar_global("scalar-sine", ring_graph(3))
    tr = integrate(ExperimentConfig(ex.system, ctrl, [1.0, -2.0, 0.5], T=0.1, dt=1e-2, lyapunov_P=ctrl.P))
    path = write_trace_csv(tr, tmp_path / "t.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(csv_header(3, 1)) == "t,x_1_1,x_2_1,x_3_1,dist_D,norm_e,V,u_norm"
    assert len(lines) == len(tr.times) + 1
    row = [float(v) for v in lines[-1].split(",")]
    assert row[1:4] == list(tr.states[-1])  # 17 significant digits round-trip exactly
    fit = fit_rate(tr)
    append_results_index(tmp_path / "results.csv", "t", fit, verdicts(tr, fit))
    append_results_index(tmp_path / "results.csv", "t2", fit, verdicts(tr, fit))
    idx = (tmp_path / "results.csv").read_text().splitlines()
    assert idx[0].startswith("name,lambda") and len(idx) == 3

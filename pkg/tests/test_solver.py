import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from problems import convolution_problem, nonlinear_scalar, random_control

from svie_mp import kernels
from svie_mp.grid import build_driver, make_grid
from svie_mp.problem import ControlSet, LinearSpec
from svie_mp.solver import (
    LinearSVIEInput,
    NumericalError,
    eval_cost,
    linearize,
    solve_linear_svie,
    solve_svie,
    stability_check,
)


def _det_driver(N):
    return build_driver(make_grid(1.0, N), "mc", M=1)


def _with(spec, **kw):
    return dataclasses.replace(spec, **kw)


def _zero_coeffs(spec):
    z = lambda t, s, x, u: 0 * x + 0 * np.asarray(t, dtype=float)[..., None]
    return _with(spec, b=z, sigma=z)


def test_no_dynamics_returns_phi():
    d = build_driver(make_grid(1.0, 3))
    spec = _zero_coeffs(nonlinear_scalar())
    X = solve_svie(spec, np.zeros((3, 1, 1)), d)
    np.testing.assert_array_equal(X, 0.5)


def test_unit_drift_left_point():
    d = build_driver(make_grid(1.0, 4))
    spec = _with(
        _zero_coeffs(nonlinear_scalar()),
        phi=lambda t: np.zeros(np.shape(t) + (1,)),
        b=lambda t, s, x, u: 1 + 0 * x + 0 * np.asarray(s, dtype=float)[..., None],
    )
    X = solve_svie(spec, np.zeros((4, 1, 1)), d)
    np.testing.assert_allclose(X[:, 0, 0], d.grid.t, atol=1e-15)


def _memory_spec(x0=1.0):
    lin = LinearSpec(1, 1, A1=lambda t, s: (-(t - s))[..., None, None], x0=x0)
    return lin.to_problem()


def test_memory_drift_fine_grid_oracle():
    spec = _memory_spec()
    coarse = solve_svie(spec, np.zeros((64, 1, 1)), _det_driver(64))[-1, 0, 0]
    fine = solve_svie(spec, np.zeros((640, 1, 1)), _det_driver(640))[-1, 0, 0]
    # X(t) = cos(t) solves X = 1 - int (t - s) X(s) ds
    assert fine == pytest.approx(math.cos(1.0), rel=2e-3)
    assert abs(coarse - fine) / abs(fine) < 0.02


def test_convolution_first_order():
    spec = convolution_problem()
    ref = solve_svie(spec, np.zeros((640, 1, 1)), _det_driver(640))[:, 0, 0]
    err = {}
    for N in (32, 64):
        x = solve_svie(spec, np.zeros((N, 1, 1)), _det_driver(N))[:, 0, 0]
        r = ref[:: 640 // N]
        err[N] = np.abs(x - r).max() / np.abs(r).max()
    assert err[64] < 0.02
    assert 1.6 <= err[32] / err[64] <= 2.4


def test_batched_controls_match_single_solves():
    d = build_driver(make_grid(1.0, 3))
    spec = nonlinear_scalar()
    rng = np.random.default_rng(0)
    us = np.stack([random_control(d, 1, rng) for _ in range(3)], axis=1)  # (N, B, S, m)
    X = solve_svie(spec, us, d)
    assert X.shape == (4, 3, d.S, 1)
    J = eval_cost(spec, X, us, d)
    for k in range(3):
        Xk = solve_svie(spec, us[:, k], d)
        np.testing.assert_allclose(X[:, k], Xk, atol=1e-14)
        assert J[k] == pytest.approx(eval_cost(spec, Xk, us[:, k], d), abs=1e-14)


def test_nonfinite_coefficient_location():
    spec = _with(nonlinear_scalar(), b=lambda t, s, x, u: np.where(np.asarray(t)[..., None] > 0.6, np.inf, 0 * x))
    with pytest.raises(NumericalError) as exc:
        solve_svie(spec, np.zeros((4, 1, 1)), build_driver(make_grid(1.0, 4)))
    assert exc.value.location == (3, 0)


def test_check_controls():
    spec = _with(nonlinear_scalar(), control_set=ControlSet.box([0.0], [1.0]))
    with pytest.raises(ValueError):
        solve_svie(spec, np.full((2, 1, 1), 2.0), build_driver(make_grid(1.0, 2)), check_controls=True)


def _zeros_AB(N, n=1):
    z = np.zeros((N + 1, N + 1, 1, n, n))
    return z, z.copy()


def test_linear_zero_coefficients():
    d = build_driver(make_grid(1.0, 3))
    A, B = _zeros_AB(3)
    psi = np.random.default_rng(1).standard_normal((4, d.S, 1))
    np.testing.assert_array_equal(solve_linear_svie(LinearSVIEInput(0, A, B, psi), d), psi)


def test_linear_single_step_enumeration():
    d = build_driver(make_grid(1.0, 1))
    A, B = _zeros_AB(1)
    B[1, 0] = 1.0
    X = solve_linear_svie(LinearSVIEInput(0, A, B, np.ones((2, 1, 1))), d)
    np.testing.assert_allclose(sorted(X[1, :, 0]), [1 - math.sqrt(d.dt), 1 + math.sqrt(d.dt)])


def test_linear_terminal_component():
    d = build_driver(make_grid(1.0, 3))
    A, B = _zeros_AB(3, 2)
    X, XT = solve_linear_svie(LinearSVIEInput(1, A, B, np.zeros((4, 1, 2)), alpha1=np.array([2.0, -1.0])), d)
    np.testing.assert_array_equal(X, 0.0)
    np.testing.assert_array_equal(XT, np.broadcast_to([2.0, -1.0], (d.S, 2)))


def _random_AB(rng, N, n, S=1):
    A = np.zeros((N + 1, N + 1, S, n, n))
    B = np.zeros_like(A)
    for i in range(N + 1):
        A[i, :i] = 0.5 * rng.standard_normal((i, S, n, n))
        B[i, :i] = 0.5 * rng.standard_normal((i, S, n, n))
    return A, B


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 2 ** 31 - 1), st.floats(-3, 3))
def test_linear_svie_is_linear(N, n, seed, lam):
    rng = np.random.default_rng(seed)
    d = build_driver(make_grid(1.0, N))
    A, B = _random_AB(rng, N, n)
    tau = int(rng.integers(0, N))
    p1 = rng.standard_normal((N + 1, d.S, n))
    p2 = rng.standard_normal((N + 1, d.S, n))
    g = rng.standard_normal((N + 1, N + 1, 1, n))
    x1 = solve_linear_svie(LinearSVIEInput(tau, A, B, p1, g=g), d)
    x2 = solve_linear_svie(LinearSVIEInput(tau, A, B, p2), d)
    x12 = solve_linear_svie(LinearSVIEInput(tau, A, B, p1 + lam * p2, g=g), d)
    np.testing.assert_allclose(x12, x1 + lam * x2, atol=1e-10 * (1 + np.abs(x12).max()))


@pytest.mark.skipif(kernels.BACKEND != "compiled", reason="compiled kernel not built")
def test_backends_agree():
    rng = np.random.default_rng(2)
    d = build_driver(make_grid(1.0, 6))
    A, B = _random_AB(rng, 6, 2, S=d.S)
    psi = rng.standard_normal((7, d.S, 2))
    inp = LinearSVIEInput(2, A, B, psi)
    np.testing.assert_allclose(
        solve_linear_svie(inp, d, backend="python"), solve_linear_svie(inp, d, backend="compiled"), atol=1e-13
    )


def test_eval_cost_trivial_cases():
    d = build_driver(make_grid(1.0, 2))
    spec = _with(
        _zero_coeffs(nonlinear_scalar()),
        phi=lambda t: np.full(np.shape(t) + (1,), 3.0),
        h=lambda x: x[..., 0],
        l=lambda s, x, u: 0 * x[..., 0] + 0 * np.asarray(s, dtype=float),
    )
    u = np.zeros((2, 1, 1))
    assert eval_cost(spec, solve_svie(spec, u, d), u, d) == pytest.approx(3.0)
    spec0 = _with(spec, h=lambda x: 0 * x[..., 0])
    assert eval_cost(spec0, solve_svie(spec0, u, d), u, d) == 0.0


def test_eval_cost_lq_by_enumeration():
    a, c, q, g = -0.7, 0.4, 1.3, 2.0
    lin = LinearSpec(1, 1, A1=a, A2=c, Q=q, R=1.0, G=g, x0=1.0)
    d = build_driver(make_grid(1.0, 2))
    spec = lin.to_problem()
    u = np.zeros((2, 1, 1))
    J = eval_cost(spec, solve_svie(spec, u, d), u, d)
    h = d.dt
    total = 0.0
    for w0 in (-1, 1):
        for w1 in (-1, 1):
            dw0, dw1 = w0 * math.sqrt(h), w1 * math.sqrt(h)
            x0 = 1.0
            x1 = 1.0 + a * x0 * h + c * x0 * dw0
            x2 = 1.0 + a * (x0 + x1) * h + c * (x0 * dw0 + x1 * dw1)
            total += 0.25 * (0.5 * q * (x0 ** 2 + x1 ** 2) * h + 0.5 * g * x2 ** 2)
    assert J == pytest.approx(total, abs=1e-14)


def test_linearize_shapes():
    d = build_driver(make_grid(1.0, 3))
    spec = nonlinear_scalar()
    u = random_control(d, 1, np.random.default_rng(0))
    X = solve_svie(spec, u, d)
    L = linearize(spec, X, u, d, second=True)
    assert L.A.shape == (4, 4, d.S, 1, 1)
    assert L.Axx.shape == (4, 4, d.S, 1, 1, 1)
    assert np.all(L.A[np.triu_indices(4)] == 0)


def test_stability_identical_specs():
    d = build_driver(make_grid(1.0, 4))
    spec = nonlinear_scalar()
    rep = stability_check(spec, spec, np.zeros((4, 1, 1)), d)
    assert rep.sup_diff == 0.0 and rep.K_hat_diff == 0.0
    assert rep.K_hat_bound > 0


def test_stability_shifted_phi():
    d = build_driver(make_grid(1.0, 4))
    spec = nonlinear_scalar()
    ks = []
    for c in (0.2, 0.1, 0.05):
        shifted = _with(spec, phi=lambda t, c=c: np.full(np.shape(t) + (1,), 0.5 + c))
        ks.append(stability_check(spec, shifted, np.zeros((4, 1, 1)), d).K_hat_diff)
    assert np.isfinite(ks).all()
    assert max(ks) / min(ks) < 1.5


def test_linear_homogeneous_scaling():
    d = build_driver(make_grid(1.0, 4))
    base = LinearSpec(1, 1, A1=-0.3, A2=0.5, x0=1.0).to_problem()
    scaled = LinearSpec(1, 1, A1=-0.3, A2=0.5, x0=3.0).to_problem()
    r1 = stability_check(base, base, np.zeros((4, 1, 1)), d)
    r3 = stability_check(scaled, scaled, np.zeros((4, 1, 1)), d)
    assert r3.sup_second_moment == pytest.approx(9 * r1.sup_second_moment, rel=1e-13)

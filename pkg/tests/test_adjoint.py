import dataclasses

import numpy as np
import pytest
from problems import lq_time_constant, nonlinear_scalar, random_control

from svie_mp.adjoint import (
    AdjointIterationError,
    compute_pi_bar,
    delta_H,
    hamiltonian,
    hamiltonian_u,
    hessian_H,
    solve_first_order_adjoint,
)
from svie_mp.grid import build_driver, cond_expect, make_grid, martingale_integrand
from svie_mp.problem import ControlSet, LinearSpec, ProblemSpec
from svie_mp.solver import LinearSVIEInput, eval_cost, linearize, solve_linear_svie, solve_svie


def _state_free(l, l_x, h=None, h_x=None, sigma=None):
    """Dynamics ``X = phi + int u ds + int sigma(u) dW`` with no x-dependence."""
    z2 = lambda t, s, x, u: np.zeros(np.broadcast_shapes(np.shape(t), np.shape(s), x.shape[:-1]) + (1, 1))
    return ProblemSpec(
        1,
        1,
        lambda t: np.zeros(np.shape(t) + (1,)),
        lambda t, s, x, u: u + 0 * x,
        sigma or (lambda t, s, x, u: 0 * u + 0 * x),
        z2,
        z2,
        h=h or (lambda x: 0 * x[..., 0]),
        h_x=h_x or (lambda x: 0 * x),
        h_xx=lambda x: np.zeros(np.shape(x) + (1,)),
        l=l,
        l_x=l_x,
        l_xx=lambda s, x, u: np.zeros(np.broadcast_shapes(np.shape(s), x.shape[:-1]) + (1, 1)),
        control_set=ControlSet.all(1),
    )


def _solve(spec, u, d, **kw):
    X = solve_svie(spec, u, d)
    return X, solve_first_order_adjoint(spec, X, u, d, **kw)


def test_pi_bar_examples():
    d = build_driver(make_grid(1.0, 3))
    W = d.dW.sum(axis=1)
    X = np.zeros((4, d.S, 1))
    X[-1, :, 0] = W
    lin_h = _state_free(lambda s, x, u: 0 * x[..., 0], lambda s, x, u: 0 * x, h=lambda x: x[..., 0], h_x=lambda x: 1 + 0 * x)
    np.testing.assert_allclose(compute_pi_bar(lin_h, X, d), 0.0, atol=1e-15)
    half_sq = dataclasses.replace(lin_h, h=lambda x: 0.5 * x[..., 0] ** 2, h_x=lambda x: x)
    np.testing.assert_allclose(compute_pi_bar(half_sq, X, d), 1.0, atol=1e-14)


def test_pi_bar_square_one_step():
    d = build_driver(make_grid(1.0, 1))
    X = np.zeros((2, d.S, 1))
    X[1, :, 0] = d.dW[:, 0]
    spec = _state_free(lambda s, x, u: 0 * x[..., 0], lambda s, x, u: 0 * x, h=lambda x: x[..., 0] ** 2, h_x=lambda x: 2 * x)
    np.testing.assert_allclose(compute_pi_bar(spec, X, d)[0], 2.0, atol=1e-14)


def test_adjoint_vanishes_without_costs():
    d = build_driver(make_grid(1.0, 4))
    spec = _state_free(lambda s, x, u: 0 * x[..., 0], lambda s, x, u: 0 * x)
    _, adj = _solve(spec, np.zeros((4, 1, 1)), d)
    assert adj.iterations == 0
    assert not np.any(adj.Y) and not np.any(adj.Z)


def test_adjoint_decoupled_is_running_gradient():
    d = build_driver(make_grid(1.0, 4))
    spec = _state_free(
        lambda s, x, u: np.sin(x[..., 0]) + 0 * s,
        lambda s, x, u: np.cos(x) + 0 * u,
        sigma=lambda t, s, x, u: 0.5 + u + 0 * x,
    )
    u = random_control(d, 1, np.random.default_rng(0))
    X, adj = _solve(spec, u, d)
    lx = np.cos(X[:4])
    np.testing.assert_allclose(adj.Y, lx, atol=1e-14)
    for i in range(4):
        for j in range(4):
            expected = martingale_integrand(d, lx[i], j) if j < i else 0.0
            np.testing.assert_allclose(adj.Z[i, j], expected, atol=1e-13)


@pytest.mark.parametrize("method", ["picard", "backward"])
def test_duality_identity(method):
    d = build_driver(make_grid(1.0, 5))
    spec = nonlinear_scalar()
    rng = np.random.default_rng(3)
    u = random_control(d, 1, rng)
    X, adj = _solve(spec, u, d, method=method)
    lin = adj.lin
    psi = rng.standard_normal((6, d.S, 1))
    # make psi_i adapted to F_i
    psi = np.stack([cond_expect(d, psi[i], i) for i in range(6)])
    dX = solve_linear_svie(LinearSVIEInput(0, lin.A, lin.B, psi), d)
    t = d.grid.t
    lx = spec.l_x(t[:5, None], X[:5], u)
    lhs = d.expect((lx * dX[:5]).sum(axis=(0, 2)) * d.dt + (adj.hx * dX[5]).sum(-1))
    rhs = d.expect((adj.Y * psi[:5]).sum(axis=(0, 2)) * d.dt + (adj.hx * psi[5]).sum(-1))
    assert lhs == pytest.approx(rhs, abs=1e-13)


def test_picard_matches_backward_and_m_solution():
    d = build_driver(make_grid(1.0, 5))
    spec = nonlinear_scalar()
    u = random_control(d, 1, np.random.default_rng(1))
    X, a = _solve(spec, u, d)
    _, b = _solve(spec, u, d, method="backward")
    np.testing.assert_allclose(a.Y, b.Y, atol=1e-12)
    np.testing.assert_allclose(a.Z, b.Z, atol=1e-12)
    assert a.residual < 1e-12
    for t in range(5):
        for s in range(t + 1):
            rec = cond_expect(d, a.Y[t], s) + (a.Z[t, s:t] * d.dW.T[s:t, :, None]).sum(axis=0)
            np.testing.assert_allclose(rec, a.Y[t], atol=1e-12)


def test_sde_case_matches_backward_induction():
    rng = np.random.default_rng(5)
    lin = lq_time_constant(rng)
    spec = lin.to_problem()
    N, n = 6, lin.n
    d = build_driver(make_grid(1.0, N))
    u = random_control(d, 1, rng)
    X, adj = _solve(spec, u, d)
    A1, A2 = np.asarray(lin.A1), np.asarray(lin.A2)
    Q, G = np.asarray(lin.Q), np.asarray(lin.G)
    # discrete SDE adjoint p_k = dJ/dX_k
    p = X[N] @ G
    for k in range(N - 1, -1, -1):
        step = np.eye(n) + A1 * d.dt + A2 * d.dW[:, k, None, None]
        p = cond_expect(d, (np.swapaxes(step, -1, -2) @ p[..., None])[..., 0], k) + X[k] @ Q * d.dt
        tail = adj.Y[k:].sum(axis=0) * d.dt + adj.hx
        np.testing.assert_allclose(cond_expect(d, tail, k), p, atol=1e-12)


def test_finite_difference_gradient():
    d = build_driver(make_grid(1.0, 4))
    spec = nonlinear_scalar()
    u = random_control(d, 1, np.random.default_rng(1))
    X, adj = _solve(spec, u, d)
    J = lambda v: eval_cost(spec, solve_svie(spec, v, d), v, d)
    for i in range(4):
        Hu = hamiltonian_u(spec, adj, X, u, i, d)
        for node in (0, 2 ** i - 1):
            blk = 2 ** (4 - i)
            e = 1e-6
            up, um = u.copy(), u.copy()
            up[i, node * blk : (node + 1) * blk] += e
            um[i, node * blk : (node + 1) * blk] -= e
            fd = (J(up) - J(um)) / (2 * e)
            assert fd == pytest.approx(Hu[node * blk, 0] * d.dt * 2.0 ** -i, rel=1e-6, abs=1e-10)


def test_hamiltonian_reduces_to_running_cost():
    d = build_driver(make_grid(1.0, 3))
    spec = _state_free(lambda s, x, u: u[..., 0] ** 2 + 0 * x[..., 0], lambda s, x, u: 0 * x)
    spec = dataclasses.replace(spec, b=lambda t, s, x, u: 0 * x + 0 * u)
    u0 = np.zeros((3, 1, 1))
    X, adj = _solve(spec, u0, d)
    np.testing.assert_allclose(hamiltonian(spec, adj, X, 1, X[1], [0.7], d), 0.49)
    np.testing.assert_allclose(delta_H(spec, adj, X, u0, 1, [1.0], d), 1.0)
    np.testing.assert_allclose(delta_H(spec, adj, X, u0, 2, [0.0], d), 0.0)


def test_hamiltonian_lq_by_hand():
    a, b1, c, b2, q, r, g = -0.4, 0.8, 0.3, 0.5, 1.0, 0.6, 2.0
    lin = LinearSpec(1, 1, A1=a, B1=b1, A2=c, B2=b2, Q=q, R=r, G=g, x0=1.0)
    spec = lin.to_problem()
    d = build_driver(make_grid(1.0, 2))
    u = np.full((2, 1, 1), 0.25)
    X, adj = _solve(spec, u, d)
    x, v = 0.9, -0.3
    H = hamiltonian(spec, adj, X, 0, [x], [v], d)
    hx = g * X[2, :, 0]
    pi0 = (hx * d.dW[:, 0]).mean() / d.dt
    Y1 = adj.Y[1, :, 0]
    Z10 = adj.Z[1, 0, :, 0]
    expected = 0.5 * q * x ** 2 + 0.5 * r * v ** 2 + (a * x + b1 * v) * hx.mean() + (c * x + b2 * v) * pi0
    expected += ((a * x + b1 * v) * Y1.mean() + (c * x + b2 * v) * Z10) * d.dt
    np.testing.assert_allclose(H, expected, atol=1e-14)


def test_hessian_linear_dynamics_is_Q():
    lin = LinearSpec(2, 1, A1=np.eye(2), A2=0.2 * np.eye(2), Q=np.array([[2.0, 0.5], [0.5, 1.0]]), G=np.eye(2), R=1.0, x0=[1, 0])
    spec = lin.to_problem()
    d = build_driver(make_grid(1.0, 3))
    X = solve_svie(spec, np.zeros((3, 1, 1)), d)
    for i in range(3):
        np.testing.assert_allclose(hessian_H(spec, None, X, np.zeros((3, 1, 1)), i, d), np.broadcast_to(lin.Q, (d.S, 2, 2)))


def test_hessian_matches_finite_difference():
    d = build_driver(make_grid(1.0, 4))
    spec = nonlinear_scalar()
    u = random_control(d, 1, np.random.default_rng(2))
    X, adj = _solve(spec, u, d)
    for i in range(4):
        Hxx = hessian_H(spec, adj, X, u, i, d)[:, 0, 0]
        e = 1e-4
        hp = hamiltonian(spec, adj, X, i, X[i] + e, u[i], d)
        h0 = hamiltonian(spec, adj, X, i, X[i], u[i], d)
        hm = hamiltonian(spec, adj, X, i, X[i] - e, u[i], d)
        np.testing.assert_allclose((hp - 2 * h0 + hm) / e ** 2, Hxx, rtol=1e-5, atol=1e-6)


def test_hamiltonian_u_analytic_vs_finite_difference():
    lin = LinearSpec(1, 1, A1=-0.3, B1=lambda t, s: (1 + t - s)[..., None, None], A2=0.2, B2=0.4, Q=1.0, S=0.2, R=0.5, G=1.5, x0=1.0)
    spec = lin.to_problem()
    d = build_driver(make_grid(1.0, 4))
    u = random_control(d, 1, np.random.default_rng(4))
    X, adj = _solve(spec, u, d)
    fd_spec = dataclasses.replace(spec, b_u=None)
    for i in range(4):
        np.testing.assert_allclose(
            hamiltonian_u(spec, adj, X, u, i, d), hamiltonian_u(fd_spec, adj, X, u, i, d), atol=1e-8
        )


def test_iteration_failure_reports_history():
    d = build_driver(make_grid(1.0, 4))
    spec = nonlinear_scalar()
    u = random_control(d, 1, np.random.default_rng(0))
    X = solve_svie(spec, u, d)
    with pytest.raises(AdjointIterationError) as exc:
        solve_first_order_adjoint(spec, X, u, d, max_iter=2)
    assert len(exc.value.history) == 2
    with pytest.raises(ValueError):
        solve_first_order_adjoint(spec, X, u, d, method="newton")


def test_linearization_reuse():
    d = build_driver(make_grid(1.0, 3))
    spec = nonlinear_scalar()
    u = random_control(d, 1, np.random.default_rng(0))
    X = solve_svie(spec, u, d)
    a = solve_first_order_adjoint(spec, X, u, d)
    b = solve_first_order_adjoint(spec, X, u, d, lin=linearize(spec, X, u, d))
    np.testing.assert_array_equal(a.Y, b.Y)

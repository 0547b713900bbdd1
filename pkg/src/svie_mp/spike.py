"""Spike variations, variational equations and the small-window asymptotics.

A spike of width ``eps = k dt`` at index ``tau`` replaces the reference control
by ``u`` on the indices ``tau, ..., tau+k-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adjoint import FirstOrderAdjoint, delta_H
from .grid import NoiseDriver, TimeGrid
from .problem import ProblemSpec
from .second_order import QuadraticWeights, spike_direction
from .solver import (
    LinearSVIEInput,
    Linearization,
    control_values,
    eval_cost,
    linearize,
    solve_linear_svie,
    solve_svie,
)

__all__ = [
    "SpikeExperiment",
    "OrderReport",
    "ConvergenceTable",
    "eps_steps",
    "spike_control",
    "solve_variational",
    "check_order_estimates",
    "variational_inequality_terms",
    "asymptotic_experiment",
]


def eps_steps(eps: float, grid: TimeGrid, atol: float = 1e-9) -> int:
    """Number of grid steps in a width ``eps``; raise unless aligned and positive."""
    k = int(round(eps / grid.dt))
    if k < 1 or abs(k * grid.dt - eps) > atol * max(1.0, grid.T):
        raise ValueError(f"spike width {eps!r} is not a positive multiple of dt={grid.dt}")
    return k


def _point_or_array(u, S, m):
    a = np.asarray(u, dtype=float)
    if a.ndim <= 1:
        return np.broadcast_to(a.reshape(-1), (m,))[None]
    return np.broadcast_to(a, (max(S, a.shape[0]), m))


def spike_control(ubar, tau_idx: int, eps: float, u, grid: TimeGrid) -> np.ndarray:
    """``u`` on ``[tau, tau+eps)``, ``ubar`` elsewhere.

    Parameters
    ----------
    ubar : ndarray, shape (N, S or 1, m)
    tau_idx : int
    eps : float
        Width, a positive multiple of ``dt``.
    u : array_like
        Point of U, or an ``F_tau``-measurable array (S, m).
    grid : TimeGrid
    """
    ub = np.asarray(ubar, dtype=float)
    if ub.ndim == 2:
        ub = ub[:, None, :]
    k = eps_steps(eps, grid)
    if not 0 <= tau_idx or tau_idx + k > grid.N:
        raise ValueError(f"spike [{tau_idx}, {tau_idx + k}) leaves the grid 0..{grid.N}")
    m = ub.shape[-1]
    uu = _point_or_array(u, ub.shape[1], m)
    S = max(ub.shape[1], uu.shape[0])
    out = np.broadcast_to(ub, (ub.shape[0], S, m)).copy()
    out[tau_idx : tau_idx + k] = np.broadcast_to(uu, (S, m))
    return out


@dataclass(eq=False)
class SpikeExperiment:
    """One spike run: control, variational states and perturbed state."""

    tau_idx: int
    k: int
    eps: float
    u: np.ndarray
    u_eps: np.ndarray
    X1: np.ndarray
    X2: Optional[np.ndarray]
    X_eps: Optional[np.ndarray]
    diagnostics: dict = field(default_factory=dict)

    @property
    def window(self) -> range:
        return range(self.tau_idx, self.tau_idx + self.k)


def _first_variation(spec, Xbar, U, uu, tau, k, lin, driver):
    """X1 from the window forcing ``sum_j dsigma(t_i,t_j) dW_j``."""
    N, S, n = driver.N, driver.S, spec.n
    t = driver.grid.t
    psi = np.zeros((N + 1, S, n))
    for j in range(tau, tau + k):
        ti = t[j + 1 :, None]
        ds = np.broadcast_to(spec.sigma(ti, t[j], Xbar[j][None], uu[None]), (N - j, S, n)) - np.broadcast_to(
            spec.sigma(ti, t[j], Xbar[j][None], U[j][None]), (N - j, S, n)
        )
        psi[j + 1 :] += ds * driver.dW[None, :, j, None]
    return solve_linear_svie(LinearSVIEInput(tau, lin.A, lin.B, psi), driver)


def solve_variational(
    spec: ProblemSpec,
    Xbar: np.ndarray,
    ubar,
    tau_idx: int,
    eps: float,
    u,
    driver: NoiseDriver,
    lin: Optional[Linearization] = None,
    second: bool = True,
    perturbed: bool = True,
) -> SpikeExperiment:
    """First- and second-order variational states of a spike.

    ``X1`` solves the linear SVIE with stochastic forcing ``delta sigma``;
    ``X2`` solves it with forcing
    ``phi2_i = sum_{j<i}[b_xx(t_i,t_j)X1_j^2/2 + delta b(t_i,t_j)] dt
    + sum_{j<i}[sigma_xx(t_i,t_j)X1_j^2/2 + delta sigma_x(t_i,t_j) X1_j] dW_j``
    where ``f_xx X1^2 = (tr f^k_xx X1 X1')_k``.

    Returns
    -------
    SpikeExperiment
        With ``X2`` / ``X_eps`` set to ``None`` when not requested.
    """
    N, S, n, m, dt = driver.N, driver.S, spec.n, spec.m, driver.dt
    t = driver.grid.t
    U = np.broadcast_to(control_values(ubar, driver, m), (N, S, m))
    if lin is None:
        lin = linearize(spec, Xbar, U, driver)
    k = eps_steps(eps, driver.grid)
    tau = int(tau_idx)
    u_eps = spike_control(U, tau, eps, u, driver.grid)
    uu = np.broadcast_to(_point_or_array(u, S, m), (S, m))
    X1 = _first_variation(spec, Xbar, U, uu, tau, k, lin, driver)
    X2 = None
    if second:
        phi2 = np.zeros((N + 1, S, n))
        dWt = driver.dW.T[:, :, None]
        for j in range(tau, tau + k):
            ti = t[j + 1 :, None]
            xb = Xbar[j][None]
            db = np.broadcast_to(spec.b(ti, t[j], xb, uu[None]), (N - j, S, n)) - np.broadcast_to(
                spec.b(ti, t[j], xb, U[j][None]), (N - j, S, n)
            )
            dsx = np.broadcast_to(spec.sigma_x(ti, t[j], xb, uu[None]), (N - j, S, n, n)) - np.broadcast_to(
                spec.sigma_x(ti, t[j], xb, U[j][None]), (N - j, S, n, n)
            )
            phi2[j + 1 :] += db * dt + (dsx @ X1[j][None, ..., None])[..., 0] * dWt[j]
        for nm, scale in (("b_xx", None), ("sigma_xx", "dW")):
            f = getattr(spec, nm)
            if f is None:
                continue
            for i in range(tau + 1, N + 1):
                js = slice(tau, i)
                T3 = np.broadcast_to(f(t[i], t[js, None], Xbar[js], U[js]), (i - tau, S, n, n, n))
                q = 0.5 * np.einsum("jsklr,jsl,jsr->jsk", T3, X1[js], X1[js])
                w = dt if scale is None else dWt[js]
                phi2[i] += (q * w).sum(axis=0)
        X2 = solve_linear_svie(LinearSVIEInput(tau, lin.A, lin.B, phi2), driver)
    X_eps = solve_svie(spec, u_eps, driver) if perturbed else None
    return SpikeExperiment(tau, k, k * dt, np.array(uu), u_eps, X1, X2, X_eps)


# ---------------------------------------------------------------------------


@dataclass
class OrderReport:
    """Order-of-magnitude estimates along a list of spike widths."""

    eps: np.ndarray
    sup_X1_sq: np.ndarray
    residual_sq: np.ndarray
    slope_X1: float
    slope_residual: float
    r2_X1: float
    r2_residual: float
    exact_zero: bool
    residual_exact: bool = False

    def to_dict(self) -> dict:
        return {
            "eps": self.eps.tolist(),
            "sup_E_X1_sq": self.sup_X1_sq.tolist(),
            "sup_E_residual_sq": self.residual_sq.tolist(),
            "slope_X1": self.slope_X1,
            "slope_residual": self.slope_residual,
            "r2_X1": self.r2_X1,
            "r2_residual": self.r2_residual,
            "exact_zero": self.exact_zero,
            "residual_exact": self.residual_exact,
        }


def _loglog(eps, vals):
    eps = np.asarray(eps, dtype=float)
    vals = np.asarray(vals, dtype=float)
    ok = vals > 0
    if ok.sum() < 2:
        return float("nan"), float("nan")
    x, y = np.log(eps[ok]), np.log(vals[ok])
    p = np.polyfit(x, y, 1)
    resid = y - np.polyval(p, x)
    ss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss if ss > 0 else 1.0
    return float(p[0]), r2


def check_order_estimates(
    spec: ProblemSpec,
    Xbar: np.ndarray,
    ubar,
    tau_idx: int,
    u,
    eps_list: Sequence[float],
    driver: NoiseDriver,
    lin: Optional[Linearization] = None,
    residual: bool = True,
    zero_atol: float = 1e-20,
) -> OrderReport:
    """Log-log slopes of ``sup_t E|X1|^2`` (about 1) and of the expansion residual.

    The residual is ``sup_t E|X^eps - Xbar - X1 - X2|^2`` (slope above 2).
    Residuals at or below ``zero_atol`` at every width (affine dynamics) are
    flagged ``residual_exact`` and get no slope.
    """
    U = np.broadcast_to(control_values(ubar, driver, spec.m), (driver.N, driver.S, spec.m))
    if lin is None:
        lin = linearize(spec, Xbar, U, driver)
    eps = np.asarray(list(eps_list), dtype=float)
    a, r = [], []
    for e in eps:
        ex = solve_variational(spec, Xbar, U, tau_idx, e, u, driver, lin, second=residual, perturbed=residual)
        a.append(float(np.max(driver.expect((ex.X1 ** 2).sum(-1).T), initial=0.0)))
        if residual:
            res = ex.X_eps - Xbar - ex.X1 - ex.X2
            r.append(float(np.max(driver.expect((res ** 2).sum(-1).T), initial=0.0)))
        else:
            r.append(float("nan"))
    a, r = np.array(a), np.array(r)
    zero = bool(np.all(a == 0) and (not residual or np.all(r == 0)))
    s1, q1 = _loglog(eps, a)
    r_exact = bool(residual and np.all(r <= zero_atol))
    s2, q2 = _loglog(eps, r) if residual and not r_exact else (float("nan"), float("nan"))
    return OrderReport(eps, a, r, s1, s2, q1, q2, zero, r_exact)


def variational_inequality_terms(
    spec: ProblemSpec,
    adjoint: FirstOrderAdjoint,
    weights: QuadraticWeights,
    experiment: SpikeExperiment,
    Xbar: np.ndarray,
    ubar,
    driver: NoiseDriver,
) -> dict:
    """Named terms of the variational inequality and of its reduced form.

    Keys: ``lx_X1_X2``, ``hx_X1_X2``, ``delta_l``, ``lxx_X1``, ``hxx_X1``,
    ``expansion`` (their sum), ``delta_J`` (exact cost change), ``dH_integral``
    (``E sum_i dH(t_i) dt``), ``script_E``, ``reduced`` (``dH_integral/eps +
    script_E``) and ``o_eps_term`` (the ``sigma_x``-increment pairing).
    """
    N, S, n, m, dt = driver.N, driver.S, spec.n, spec.m, driver.dt
    t = driver.grid.t
    E = lambda v: float(driver.expect(np.broadcast_to(v, (S,))))
    U = np.broadcast_to(control_values(ubar, driver, m), (N, S, m))
    ex = experiment
    X1, X2 = ex.X1, ex.X2
    if X2 is None:
        raise ValueError("experiment lacks X2; run solve_variational(second=True)")
    tt = t[:N, None]
    lx = np.broadcast_to(spec.l_x(tt, Xbar[:N], U), (N, S, n))
    lxx = np.broadcast_to(spec.l_xx(tt, Xbar[:N], U), (N, S, n, n))
    hx = np.broadcast_to(spec.terminal("h_x", Xbar[N], dW=driver.dW), (S, n))
    hxx = np.broadcast_to(spec.terminal("h_xx", Xbar[N], dW=driver.dW), (S, n, n))
    dl = np.broadcast_to(spec.l(tt, Xbar[:N], ex.u_eps), (N, S)) - np.broadcast_to(spec.l(tt, Xbar[:N], U), (N, S))
    terms = {}
    terms["lx_X1_X2"] = E((lx * (X1[:N] + X2[:N])).sum(axis=(0, 2)) * dt)
    terms["hx_X1_X2"] = E((hx * (X1[N] + X2[N])).sum(-1))
    terms["delta_l"] = E(dl.sum(axis=0) * dt)
    terms["lxx_X1"] = 0.5 * E(np.einsum("isk,iskl,isl->s", X1[:N], lxx, X1[:N]) * dt)
    terms["hxx_X1"] = 0.5 * E(np.einsum("sk,skl,sl->s", X1[N], hxx, X1[N]))
    terms["expansion"] = sum(terms[k] for k in ("lx_X1_X2", "hx_X1_X2", "delta_l", "lxx_X1", "hxx_X1"))
    J0 = eval_cost(spec, Xbar, U, driver)
    Xe = ex.X_eps if ex.X_eps is not None else solve_svie(spec, ex.u_eps, driver)
    terms["delta_J"] = eval_cost(spec, Xe, ex.u_eps, driver) - J0
    dH = 0.0
    for i in ex.window:
        dH += E(delta_H(spec, adjoint, Xbar, U, i, ex.u_eps[i], driver)) * dt
    terms["dH_integral"] = dH
    Q = np.broadcast_to(weights.Q, (N, S, n, n))
    G = np.broadcast_to(weights.G, (S, n, n))
    quad = E(np.einsum("isk,iskl,isl->s", X1[:N], Q, X1[:N]) * dt + np.einsum("sk,skl,sl->s", X1[N], G, X1[N]))
    terms["script_E"] = quad / (2 * ex.eps)
    terms["reduced"] = dH / ex.eps + terms["script_E"]
    # pairing of sigma_x increments with pi and Z
    acc = np.zeros(S)
    for j in ex.window:
        dsx_T = np.broadcast_to(spec.sigma_x(t[N], t[j], Xbar[j], ex.u_eps[j]), (S, n, n)) - np.broadcast_to(
            spec.sigma_x(t[N], t[j], Xbar[j], U[j]), (S, n, n)
        )
        v = (adjoint.pi[j][..., None, :] @ dsx_T)[..., 0, :]
        for r in range(j + 1, N):
            dsx = np.broadcast_to(spec.sigma_x(t[r], t[j], Xbar[j], ex.u_eps[j]), (S, n, n)) - np.broadcast_to(
                spec.sigma_x(t[r], t[j], Xbar[j], U[j]), (S, n, n)
            )
            v = v + (adjoint.Z[r, j][..., None, :] @ dsx)[..., 0, :] * dt
        acc += (v * X1[j]).sum(-1) * dt
    terms["o_eps_term"] = E(acc)
    return terms


# ---------------------------------------------------------------------------


@dataclass
class ConvergenceTable:
    """Rows of the small-window experiment, one per width."""

    rows: list

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def strictly_decreasing(self, name: str) -> bool:
        """Strict decrease along the listed order (largest width first)."""
        c = self.column(name)
        return bool(np.all(np.diff(c) < 0))

    def to_rows(self) -> list:
        return [dict(r) for r in self.rows]


def _expected_quadratic(weights, Xa, start, driver, XT=None):
    """``E[sum_{j>=start} Xa'Q Xa dt + XT'G XT]`` (unconditional)."""
    N, S, dt = driver.N, driver.S, driver.dt
    n = Xa.shape[-1]
    XT = Xa[N] if XT is None else XT
    Q = np.broadcast_to(weights.Q[start:N], (N - start, S, n, n))
    run = np.einsum("jsk,jskl,jsl->s", Xa[start:N], Q, Xa[start:N]) * dt
    term = np.einsum("sk,skl,sl->s", XT, np.broadcast_to(weights.G, (S, n, n)), XT)
    return float(driver.expect(run + term))


def asymptotic_experiment(
    spec: ProblemSpec,
    weights: QuadraticWeights,
    Xbar: np.ndarray,
    ubar,
    tau_idx: int,
    u,
    eps_list: Sequence[float],
    driver: NoiseDriver,
    lin: Optional[Linearization] = None,
) -> ConvergenceTable:
    """Quadratic forms of ``X1/sqrt(eps)``, ``Y1`` and their common limit.

    For each width ``eps = k dt``:

    * ``H_X1 = E[sum_{j>=tau+k} X1'QX1 dt + X1_N'GX1_N] / eps``;
    * ``Y2`` solves the linear SVIE from ``tau+k`` with forcing
      ``dsigma(., tau)``; ``Y1`` solves it with forcing
      ``eps^{-1/2} dsigma(., tau) (W(tau+eps) - W(tau))`` and must equal
      ``eps^{-1/2}(W(tau+eps)-W(tau)) Y2`` (``identity_residual``);
    * ``H_Y1`` is the same quadratic form of ``Y1`` without the ``1/eps``;
    * ``limit = E[F(tau)]`` from the direction solve started at ``tau``.
    """
    N, S, m = driver.N, driver.S, spec.m
    U = np.broadcast_to(control_values(ubar, driver, m), (N, S, m))
    if lin is None:
        lin = linearize(spec, Xbar, U, driver)
    tau = int(tau_idx)
    direction = spike_direction(spec, Xbar, U, tau, u, driver)
    XX = solve_linear_svie(LinearSVIEInput(tau, lin.A, lin.B, direction.values), driver)
    limit = _expected_quadratic(weights, XX, tau, driver)
    W = driver.W
    rows = []
    for e in eps_list:
        k = eps_steps(e, driver.grid)
        if tau + k > N:
            raise ValueError(f"width {e} at tau_idx={tau} leaves the grid")
        eps = k * driver.dt
        uu = np.broadcast_to(_point_or_array(u, S, m), (S, m))
        X1 = _first_variation(spec, Xbar, U, uu, tau, k, lin, driver)
        start = tau + k
        H_X1 = _expected_quadratic(weights, X1, start, driver) / eps
        psi2 = direction.values.copy()
        Y2 = solve_linear_svie(LinearSVIEInput(start, lin.A, lin.B, psi2), driver)
        scale = ((W[:, start] - W[:, tau]) / np.sqrt(eps))[None, :, None]
        Y1 = solve_linear_svie(LinearSVIEInput(start, lin.A, lin.B, psi2 * scale), driver)
        ident = float(np.max(np.abs(Y1[start:] - scale * Y2[start:]), initial=0.0))
        H_Y1 = _expected_quadratic(weights, Y1, start, driver)
        rows.append(
            {
                "eps": eps,
                "eps_steps": k,
                "H_X1": H_X1,
                "H_Y1": H_Y1,
                "limit": limit,
                "gap_X1_Y1": abs(H_X1 - H_Y1),
                "gap_Y1_limit": abs(H_Y1 - limit),
                "identity_residual": ident,
            }
        )
    return ConvergenceTable(rows)

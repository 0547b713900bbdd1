"""Second-order objects: quadratic weights, the quadratic functional of the
spike direction, the bilinear forms f1/f2, the matrix process B3, the
state-independent closed form, and the SDE cross-checks (P2 BSDE and the
bilinear form J).

Operator-valued processes are never built; every quantity is an evaluated
quadratic or bilinear form, with matrices recovered by basis solves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .adjoint import FirstOrderAdjoint, hessian_H
from .grid import NoiseDriver, cond_expect, martingale_integrand
from .problem import ProblemSpec
from .solver import LinearSVIEInput, Linearization, control_values, solve_linear_svie

__all__ = [
    "QuadraticWeights",
    "SpikeDirection",
    "B3Result",
    "BSDEIterationError",
    "quadratic_weights",
    "spike_direction",
    "quadratic_aggregate",
    "F_quadratic",
    "f1_bilinear",
    "f2_bilinear",
    "B3_matrix",
    "mqg",
    "sde_coefficients",
    "solve_second_order_bsde",
    "J_bilinear_sde",
    "B_state_independent",
]


class BSDEIterationError(RuntimeError):
    """Inner fixed-point iteration of the implicit scheme failed."""

    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = list(history)


@dataclass(eq=False)
class QuadraticWeights:
    """Running weight ``Q`` (N, S or 1, n, n) and terminal weight ``G`` (S or 1, n, n)."""

    Q: np.ndarray
    G: np.ndarray

    @property
    def n(self) -> int:
        return self.G.shape[-1]

    def symmetric(self, atol: float = 1e-12) -> bool:
        return bool(
            np.allclose(self.Q, np.swapaxes(self.Q, -1, -2), atol=atol)
            and np.allclose(self.G, np.swapaxes(self.G, -1, -2), atol=atol)
        )


def quadratic_weights(
    spec: ProblemSpec,
    Xbar: np.ndarray,
    ubar,
    driver: NoiseDriver,
    adjoint: Optional[FirstOrderAdjoint] = None,
) -> QuadraticWeights:
    """``Q(t_i) = H_xx(t_i)`` along the reference pair and ``G = h_xx(Xbar_N)``."""
    N, S, n = driver.N, driver.S, spec.n
    Q = np.stack([hessian_H(spec, adjoint, Xbar, ubar, i, driver) for i in range(N)])
    G = np.broadcast_to(np.asarray(spec.terminal("h_xx", Xbar[N], dW=driver.dW), dtype=float), (S, n, n))
    return QuadraticWeights(_compress_scen(Q, 1), _compress_scen(G, 0))


def _compress_scen(a, axis):
    first = np.take(a, [0], axis=axis)
    if np.array_equal(np.broadcast_to(first, a.shape), a):
        return np.ascontiguousarray(first)
    return np.ascontiguousarray(a)


@dataclass(eq=False)
class SpikeDirection:
    """``delta sigma(t_i, tau)`` for ``i >= tau``; zero rows before ``tau``.

    ``values`` has shape (N+1, S, n); ``values[N]`` is ``delta sigma(T, tau)``.
    """

    tau_idx: int
    values: np.ndarray
    u: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def first_argument_spread(self) -> float:
        """Max deviation of ``delta sigma(t_i, tau)`` from its value at ``tau``."""
        v = self.values[self.tau_idx :]
        return float(np.max(np.abs(v - v[:1]), initial=0.0))

    def is_zero(self) -> bool:
        return not np.any(self.values)


def spike_direction(spec: ProblemSpec, Xbar: np.ndarray, ubar, tau_idx: int, u, driver: NoiseDriver) -> SpikeDirection:
    """``sigma(t_i, tau, Xbar_tau, u) - sigma(t_i, tau, Xbar_tau, ubar_tau)``.

    ``u`` is a point of U (broadcast) or an ``F_tau``-measurable array (S, m).
    """
    N, S, n, m = driver.N, driver.S, spec.n, spec.m
    tau = int(tau_idx)
    if not 0 <= tau < N:
        raise IndexError(f"tau_idx={tau} outside 0..{N - 1}")
    t = driver.grid.t
    U = np.broadcast_to(control_values(ubar, driver, m), (N, S, m))
    uu = np.asarray(u, dtype=float)
    uu = np.broadcast_to(uu.reshape(-1)[None] if uu.ndim <= 1 else uu, (S, m))
    x = Xbar[tau]
    ti = t[tau:, None]
    d = np.broadcast_to(spec.sigma(ti, t[tau], x[None], uu[None]), (N + 1 - tau, S, n)) - np.broadcast_to(
        spec.sigma(ti, t[tau], x[None], U[tau][None]), (N + 1 - tau, S, n)
    )
    vals = np.zeros((N + 1, S, n))
    vals[tau:] = d
    return SpikeDirection(tau, vals, np.array(uu))


def quadratic_aggregate(weights: QuadraticWeights, X1, X2, tau: int, driver: NoiseDriver, XT1=None, XT2=None):
    """``E_tau[sum_{tau<=j<N} X1_j' Q_j X2_j dt + XT1' G XT2]`` per leaf, shape (S,).

    ``XT1``/``XT2`` default to ``X1[N]``/``X2[N]``.
    """
    N, dt = driver.N, driver.dt
    XT1 = X1[N] if XT1 is None else XT1
    XT2 = X2[N] if XT2 is None else XT2
    Q = weights.Q[tau:N]
    run = np.einsum("jsk,jskl,jsl->s", X1[tau:N], np.broadcast_to(Q, X1[tau:N].shape + (X1.shape[-1],)), X2[tau:N]) * dt
    term = np.einsum("sk,skl,sl->s", XT1, np.broadcast_to(weights.G, XT1.shape + (XT1.shape[-1],)), XT2)
    return cond_expect(driver, run + term, tau)


def F_quadratic(weights: QuadraticWeights, direction: SpikeDirection, lin: Linearization, driver: NoiseDriver) -> np.ndarray:
    """Quadratic functional of the spike direction, per leaf (S,).

    Solves ``XX_i = dsigma(t_i,tau) + sum_{tau<=j<i}[A_ij XX_j dt + B_ij XX_j dW_j]``
    and returns ``E_tau[sum_{j>=tau} XX_j'Q_j XX_j dt + XX_N' G XX_N]``.
    """
    tau = direction.tau_idx
    XX = solve_linear_svie(LinearSVIEInput(tau, lin.A, lin.B, direction.values), driver)
    return quadratic_aggregate(weights, XX, XX, tau, driver)


def _grid_function(a, driver, n):
    """Normalize the running part of a bilinear argument to (N+1, S or 1, n)."""
    N = driver.N
    if callable(a):
        return np.asarray(a(driver.grid.t), dtype=float).reshape(N + 1, 1, n)
    v = np.asarray(a, dtype=float)
    if v.ndim <= 1:
        return np.broadcast_to(v.reshape(1, 1, n), (N + 1, 1, n))
    if v.ndim == 2 and v.shape == (N + 1, n):
        return v[:, None, :]
    return v


def f1_bilinear(weights: QuadraticWeights, A, B, tau_idx: int, alpha, beta, driver: NoiseDriver) -> np.ndarray:
    """Bilinear form of two pairs ``alpha = (alpha1, alpha2(.))``.

    ``X^a`` solves the linear SVIE with forcing ``alpha2`` from ``tau``; the
    terminal object uses ``alpha1`` in place of ``alpha2(T)``.  Returns
    ``E_tau[sum X^a' Q X^b dt + XT^a' G XT^b]`` per leaf.  Entries of ``alpha``
    may be ``F_tau``-measurable arrays.
    """
    n = weights.n
    S = driver.S
    outs = []
    for a1, a2 in (alpha, beta):
        psi = _grid_function(a2, driver, n)
        a1v = np.broadcast_to(np.asarray(a1, dtype=float), (S, n)) if np.ndim(a1) else np.full((S, n), float(a1))
        outs.append(solve_linear_svie(LinearSVIEInput(tau_idx, A, B, psi, alpha1=a1v), driver))
    (Xa, XTa), (Xb, XTb) = outs
    return quadratic_aggregate(weights, Xa, Xb, tau_idx, driver, XTa, XTb)


def _constant_solve(A, B, tau, a, driver, n):
    psi = np.broadcast_to(np.asarray(a, dtype=float), (driver.S, n))[None]
    psi = np.broadcast_to(psi, (driver.N + 1, driver.S, n))
    return solve_linear_svie(LinearSVIEInput(tau, A, B, psi), driver)


def f2_bilinear(weights: QuadraticWeights, A, B, tau_idx: int, a1, a2, driver: NoiseDriver) -> np.ndarray:
    """Bilinear form with constant initial values ``a1``, ``a2`` (possibly ``F_tau``-measurable)."""
    n = weights.n
    X1 = _constant_solve(A, B, tau_idx, a1, driver, n)
    X2 = _constant_solve(A, B, tau_idx, a2, driver, n)
    return quadratic_aggregate(weights, X1, X2, tau_idx, driver)


def mqg(weights: QuadraticWeights, tau_idx: int, driver: NoiseDriver) -> np.ndarray:
    """``sqrt(E_tau sum_{j>=tau} |Q_j|^2 dt) + sqrt(E_tau |G|^2)`` (Frobenius norms)."""
    N, dt = driver.N, driver.dt
    q = (weights.Q[tau_idx:N] ** 2).sum(axis=(-1, -2)).sum(axis=0) * dt
    g = (weights.G ** 2).sum(axis=(-1, -2))
    q = np.broadcast_to(q, (driver.S,))
    g = np.broadcast_to(g, (driver.S,))
    return np.sqrt(cond_expect(driver, q, tau_idx)) + np.sqrt(cond_expect(driver, g, tau_idx))


@dataclass(eq=False)
class B3Result:
    """``values[s] = {f2(e_i, e_j)}`` per leaf (S, n, n) and the bound scale ``M^{Q,G}``."""

    values: np.ndarray
    mqg: np.ndarray

    @property
    def bound_ratio(self) -> float:
        """``max |B3| / M^{Q,G}`` over leaves (empirical constant K)."""
        nrm = np.linalg.norm(self.values, axis=(-1, -2))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(self.mqg > 0, nrm / self.mqg, 0.0)
        return float(np.max(r, initial=0.0))


def B3_matrix(weights: QuadraticWeights, A, B, tau_idx: int, driver: NoiseDriver) -> B3Result:
    """Matrix ``B3(tau) = {f2(e_i, e_j)}`` from ``n`` shared basis solves."""
    n = weights.n
    basis = [_constant_solve(A, B, tau_idx, np.eye(n)[k], driver, n) for k in range(n)]
    out = np.empty((driver.S, n, n))
    for i in range(n):
        for j in range(n):
            out[:, i, j] = quadratic_aggregate(weights, basis[i], basis[j], tau_idx, driver)
    return B3Result(out, mqg(weights, tau_idx, driver))


# ---------------------------------------------------------------------------
# SDE degeneration


def sde_coefficients(lin: Linearization, driver: NoiseDriver, atol: float = 1e-12):
    """One-time coefficients ``a_i = A(., t_i)``, ``beta_i = B(., t_i)``.

    Raises ``ValueError`` if ``A[k, i]`` depends on ``k > i``.
    """
    N = driver.N
    out = []
    for M in (lin.A, lin.B):
        rows = []
        for i in range(N):
            col = M[i + 1 :, i]
            if np.max(np.abs(col - col[:1]), initial=0.0) > atol:
                raise ValueError(f"coefficients depend on the first time argument at s-index {i}")
            rows.append(col[0])
        out.append(np.stack(rows))
    return out[0], out[1]


def solve_second_order_bsde(
    a,
    beta,
    weights: QuadraticWeights,
    driver: NoiseDriver,
    scheme: str = "exact",
    tol: float = 1e-14,
    max_iter: int = 100,
):
    """Backward induction for the matrix BSDE of the SDE case.

    Parameters
    ----------
    a, beta : ndarray, shape (N, S or 1, n, n)
        ``b_x(t_i)`` and ``sigma_x(t_i)``.
    weights : QuadraticWeights
        ``Q`` running and ``G`` terminal weights.
    scheme : {"exact", "implicit"}
        ``"exact"`` is the discrete dual of the Euler recursion,
        ``P_i = Q_i dt + M'P~M + dt[beta'P~beta + M'L beta + beta'L M]`` with
        ``M = I + a_i dt``, ``P~ = E_i P_{i+1}``, ``L`` the martingale integrand of
        ``P_{i+1}``.  ``"implicit"`` solves ``P_i = P~ + dt * drift(P_i, L)``
        by fixed-point iteration (first-order accurate).

    Returns
    -------
    P : ndarray, shape (N+1, S, n, n)
    Lam : ndarray, shape (N, S, n, n)
    """
    N, S, dt = driver.N, driver.S, driver.dt
    n = weights.n
    a = np.broadcast_to(np.asarray(a, dtype=float), (N, S, n, n))
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (N, S, n, n))
    Q = np.broadcast_to(weights.Q, (N, S, n, n))
    P = np.empty((N + 1, S, n, n))
    Lam = np.empty((N, S, n, n))
    P[N] = np.broadcast_to(weights.G, (S, n, n))
    I = np.eye(n)
    tr = lambda M: np.swapaxes(M, -1, -2)
    for i in range(N - 1, -1, -1):
        Pt = cond_expect(driver, P[i + 1], i)
        L = martingale_integrand(driver, P[i + 1], i)
        Lam[i] = L
        ai, bi = a[i], beta[i]
        if scheme == "exact":
            M = I + ai * dt
            P[i] = (
                Q[i] * dt
                + tr(M) @ Pt @ M
                + dt * (tr(bi) @ Pt @ bi + tr(M) @ L @ bi + tr(bi) @ L @ M)
            )
        elif scheme == "implicit":
            Pi = Pt.copy()
            hist = []
            for _ in range(max_iter):
                new = Pt + dt * (tr(ai) @ Pi + Pi @ ai + tr(bi) @ L + L @ bi + Q[i] + tr(bi) @ Pi @ bi)
                ch = float(np.max(np.abs(new - Pi), initial=0.0))
                hist.append(ch)
                Pi = new
                if ch < tol * max(1.0, float(np.max(np.abs(Pi), initial=0.0))):
                    break
            else:
                raise BSDEIterationError(f"implicit step at i={i} did not converge", hist)
            P[i] = Pi
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
    return P, Lam


def J_bilinear_sde(a, beta, weights: QuadraticWeights, tau_idx: int, xi1, xi2, driver: NoiseDriver) -> np.ndarray:
    """``E_tau[sum_{j>=tau} Y1'QY2 dt + Y1_N' G Y2_N]`` with Euler SDE states.

    ``Y_{k+1} = Y_k + a_k Y_k dt + beta_k Y_k dW_k`` from ``Y_tau = xi``;
    ``xi`` may be a vector or an ``F_tau``-measurable array (S, n).
    """
    N, S, dt = driver.N, driver.S, driver.dt
    n = weights.n
    a = np.broadcast_to(np.asarray(a, dtype=float), (N, S, n, n))
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (N, S, n, n))
    tau = int(tau_idx)
    states = []
    for xi in (xi1, xi2):
        Y = np.zeros((N + 1, S, n))
        Y[tau] = np.broadcast_to(np.asarray(xi, dtype=float), (S, n))
        for k in range(tau, N):
            Y[k + 1] = Y[k] + (a[k] @ Y[k][..., None])[..., 0] * dt + (beta[k] @ Y[k][..., None])[..., 0] * driver.dW[:, k, None]
        states.append(Y)
    return quadratic_aggregate(weights, states[0], states[1], tau, driver)


def _assert_x_free(spec: ProblemSpec, driver: NoiseDriver, samples: int = 16, seed: int = 0):
    rng = np.random.default_rng(seed)
    T = driver.grid.T
    t = T * rng.random(samples)
    s = t * rng.random(samples)
    x = rng.standard_normal((samples, spec.n))
    u = spec.control_set.grid(3)[rng.integers(0, len(spec.control_set.grid(3)), samples)]
    for nm in ("b_x", "sigma_x"):
        if np.any(np.asarray(getattr(spec, nm)(t, s, x, u)) != 0):
            raise ValueError(f"{nm} is not identically zero; use F_quadratic for state-dependent coefficients")


def B_state_independent(spec: ProblemSpec, weights: QuadraticWeights, direction: SpikeDirection, driver: NoiseDriver) -> np.ndarray:
    """Closed form of the quadratic term when ``b``, ``sigma`` do not depend on ``x``.

    ``dsigma(T,t)' E_t[G] dsigma(T,t) + sum_{j>=i} dsigma(t_j,t)' E_t[Q_j] dsigma(t_j,t) dt``.
    """
    _assert_x_free(spec, driver)
    N, S, dt = driver.N, driver.S, driver.dt
    n = weights.n
    i = direction.tau_idx
    d = direction.values
    EG = cond_expect(driver, np.broadcast_to(weights.G, (S, n, n)), i)
    out = np.einsum("sk,skl,sl->s", d[N], EG, d[N])
    for j in range(i, N):
        EQ = cond_expect(driver, np.broadcast_to(weights.Q[j], (S, n, n)), i)
        out = out + np.einsum("sk,skl,sl->s", d[j], EQ, d[j]) * dt
    return out

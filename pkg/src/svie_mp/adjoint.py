"""First-order adjoint: pi, the M-solution (Y, Z) of the linear BSVIE, and the
Hamiltonian with its increments and Hessian.

The discrete adjoint is the exact dual of the left-point scheme.  With
``A[j, i] = b_x(t_j, t_i)``, ``B[j, i] = sigma_x(t_j, t_i)`` along the reference
pair, and

    R_i = l_x(t_i) + A[N,i]' h_x + B[N,i]' pi_i
          + sum_{i<j<N} (A[j,i]' Y_j + B[j,i]' Z[j,i]) dt,

one sets ``Y_i = E_i[R_i]``; ``Z[i, j]`` (``j >= i``) is the martingale integrand
of ``R_i`` at step ``j`` and ``Z[i, j]`` (``j < i``) that of ``Y_i``.  On the
tree this makes ``E[sum_i l_x.dX_i dt + h_x.dX_N] = E[sum_i Y_i.psi_i dt + h_x.psi_N]``
hold exactly for every linear perturbation with forcing ``psi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grid import NoiseDriver, cond_expect, martingale_integrand
from .problem import ProblemSpec
from .solver import Linearization, control_values, linearize

__all__ = [
    "AdjointIterationError",
    "FirstOrderAdjoint",
    "compute_pi_bar",
    "solve_first_order_adjoint",
    "hamiltonian",
    "delta_H",
    "hessian_H",
    "hamiltonian_u",
]


class AdjointIterationError(RuntimeError):
    """Picard iteration did not reach the tolerance; carries the history."""

    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = list(history)


@dataclass(eq=False)
class FirstOrderAdjoint:
    """Solution of the first-order adjoint equation.

    Attributes
    ----------
    Y : ndarray, shape (N, S, n)
    Z : ndarray, shape (N, N, S, n)
        ``Z[i, j] = Z(t_i, s_j)``.
    pi : ndarray, shape (N, S, n)
    hx : ndarray, shape (S, n)
        ``h_x(Xbar_N)``.
    iterations : int
        Picard updates that changed the iterate by at least ``tol``.
    residual : float
        Max nodewise residual of the discrete BSVIE.
    history : list of float
        Sup-norm change per Picard update.
    """

    Y: np.ndarray
    Z: np.ndarray
    pi: np.ndarray
    hx: np.ndarray
    iterations: int
    residual: float
    history: list
    driver: NoiseDriver
    method: str = "picard"
    lin: Optional[Linearization] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def E_hx(self, i: int) -> np.ndarray:
        key = ("hx", i)
        if key not in self._cache:
            self._cache[key] = cond_expect(self.driver, self.hx, i)
        return self._cache[key]

    def E_Y(self, i: int) -> np.ndarray:
        """``E_i[Y_j]`` for ``j = i+1..N-1``, shape (N-1-i, S, n)."""
        key = ("Y", i)
        if key not in self._cache:
            N = self.driver.N
            vals = [cond_expect(self.driver, self.Y[j], i) for j in range(i + 1, N)]
            n = self.Y.shape[-1]
            self._cache[key] = np.stack(vals) if vals else np.zeros((0, self.Y.shape[1], n))
        return self._cache[key]


def compute_pi_bar(spec: ProblemSpec, Xbar: np.ndarray, driver: NoiseDriver) -> np.ndarray:
    """Martingale-representation integrand of ``h_x(Xbar_N)``, shape (N, S, n).

    ``h_x(Xbar_N) = E[h_x] + sum_j pi_j dW_j`` holds exactly on the tree.
    """
    hx = np.broadcast_to(
        np.asarray(spec.terminal("h_x", Xbar[driver.N], dW=driver.dW), dtype=float), (driver.S, spec.n)
    )
    return np.stack([martingale_integrand(driver, hx, j) for j in range(driver.N)])


def _AtY(A, Y):
    """``A' y`` for stacked matrices ``A (..., n, n)`` and vectors ``Y (..., n)``."""
    return (np.swapaxes(A, -1, -2) @ Y[..., None])[..., 0]


def solve_first_order_adjoint(
    spec: ProblemSpec,
    Xbar: np.ndarray,
    ubar,
    driver: NoiseDriver,
    tol: Optional[float] = None,
    max_iter: int = 200,
    method: str = "picard",
    lin: Optional[Linearization] = None,
) -> FirstOrderAdjoint:
    """Solve the linear BSVIE for ``(Y, Z)`` in the M-solution sense.

    Parameters
    ----------
    spec, Xbar, ubar, driver
        Reference pair and noise.
    tol : float, optional
        Sup-norm stopping tolerance; defaults to 1e-10 (tree) or 1e-6 (MC).
    max_iter : int
        Maximal Picard updates.
    method : {"picard", "backward"}
        ``"backward"`` sweeps ``i = N-1..0`` once, using the triangular
        structure of the equation; it is the cross-check of the iteration.
    lin : Linearization, optional
        Precomputed ``b_x``/``sigma_x`` tables.

    Raises
    ------
    AdjointIterationError
        If the Picard iteration stalls above ``tol``.
    """
    N, S, n, dt = driver.N, driver.S, spec.n, driver.dt
    if tol is None:
        tol = 1e-10 if driver.is_tree else 1e-6
    U = control_values(ubar, driver, spec.m)
    if lin is None:
        lin = linearize(spec, Xbar, U, driver)
    A, B = lin.A, lin.B
    t = driver.grid.t
    lx = np.broadcast_to(
        np.asarray(spec.l_x(t[:N].reshape(N, 1), Xbar[:N], np.broadcast_to(U, (N, S, spec.m))), dtype=float),
        (N, S, n),
    )
    hx = np.broadcast_to(np.asarray(spec.terminal("h_x", Xbar[N], dW=driver.dW), dtype=float), (S, n)).copy()
    pi = np.stack([martingale_integrand(driver, hx, j) for j in range(N)])
    base = lx + _AtY(A[N, :N], hx[None]) + _AtY(B[N, :N], pi)

    def aggregate(i, Y, Z):
        R = base[i].copy()
        if i + 1 < N:
            js = slice(i + 1, N)
            R += (_AtY(A[js, i], Y[js]) + _AtY(B[js, i], Z[js, i])).sum(axis=0) * dt
        return R

    def update_row(i, R):
        Yi = cond_expect(driver, R, i)
        Zi = np.empty((N, S, n))
        for j in range(N):
            Zi[j] = martingale_integrand(driver, R if j >= i else Yi, j)
        return Yi, Zi

    def sweep(Y, Z):
        # one Picard update; projections at index j are shared by all rows
        R = np.stack([aggregate(i, Y, Z) for i in range(N)])
        Yn = np.stack([cond_expect(driver, R[i], i) for i in range(N)])
        Zn = np.empty((N, N, S, n))
        for j in range(N):
            V = np.concatenate([R[: j + 1], Yn[j + 1 :]], axis=0)
            Zn[:, j] = np.moveaxis(martingale_integrand(driver, np.moveaxis(V, 0, 1), j), 1, 0)
        return Yn, Zn

    history = []
    Y = np.zeros((N, S, n))
    Z = np.zeros((N, N, S, n))
    if method == "backward":
        for i in range(N - 1, -1, -1):
            Y[i], Z[i] = update_row(i, aggregate(i, Y, Z))
        iterations = 1
    elif method == "picard":
        iterations = 0
        for _ in range(max_iter):
            Yn, Zn = sweep(Y, Z)
            change = max(float(np.max(np.abs(Yn - Y), initial=0.0)), float(np.max(np.abs(Zn - Z), initial=0.0)))
            history.append(change)
            Y, Z = Yn, Zn
            if change < tol:
                break
            iterations += 1
        else:
            raise AdjointIterationError(
                f"Picard iteration did not reach tol={tol:.1e} in {max_iter} updates "
                f"(last change {history[-1]:.3e})",
                history,
            )
    else:
        raise ValueError(f"unknown method {method!r}")

    # residual of Y_i = R_i - sum_{j>=i} Z[i,j] dW_j
    res = 0.0
    dWt = driver.dW.T[:, :, None]
    for i in range(N):
        R = aggregate(i, Y, Z)
        r = Y[i] - (R - (Z[i, i:] * dWt[i:]).sum(axis=0))
        res = max(res, float(np.max(np.abs(r), initial=0.0)))
    return FirstOrderAdjoint(Y, Z, pi, hx, iterations, res, history, driver, method, lin)


# ---------------------------------------------------------------------------
# Hamiltonian


def _point(v, S, d):
    a = np.asarray(v, dtype=float)
    if a.ndim <= 1:
        a = np.broadcast_to(a.reshape(-1), (d,))[None]
    return np.broadcast_to(a, (S, d))


def hamiltonian(
    spec: ProblemSpec,
    adjoint: FirstOrderAdjoint,
    Xbar: np.ndarray,
    t_idx: int,
    x,
    u,
    driver: NoiseDriver,
    expect_sigma_term: bool = False,
) -> np.ndarray:
    """Nodewise Hamiltonian at time index ``t_idx``.

    ``H = l(t,x,u) + E_t[b(T,t,x,u)'h_x + sigma(T,t,x,u)'pi_t]
    + E_t sum_{j>i} b(t_j,t,x,u)'Y_j dt + sum_{j>i} sigma(t_j,t,x,u)'Z(t_j,t) dt``.

    ``x`` and ``u`` are points (broadcast) or ``F_t``-measurable arrays of
    shape (S, n) / (S, m).  With ``expect_sigma_term`` the last sum is also
    wrapped in ``E_t``; it is already ``F_t``-measurable, so this only matters
    for regression-based expectations.

    Returns
    -------
    ndarray, shape (S,)
    """
    N, S, dt = driver.N, driver.S, driver.dt
    i = int(t_idx)
    if not 0 <= i < N:
        raise IndexError(f"t_idx={i} outside 0..{N - 1}")
    t = driver.grid.t
    x = _point(x, S, spec.n)
    u = _point(u, S, spec.m)
    H = np.broadcast_to(np.asarray(spec.l(t[i], x, u), dtype=float), (S,)).copy()
    bT = np.broadcast_to(spec.b(t[N], t[i], x, u), (S, spec.n))
    sT = np.broadcast_to(spec.sigma(t[N], t[i], x, u), (S, spec.n))
    H += (bT * adjoint.E_hx(i)).sum(-1) + (sT * adjoint.pi[i]).sum(-1)
    if i + 1 < N:
        tj = t[i + 1 : N, None]
        bj = np.broadcast_to(spec.b(tj, t[i], x[None], u[None]), (N - 1 - i, S, spec.n))
        sj = np.broadcast_to(spec.sigma(tj, t[i], x[None], u[None]), (N - 1 - i, S, spec.n))
        H += (bj * adjoint.E_Y(i)).sum(axis=(0, 2)) * dt
        zterm = (sj * adjoint.Z[i + 1 : N, i]).sum(axis=(0, 2)) * dt
        H += cond_expect(driver, zterm, i) if expect_sigma_term else zterm
    return H


def delta_H(
    spec: ProblemSpec,
    adjoint: FirstOrderAdjoint,
    Xbar: np.ndarray,
    ubar,
    t_idx: int,
    u,
    driver: NoiseDriver,
    expect_sigma_term: bool = False,
) -> np.ndarray:
    """``H(t, Xbar_t, u) - H(t, Xbar_t, ubar_t)`` per leaf, shape (S,)."""
    U = np.broadcast_to(control_values(ubar, driver, spec.m), (driver.N, driver.S, spec.m))
    i = int(t_idx)
    x = Xbar[i]
    return hamiltonian(spec, adjoint, Xbar, i, x, u, driver, expect_sigma_term) - hamiltonian(
        spec, adjoint, Xbar, i, x, U[i], driver, expect_sigma_term
    )


def _contract(T3, y):
    """``sum_k y_k T3[k, l, r]`` for ``T3 (..., n, n, n)`` and ``y (..., n)``."""
    return np.einsum("...k,...klr->...lr", y, T3)


def hessian_H(
    spec: ProblemSpec,
    adjoint: Optional[FirstOrderAdjoint],
    Xbar: np.ndarray,
    ubar,
    t_idx: int,
    driver: NoiseDriver,
) -> np.ndarray:
    """Hessian of the Hamiltonian in ``x`` along the reference pair.

    ``l_xx + E_t[b_xx(T,t).h_x] + sigma_xx(T,t).pi_t
    + sum_{j>i} [b_xx(t_j,t).E_t Y_j + sigma_xx(t_j,t).Z(t_j,t)] dt``
    where ``f_xx.y = sum_k y_k d^2 f_k``.  ``adjoint`` may be ``None`` when
    ``b`` and ``sigma`` are affine in ``x``.

    Returns
    -------
    ndarray, shape (S, n, n)
    """
    N, S, n, dt = driver.N, driver.S, spec.n, driver.dt
    i = int(t_idx)
    t = driver.grid.t
    U = np.broadcast_to(control_values(ubar, driver, spec.m), (N, S, spec.m))
    x, u = Xbar[i], U[i]
    Hxx = np.broadcast_to(np.asarray(spec.l_xx(t[i], x, u), dtype=float), (S, n, n)).copy()
    curved = spec.b_xx is not None or spec.sigma_xx is not None
    if not curved:
        return Hxx
    if adjoint is None:
        raise ValueError("adjoint required when b or sigma has second derivatives")
    if spec.b_xx is not None:
        Hxx += _contract(np.broadcast_to(spec.b_xx(t[N], t[i], x, u), (S, n, n, n)), adjoint.E_hx(i))
        if i + 1 < N:
            bj = np.broadcast_to(spec.b_xx(t[i + 1 : N, None], t[i], x[None], u[None]), (N - 1 - i, S, n, n, n))
            Hxx += _contract(bj, adjoint.E_Y(i)).sum(axis=0) * dt
    if spec.sigma_xx is not None:
        Hxx += _contract(np.broadcast_to(spec.sigma_xx(t[N], t[i], x, u), (S, n, n, n)), adjoint.pi[i])
        if i + 1 < N:
            sj = np.broadcast_to(spec.sigma_xx(t[i + 1 : N, None], t[i], x[None], u[None]), (N - 1 - i, S, n, n, n))
            Hxx += _contract(sj, adjoint.Z[i + 1 : N, i]).sum(axis=0) * dt
    return Hxx


def hamiltonian_u(
    spec: ProblemSpec,
    adjoint: FirstOrderAdjoint,
    Xbar: np.ndarray,
    ubar,
    t_idx: int,
    driver: NoiseDriver,
    fd_step: float = 1e-6,
) -> np.ndarray:
    """Gradient ``H_u`` at ``(Xbar_t, ubar_t)``, shape (S, m).

    Uses ``b_u``, ``sigma_u``, ``l_u`` when all are supplied, otherwise a
    central finite difference of :func:`hamiltonian` in ``u``.
    """
    N, S, m, dt = driver.N, driver.S, spec.m, driver.dt
    i = int(t_idx)
    t = driver.grid.t
    U = np.broadcast_to(control_values(ubar, driver, m), (N, S, m))
    x, u = Xbar[i], U[i]
    if spec.b_u is None or spec.sigma_u is None or spec.l_u is None:
        cols = []
        for r in range(m):
            e = np.zeros(m)
            e[r] = fd_step
            hp = hamiltonian(spec, adjoint, Xbar, i, x, u + e, driver)
            hm = hamiltonian(spec, adjoint, Xbar, i, x, u - e, driver)
            cols.append((hp - hm) / (2 * fd_step))
        return np.stack(cols, axis=-1)
    Hu = np.broadcast_to(np.asarray(spec.l_u(t[i], x, u), dtype=float), (S, m)).copy()
    Hu += _AtY(np.broadcast_to(spec.b_u(t[N], t[i], x, u), (S, spec.n, m)), adjoint.E_hx(i))
    Hu += _AtY(np.broadcast_to(spec.sigma_u(t[N], t[i], x, u), (S, spec.n, m)), adjoint.pi[i])
    if i + 1 < N:
        k = N - 1 - i
        bj = np.broadcast_to(spec.b_u(t[i + 1 : N, None], t[i], x[None], u[None]), (k, S, spec.n, m))
        sj = np.broadcast_to(spec.sigma_u(t[i + 1 : N, None], t[i], x[None], u[None]), (k, S, spec.n, m))
        Hu += (_AtY(bj, adjoint.E_Y(i)) + _AtY(sj, adjoint.Z[i + 1 : N, i])).sum(axis=0) * dt
    return Hu

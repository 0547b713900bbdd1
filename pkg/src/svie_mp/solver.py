"""Left-point Euler solvers for controlled and linear SVIEs, cost and stability.

Array conventions: states ``X`` have shape ``(N+1, S, n)``, controls ``u``
``(N, S, m)`` (index ``N`` is never used by the scheme).  A leading axis of
length one stands for a deterministic quantity.  Controls and states may carry
extra batch axes between the time axis and the scenario axis, e.g. ``u`` of
shape ``(N, K, S, m)`` simulates ``K`` controls at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .grid import NoiseDriver
from .problem import ProblemSpec

__all__ = [
    "NumericalError",
    "LinearSVIEInput",
    "Linearization",
    "StabilityReport",
    "phi_values",
    "control_values",
    "solve_svie",
    "solve_linear_svie",
    "eval_cost",
    "path_cost",
    "stability_check",
    "linearize",
    "compress",
]


class NumericalError(FloatingPointError):
    """Non-finite value produced by a coefficient; carries the (i, j) location."""

    def __init__(self, msg, location=None):
        super().__init__(msg)
        self.location = location


def compress(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Collapse ``axis`` to length one when all entries along it are equal."""
    a = np.asarray(a)
    if a.shape[axis] > 1:
        first = np.take(a, [0], axis=axis)
        if np.array_equal(np.broadcast_to(first, a.shape), a):
            return first
    return a


def phi_values(spec: ProblemSpec, driver: NoiseDriver) -> np.ndarray:
    """Initial term on the grid, shape ``(N+1, S or 1, n)``."""
    N, n = driver.N, spec.n
    if callable(spec.phi):
        v = np.asarray(spec.phi(driver.grid.t), dtype=float)
        v = np.broadcast_to(v.reshape(N + 1, -1)[:, :n] if v.ndim == 1 else v, (N + 1, n))
        return np.ascontiguousarray(v[:, None, :])
    v = np.asarray(spec.phi, dtype=float)
    if v.ndim == 2:
        v = v[:, None, :]
    if v.shape[0] != N + 1 or v.shape[-1] != n:
        raise ValueError(f"phi array has shape {v.shape}, expected (N+1, S|1, n)")
    return v


def control_values(u, driver: NoiseDriver, m: int) -> np.ndarray:
    """Normalize a control to shape ``(N, ..., S or 1, m)``.

    Accepts a scalar or ``(m,)`` constant, an ``(N, m)`` deterministic path,
    or an adapted array ``(N, S, m)`` (optionally with batch axes).
    """
    N = driver.N
    if callable(u):
        u = np.asarray(u(driver.grid.t[:N]), dtype=float).reshape(N, 1, m)
        return u
    a = np.asarray(u, dtype=float)
    if a.ndim == 0 or (a.ndim == 1 and a.shape[0] == m and N != m):
        return np.broadcast_to(a.reshape(1, 1, m), (N, 1, m)).copy()
    if a.ndim == 1:
        return a.reshape(N, 1, m) if m == 1 else np.broadcast_to(a.reshape(1, 1, m), (N, 1, m)).copy()
    if a.ndim == 2:
        if a.shape == (N, m):
            return a[:, None, :]
        if m == 1 and a.shape[0] == N:
            return a[..., None]
    if a.shape[0] != N + 1 and a.shape[0] != N:
        raise ValueError(f"control has shape {a.shape}, expected leading axis N={N}")
    if a.shape[-1] != m:
        raise ValueError(f"control has last axis {a.shape[-1]}, expected m={m}")
    return a[:N]


def _check_finite(v, what, i, j=None):
    if not np.all(np.isfinite(v)):
        loc = (i, j) if j is not None else (i,)
        if j is None and np.ndim(v) >= 1:
            bad = np.argwhere(~np.isfinite(np.asarray(v)))[0]
            loc = (i, int(bad[0]))
        raise NumericalError(f"non-finite {what} at (i, j) = {loc}", loc)


def solve_svie(spec: ProblemSpec, u, driver: NoiseDriver, check_controls: bool = False) -> np.ndarray:
    """Left-point Euler solution of the controlled SVIE.

    ``X_i = phi_i + sum_{j<i} [b(t_i,t_j,X_j,u_j) dt + sigma(t_i,t_j,X_j,u_j) dW_j]``.

    Parameters
    ----------
    spec : ProblemSpec
    u : array_like
        Adapted control, see :func:`control_values`.
    driver : NoiseDriver
    check_controls : bool
        Verify ``u`` lies in the control set.

    Returns
    -------
    X : ndarray, shape ``(N+1, ..., S, n)``
    """
    N, dt = driver.N, driver.dt
    t = driver.grid.t
    U = control_values(u, driver, spec.m)
    if check_controls and not np.all(spec.control_set.contains(U)):
        raise ValueError("control takes values outside the control set")
    phi = phi_values(spec, driver)
    lead = np.broadcast_shapes(U.shape[1:-1], (driver.S,))
    U = np.broadcast_to(U, (N,) + lead + (spec.m,))
    X = np.empty((N + 1,) + lead + (spec.n,))
    X[:] = phi[(slice(None),) + (None,) * (len(lead) - 1)] if len(lead) > 1 else phi
    extra = (1,) * len(lead)
    dW = driver.dW.T  # (N, S)
    for i in range(1, N + 1):
        s = t[:i].reshape((i,) + extra)
        bv = np.asarray(spec.b(t[i], s, X[:i], U[:i]), dtype=float)
        sv = np.asarray(spec.sigma(t[i], s, X[:i], U[:i]), dtype=float)
        if not (np.all(np.isfinite(bv)) and np.all(np.isfinite(sv))):
            bad = np.argwhere(~np.isfinite(bv + sv))[0]
            raise NumericalError(f"non-finite coefficient at (i, j) = ({i}, {int(bad[0])})", (i, int(bad[0])))
        bv = np.broadcast_to(bv, (i,) + lead + (spec.n,))
        sv = np.broadcast_to(sv, (i,) + lead + (spec.n,))
        w = dW[:i].reshape((i,) + (1,) * (len(lead) - 1) + (driver.S, 1))
        X[i] = X[i] + bv.sum(axis=0) * dt + (sv * w).sum(axis=0)
    return X


@dataclass
class LinearSVIEInput:
    """Data of ``X_i = psi_i + sum_{tau<=j<i}[A_ij X_j dt + (B_ij X_j + g_ij) dW_j]``.

    Attributes
    ----------
    tau : int
        Start index.
    A, B : ndarray, shape (N+1, N+1, S or 1, n, n)
        Two-time coefficients ``A(t_i, s_j)``; only ``j < i`` entries are read.
    psi : ndarray, shape (N+1, S or 1, n)
        Forcing; only ``i >= tau`` entries are read.
    g : ndarray, shape (N+1, N+1, S or 1, n), optional
        Extra integrand inside the stochastic sum.
    alpha1 : ndarray, shape (S or 1, n), optional
        Separate terminal component replacing ``psi_N`` in the terminal object.
    """

    tau: int
    A: np.ndarray
    B: np.ndarray
    psi: np.ndarray
    g: Optional[np.ndarray] = None
    alpha1: Optional[np.ndarray] = None


def solve_linear_svie(inp: LinearSVIEInput, driver: NoiseDriver, backend: Optional[str] = None):
    """Solve a linear SVIE from ``inp.tau`` onward.

    Returns
    -------
    X : ndarray, shape (N+1, S, n)
        Zero before ``tau``.
    X_T : ndarray, shape (S, n)
        Only when ``inp.alpha1`` is given: the terminal object built with
        ``alpha1`` in place of ``psi_N``.
    """
    N, S, dt = driver.N, driver.S, driver.dt
    tau = int(inp.tau)
    if not 0 <= tau <= N:
        raise IndexError(f"tau={tau} outside 0..{N}")
    A = np.asarray(inp.A, dtype=float)
    B = np.asarray(inp.B, dtype=float)
    n = A.shape[-1]
    psi = np.asarray(inp.psi, dtype=float)
    if psi.ndim == 2:
        psi = psi[:, None, :]
    psi = np.broadcast_to(psi, (N + 1, S, n)).copy()
    psi[:tau] = 0.0
    if inp.g is not None:
        g = np.asarray(inp.g, dtype=float)
        dWt = driver.dW.T[:, :, None]  # (N, S, 1)
        for i in range(tau + 1, N + 1):
            psi[i] += (g[i, tau:i] * dWt[tau:i]).sum(axis=0)
    _check_finite(psi, "forcing", tau)
    X = kernels.linear_volterra(psi, A, B, driver.dW, dt, tau, backend=backend)
    _check_finite(X, "state", N)
    if inp.alpha1 is None:
        return X
    a1 = np.broadcast_to(np.asarray(inp.alpha1, dtype=float), (S, n))
    return X, X[N] - psi[N] + a1


def path_cost(spec: ProblemSpec, X: np.ndarray, u, driver: NoiseDriver) -> np.ndarray:
    """Per-scenario cost ``h(X_N) + sum_{i<N} l(t_i, X_i, u_i) dt``."""
    N, dt = driver.N, driver.dt
    U = control_values(u, driver, spec.m)
    lead = X.shape[1:-1]
    U = np.broadcast_to(U, (N,) + lead + (spec.m,))
    t = driver.grid.t[:N].reshape((N,) + (1,) * len(lead))
    run = np.asarray(spec.l(t, X[:N], U), dtype=float)
    run = np.broadcast_to(run, (N,) + lead).sum(axis=0) * dt
    term = np.asarray(spec.terminal("h", X[N], dW=driver.dW), dtype=float)
    return np.broadcast_to(term, lead) + run


def eval_cost(spec: ProblemSpec, X: np.ndarray, u, driver: NoiseDriver):
    """Expected cost ``E[h(X_N) + sum_i l(t_i,X_i,u_i) dt]`` (exact on the tree).

    Returns a float, or an array over batch axes when ``X`` carries them.
    """
    C = path_cost(spec, X, u, driver)
    C = np.broadcast_to(C, C.shape[:-1] + (driver.S,))
    J = C @ driver.weights
    return float(J) if np.ndim(J) == 0 else J


# ---------------------------------------------------------------------------
# linearization along a reference pair


@dataclass
class Linearization:
    """Coefficients along ``(Xbar, ubar)``.

    ``A[i, j] = b_x(t_i, t_j, Xbar_j, ubar_j)`` and ``B[i, j] = sigma_x(...)``
    for ``j < i`` (zero otherwise), shape ``(N+1, N+1, S or 1, n, n)``.
    ``Axx``/``Bxx`` hold second derivatives when requested, else ``None``.
    """

    A: np.ndarray
    B: np.ndarray
    Axx: Optional[np.ndarray] = None
    Bxx: Optional[np.ndarray] = None

    @property
    def deterministic(self) -> bool:
        return self.A.shape[2] == 1 and self.B.shape[2] == 1


def _pair_table(f, spec, driver, X, U, tail_shape, upper=False):
    """Table ``f(t_i, t_j, X_j, U_j)`` for ``j < i`` (or all pairs)."""
    N = driver.N
    t = driver.grid.t
    rows = []
    scen = 1
    for i in range(N + 1):
        k = N if upper else i
        if k == 0:
            rows.append(None)
            continue
        v = np.asarray(f(t[i], t[:k, None], X[:k], U[:k]), dtype=float)
        v = np.broadcast_to(v, (k, max(X.shape[1], U.shape[1])) + tail_shape)
        v = compress(v, axis=1)
        scen = max(scen, v.shape[1])
        rows.append(v)
    out = np.zeros((N + 1, N + 1, scen) + tail_shape)
    for i, v in enumerate(rows):
        if v is not None:
            out[i, : v.shape[0]] = v
    _check_finite(out, f"coefficient {getattr(f, '__name__', '')}", 0)
    return out


def linearize(spec: ProblemSpec, X: np.ndarray, u, driver: NoiseDriver, second: bool = False) -> Linearization:
    """Evaluate ``b_x``, ``sigma_x`` (and optionally second derivatives)."""
    n = spec.n
    U = control_values(u, driver, spec.m)
    A = _pair_table(spec.b_x, spec, driver, X, U, (n, n))
    B = _pair_table(spec.sigma_x, spec, driver, X, U, (n, n))
    Axx = Bxx = None
    if second:
        if spec.b_xx is not None:
            Axx = _pair_table(spec.b_xx, spec, driver, X, U, (n, n, n))
        if spec.sigma_xx is not None:
            Bxx = _pair_table(spec.sigma_xx, spec, driver, X, U, (n, n, n))
    return Linearization(A, B, Axx, Bxx)


# ---------------------------------------------------------------------------
# stability estimates with p = 2


@dataclass
class StabilityReport:
    sup_second_moment: float
    bound_rhs: float
    K_hat_bound: float
    sup_diff: float
    diff_rhs: float
    K_hat_diff: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def stability_check(spec: ProblemSpec, perturbed_spec: ProblemSpec, u, driver: NoiseDriver) -> StabilityReport:
    """Both sides of the discrete second-moment and stability estimates.

    For ``X`` solving ``spec`` the bound side is
    ``sup_i E|phi_i|^2 + sup_i E sum_{j<i}|b(t_i,t_j,0,u_j)|^2 dt
    + sup_i E sum_{j<i}|sigma(t_i,t_j,0,u_j)|^2 dt`` and ``K_hat = sup_i E|X_i|^2 / bound``.
    For the difference ``X - X'`` (``X'`` solving ``perturbed_spec``) the
    right side is ``sup E|phi-phi'|^2 + sup_i E(sum_j |b-b'|(t_i,t_j,X'_j,u_j) dt)^2
    + sup_i E sum_j |sigma-sigma'|^2 dt``.  Empirical ratios are evidence only.
    """
    N, dt = driver.N, driver.dt
    t = driver.grid.t
    U = np.broadcast_to(control_values(u, driver, spec.m), (N, driver.S, spec.m))
    X1 = solve_svie(spec, U, driver)
    X2 = solve_svie(perturbed_spec, U, driver)
    E = driver.expect
    sq = lambda v: (np.asarray(v) ** 2).sum(axis=-1)
    lhs1 = max(float(E(sq(X1[i]))) for i in range(N + 1))
    phi1 = np.broadcast_to(phi_values(spec, driver), (N + 1, driver.S, spec.n))
    phi2 = np.broadcast_to(phi_values(perturbed_spec, driver), (N + 1, driver.S, spec.n))
    zero = np.zeros((1, driver.S, spec.n))
    rb = rs = 0.0
    db = ds = 0.0
    for i in range(1, N + 1):
        s = t[:i, None]
        z = np.broadcast_to(zero, (i, driver.S, spec.n))
        rb = max(rb, float(E(sq(np.broadcast_to(spec.b(t[i], s, z, U[:i]), z.shape)).sum(axis=0) * dt)))
        rs = max(rs, float(E(sq(np.broadcast_to(spec.sigma(t[i], s, z, U[:i]), z.shape)).sum(axis=0) * dt)))
        d_b = np.broadcast_to(spec.b(t[i], s, X2[:i], U[:i]) - perturbed_spec.b(t[i], s, X2[:i], U[:i]), z.shape)
        d_s = np.broadcast_to(spec.sigma(t[i], s, X2[:i], U[:i]) - perturbed_spec.sigma(t[i], s, X2[:i], U[:i]), z.shape)
        db = max(db, float(E(sq(np.sqrt(sq(d_b)).sum(axis=0)[..., None] * dt))))
        ds = max(ds, float(E(sq(d_s).sum(axis=0) * dt)))
    rhs1 = max(float(E(sq(phi1[i]))) for i in range(N + 1)) + rb + rs
    lhs2 = max(float(E(sq(X1[i] - X2[i]))) for i in range(N + 1))
    rhs2 = max(float(E(sq(phi1[i] - phi2[i]))) for i in range(N + 1)) + db + ds
    k1 = lhs1 / rhs1 if rhs1 > 0 else (0.0 if lhs1 == 0 else float("inf"))
    k2 = lhs2 / rhs2 if rhs2 > 0 else (0.0 if lhs2 == 0 else float("inf"))
    return StabilityReport(lhs1, rhs1, k1, lhs2, rhs2, k2)

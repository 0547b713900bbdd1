"""Linear-quadratic specialization: exact tree solutions and optimality conditions.

Adapted controls on the tree are parameterized by one value per node; node
``(i, k)`` is the ``k``-th depth-``i`` block of leaves.  Decision vectors are
ordered by time, then node, then control component.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adjoint import FirstOrderAdjoint, solve_first_order_adjoint
from .grid import NoiseDriver, ResourceLimitError, cond_expect
from .problem import LinearSpec, ProblemSpec
from .second_order import B3_matrix, quadratic_weights
from .solver import control_values, eval_cost, solve_svie

__all__ = [
    "EXHAUSTIVE",
    "NORMAL_EQUATIONS",
    "MAX_CANDIDATES",
    "LQSolution",
    "node_count",
    "decisions_to_control",
    "control_to_decisions",
    "solve_exhaustive",
    "solve_lq",
    "script_S1",
    "ConditionReport",
    "case1_conditions",
    "case2_conditions",
]

EXHAUSTIVE = "exhaustive"
NORMAL_EQUATIONS = "normal_equations"
MAX_CANDIDATES = 2 ** 16


def node_count(N: int) -> int:
    """Number of decision nodes ``2^N - 1`` of a depth-``N`` tree."""
    return 2 ** N - 1


def decisions_to_control(v: np.ndarray, driver: NoiseDriver) -> np.ndarray:
    """Expand node values ``(..., 2^N - 1, m)`` to leaf controls ``(N, ..., S, m)``."""
    if not driver.is_tree:
        raise ValueError("node parameterization needs the tree backend")
    N = driver.N
    v = np.asarray(v, dtype=float)
    lead = v.shape[:-2]
    out = np.empty((N,) + lead + (driver.S, v.shape[-1]))
    for i in range(N):
        blk = v[..., 2 ** i - 1 : 2 ** (i + 1) - 1, :]
        out[i] = np.repeat(blk, 2 ** (N - i), axis=-2)
    return out


def control_to_decisions(u: np.ndarray, driver: NoiseDriver, m: int) -> np.ndarray:
    """Inverse of :func:`decisions_to_control` for an adapted control."""
    U = np.broadcast_to(control_values(u, driver, m), (driver.N, driver.S, m))
    return np.concatenate([driver.node_values(U[i], i) for i in range(driver.N)], axis=0)


@dataclass(eq=False)
class LQSolution:
    """Optimal adapted control on the tree.

    ``u`` is (N, S, m) leaf-expanded; ``decisions`` is (2^N - 1, m); ``J`` is
    the optimal cost.  ``status`` is ``"optimal"`` or ``"indefinite"`` (no
    solution claimed, ``u`` is ``None``).
    """

    u: Optional[np.ndarray]
    decisions: Optional[np.ndarray]
    J: float
    method: str
    status: str = "optimal"
    meta: dict = field(default_factory=dict)

    def to_csv(self, driver: NoiseDriver) -> str:
        """Rows ``t_index,node_id,u_0..u_{m-1}``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.decisions is None:
            w.writerow(["t_index", "node_id"])
            return buf.getvalue()
        m = self.decisions.shape[-1]
        w.writerow(["t_index", "node_id"] + [f"u_{r}" for r in range(m)])
        for i in range(driver.N):
            for k in range(2 ** i):
                w.writerow([i, k] + [repr(float(x)) for x in self.decisions[2 ** i - 1 + k]])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"J": self.J, "method": self.method, "status": self.status, "meta": self.meta}


def solve_exhaustive(
    spec: ProblemSpec,
    driver: NoiseDriver,
    points=None,
    max_candidates: int = MAX_CANDIDATES,
    batch: int = 4096,
) -> LQSolution:
    """Enumerate every adapted control with values in a finite set.

    Ties are broken by the first enumerated candidate, i.e. the
    lexicographically smallest sequence of point indices in node order.

    Raises
    ------
    ResourceLimitError
        If ``|U|^(2^N - 1)`` exceeds ``max_candidates``.
    """
    if not driver.is_tree:
        raise ValueError("exhaustive search needs the tree backend")
    if points is None:
        if spec.control_set.kind != "finite":
            raise ValueError("exhaustive search needs a finite control set or explicit points")
        points = spec.control_set.points
    P = np.asarray(points, dtype=float).reshape(-1, spec.m)
    k = P.shape[0]
    L = node_count(driver.N)
    total = k ** L
    if total > max_candidates:
        raise ResourceLimitError(f"{k}^{L} candidate controls exceed the limit {max_candidates}")
    place = k ** np.arange(L - 1, -1, -1, dtype=np.int64)
    best_J, best_idx = np.inf, -1
    allJ = np.empty(total)
    for a in range(0, total, batch):
        idx = np.arange(a, min(a + batch, total), dtype=np.int64)
        digits = (idx[:, None] // place) % k
        U = decisions_to_control(P[digits], driver)
        X = solve_svie(spec, U, driver)
        J = np.atleast_1d(eval_cost(spec, X, U, driver))
        allJ[a : a + idx.size] = J
        r = int(np.argmin(J))
        if J[r] < best_J:
            best_J, best_idx = float(J[r]), int(idx[r])
    digits = (best_idx // place) % k
    dec = P[digits]
    ties = int(np.sum(allJ <= best_J + 1e-12 * max(1.0, abs(best_J))))
    sorted_J = np.sort(allJ)
    gap = float(sorted_J[1] - sorted_J[0]) if total > 1 else float("inf")
    return LQSolution(
        decisions_to_control(dec, driver),
        dec,
        best_J,
        EXHAUSTIVE,
        meta={"candidates": int(total), "ties": ties, "runner_up_gap": gap, "index": best_idx},
    )


def _basis_responses(spec: ProblemSpec, driver: NoiseDriver, batch: int = 512):
    """State at ``u = 0`` and the state increments of unit node controls."""
    m = spec.m
    L = node_count(driver.N)
    K = L * m
    X0 = solve_svie(spec, np.zeros(m), driver)
    D = np.empty((K, driver.N + 1, driver.S, spec.n))
    E = np.eye(K).reshape(K, L, m)
    for a in range(0, K, batch):
        U = decisions_to_control(E[a : a + batch], driver)
        X = solve_svie(spec, U, driver)
        D[a : a + batch] = np.moveaxis(X, 1, 0) - X0[None]
    return X0, D, E


def _quadratic_model(linear: LinearSpec, driver: NoiseDriver):
    """``J(v) = c + g'v + v'Hv/2`` over node decisions ``v`` (length ``m(2^N-1)``)."""
    spec = linear.to_problem()
    N, S, n, m, dt = driver.N, driver.S, linear.n, linear.m, driver.dt
    X0, D, E = _basis_responses(spec, driver)
    Ub = decisions_to_control(E, driver)  # (N, K, S, m)
    Ub = np.moveaxis(Ub, 1, 0)
    t = driver.grid.t[:N]
    Q = linear.weight("Q", t)  # (N, n, n)
    Sm = linear.weight("S", t)  # (N, m, n)
    R = linear.weight("R", t)  # (N, m, m)
    G = np.broadcast_to(linear.G_values(driver.dW), (S, n, n))
    w = driver.weights
    Dr = D[:, :N]
    QD = np.einsum("iab,kisb->kisa", Q, Dr)
    SD = np.einsum("iab,kisb->kisa", Sm, Dr)
    RU = np.einsum("iab,kisb->kisa", R, Ub)
    GD = np.einsum("sab,ksb->ksa", G, D[:, N])
    flat = lambda a: a.reshape(a.shape[0], -1)
    ww = lambda a: (a * w[None, None, :, None]).reshape(a.shape[0], -1)
    H = (flat(Dr) @ ww(QD).T + flat(Ub) @ ww(SD).T + flat(SD) @ ww(Ub).T + flat(Ub) @ ww(RU).T) * dt
    H = H + flat(D[:, N]) @ (GD * w[None, :, None]).reshape(GD.shape[0], -1).T
    H = 0.5 * (H + H.T)
    X0r = X0[:N]
    QX0 = np.einsum("iab,isb->isa", Q, X0r)
    SX0 = np.einsum("iab,isb->isa", Sm, X0r)
    g = ((Dr * QX0[None]).sum(-1) + (Ub * SX0[None]).sum(-1)).sum(axis=1) @ w * dt
    g = g + (D[:, N] * np.einsum("sab,sb->sa", G, X0[N])[None]).sum(-1) @ w
    c = eval_cost(spec, X0, np.zeros(m), driver)
    return c, g, H, spec


def solve_lq(
    linear: LinearSpec,
    driver: NoiseDriver,
    method: Optional[str] = None,
    psd_tol: float = 1e-10,
    max_candidates: int = MAX_CANDIDATES,
) -> LQSolution:
    """Exact optimum of the discretized LQ problem over adapted tree controls.

    Parameters
    ----------
    linear : LinearSpec
    driver : NoiseDriver
        Tree backend.
    method : {"exhaustive", "normal_equations"}, optional
        Defaults to exhaustive for a finite control set and to the normal
        equations for ``U = R^m``.
    psd_tol : float
        Relative tolerance of the positive-semidefiniteness check.

    Raises
    ------
    ResourceLimitError
        Enumeration too large.
    ValueError
        Unsupported control set or backend.
    """
    if not driver.is_tree:
        raise ValueError("solve_lq needs the tree backend")
    cs = linear.control_set
    if method is None:
        method = EXHAUSTIVE if cs.kind == "finite" else NORMAL_EQUATIONS
    if method == EXHAUSTIVE:
        return solve_exhaustive(linear.to_problem(), driver, max_candidates=max_candidates)
    if method != NORMAL_EQUATIONS:
        raise ValueError(f"unknown method {method!r}")
    c, g, H, spec = _quadratic_model(linear, driver)
    ev = np.linalg.eigvalsh(H)
    scale = max(1.0, float(np.abs(ev).max(initial=0.0)))
    meta = {
        "min_eigenvalue": float(ev.min()),
        "max_eigenvalue": float(ev.max()),
        "condition": float(ev.max() / ev.min()) if ev.min() > 0 else float("inf"),
        "relaxed": cs.kind != "all",
    }
    if ev.min() < -psd_tol * scale:
        return LQSolution(None, None, float("nan"), NORMAL_EQUATIONS, "indefinite", meta)
    v, *_ = np.linalg.lstsq(H, -g, rcond=None)
    grad = H @ v + g
    dec = v.reshape(-1, linear.m)
    u = decisions_to_control(dec, driver)
    X = solve_svie(spec, u, driver)
    J = eval_cost(spec, X, u, driver)
    meta["gradient_norm"] = float(np.linalg.norm(grad))
    meta["model_mismatch"] = float(abs(J - (c + g @ v + 0.5 * v @ H @ v)))
    return LQSolution(u, dec, J, NORMAL_EQUATIONS, "optimal", meta)


# ---------------------------------------------------------------------------
# optimality conditions


def script_S1(
    linear: LinearSpec,
    adjoint: FirstOrderAdjoint,
    Xbar: np.ndarray,
    t_idx: int,
    driver: NoiseDriver,
) -> np.ndarray:
    """``S X + B1(T,t)'E_t[G X_N] + E_t sum_{j>i} B1(t_j,t)'Y_j dt
    + B2(T,t)'pi_t + sum_{j>i} B2(t_j,t)'Z(t_j,t) dt`` per leaf, shape (S, m)."""
    N, S, n, dt = driver.N, driver.S, linear.n, driver.dt
    i = int(t_idx)
    t = driver.grid.t
    Sm = linear.weight("S", t[i])
    out = np.einsum("ab,sb->sa", Sm, np.broadcast_to(Xbar[i], (S, n)))
    B1T = linear.coef("B1", t[N], t[i])
    B2T = linear.coef("B2", t[N], t[i])
    out = out + np.einsum("ba,sb->sa", B1T, adjoint.E_hx(i)) + np.einsum("ba,sb->sa", B2T, adjoint.pi[i])
    if i + 1 < N:
        B1 = linear.coef("B1", t[i + 1 : N], np.full(N - 1 - i, t[i]))
        B2 = linear.coef("B2", t[i + 1 : N], np.full(N - 1 - i, t[i]))
        out = out + (np.einsum("jba,jsb->sa", B1, adjoint.E_Y(i)) + np.einsum("jba,jsb->sa", B2, adjoint.Z[i + 1 : N, i])) * dt
    return out


@dataclass
class ConditionReport:
    """Per-(time, node) stationarity residual and smallest eigenvalue.

    ``matrices[i]`` holds the second-order matrix per node at time ``i``
    (``SB`` for Case I, ``B3`` for Case II).
    ``min_eig_alt`` is filled for Case II with the alternative normalization.
    """

    case: str
    t_idx: np.ndarray
    node: np.ndarray
    stationarity: np.ndarray
    min_eig: np.ndarray
    matrices: list
    min_eig_alt: Optional[np.ndarray] = None

    def passed(self, stat_tol: float, eig_tol: float = 1e-10) -> bool:
        return bool(np.all(self.stationarity <= stat_tol) and np.all(self.min_eig >= -eig_tol))

    def to_dict(self) -> dict:
        d = {
            "case": self.case,
            "max_stationarity": float(self.stationarity.max(initial=0.0)),
            "min_eigenvalue": float(self.min_eig.min(initial=np.inf)),
        }
        if self.min_eig_alt is not None:
            d["min_eigenvalue_half_normalized"] = float(self.min_eig_alt.min(initial=np.inf))
        return d

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["t_idx", "node", "stationarity", "min_eig"]
        if self.min_eig_alt is not None:
            head.append("min_eig_half")
        w.writerow(head)
        for r in range(self.t_idx.size):
            row = [int(self.t_idx[r]), int(self.node[r]), repr(float(self.stationarity[r])), repr(float(self.min_eig[r]))]
            if self.min_eig_alt is not None:
                row.append(repr(float(self.min_eig_alt[r])))
            w.writerow(row)
        return buf.getvalue()


def _pairs_grid(driver):
    t = driver.grid.t
    N = driver.N
    ii, jj = np.meshgrid(np.arange(N + 1), np.arange(N + 1), indexing="ij")
    low = ii > jj
    return t[ii[low]], t[jj[low]]


def _require_zero(linear: LinearSpec, names, driver, atol=0.0):
    tt, ss = _pairs_grid(driver)
    for nm in names:
        if getattr(linear, nm) is None:
            continue
        if np.max(np.abs(linear.coef(nm, tt, ss)), initial=0.0) > atol:
            raise ValueError(f"{nm} must vanish for this case")


def _reference(linear, solution, driver, adjoint):
    spec = linear.to_problem()
    u = solution.u if hasattr(solution, "u") else solution
    U = np.broadcast_to(control_values(u, driver, linear.m), (driver.N, driver.S, linear.m))
    X = solve_svie(spec, U, driver)
    if adjoint is None:
        adjoint = solve_first_order_adjoint(spec, X, U, driver)
    return spec, U, X, adjoint


def _stationarity(linear, adjoint, X, U, i, driver):
    R = linear.weight("R", driver.grid.t[i])
    res = script_S1(linear, adjoint, X, i, driver) + np.einsum("ab,sb->sa", R, U[i])
    return np.linalg.norm(driver.node_values(res, i), axis=-1)


def case1_conditions(linear: LinearSpec, solution, driver: NoiseDriver, adjoint: Optional[FirstOrderAdjoint] = None) -> ConditionReport:
    """``|S1 + R ubar|`` and ``min eig(R + SB)`` per node.

    ``SB(t) = B2(T,t)'E_t[G]B2(T,t) + E_t sum_{j>=i} B2(t_j,t)'Q_j B2(t_j,t) dt``.

    Raises
    ------
    ValueError
        If ``A1`` or ``A2`` is nonzero.
    """
    _require_zero(linear, ("A1", "A2"), driver)
    spec, U, X, adjoint = _reference(linear, solution, driver, adjoint)
    N, S, n, dt = driver.N, driver.S, linear.n, driver.dt
    t = driver.grid.t
    EG_all = np.broadcast_to(linear.G_values(driver.dW), (S, n, n))
    rows = ([], [], [], [])
    mats = []
    for i in range(N):
        EG = cond_expect(driver, EG_all, i)
        B2T = linear.coef("B2", t[N], t[i])
        SB = np.einsum("ba,sbc,cd->sad", B2T, EG, B2T)
        B2 = linear.coef("B2", t[i:N], np.full(N - i, t[i]))
        Q = linear.weight("Q", t[i:N])
        SB = SB + np.einsum("jba,jbc,jcd->ad", B2, Q, B2)[None] * dt
        R = linear.weight("R", t[i])
        SBn = driver.node_values(SB, i)
        Mn = R[None] + SBn
        mats.append(SBn)
        rows[0].append(np.full(Mn.shape[0], i))
        rows[1].append(np.arange(Mn.shape[0]))
        rows[2].append(_stationarity(linear, adjoint, X, U, i, driver))
        rows[3].append(np.linalg.eigvalsh(Mn).min(axis=-1))
    c = [np.concatenate(r) for r in rows]
    return ConditionReport("I", c[0].astype(int), c[1].astype(int), c[2], c[3], mats)


def case2_conditions(linear: LinearSpec, solution, driver: NoiseDriver, adjoint: Optional[FirstOrderAdjoint] = None, atol: float = 1e-12) -> ConditionReport:
    """``|S1 + R ubar|`` and ``min eig(R + B2' B3 B2)`` per node.

    ``B3(t)`` is the matrix of the quadratic functional on the basis
    solutions; ``min_eig_alt`` reports ``R + B2' (B3/2) B2``, the
    half-normalized variant.

    Raises
    ------
    ValueError
        If ``B2(t, s)`` depends on its first argument.
    """
    tt, ss = _pairs_grid(driver)
    B2v = linear.coef("B2", tt, ss)
    B2d = linear.coef("B2", ss, ss)
    if np.max(np.abs(B2v - B2d), initial=0.0) > atol:
        raise ValueError("B2(t, s) must not depend on t")
    spec, U, X, adjoint = _reference(linear, solution, driver, adjoint)
    N = driver.N
    t = driver.grid.t
    weights = quadratic_weights(spec, X, U, driver, adjoint)
    lin = adjoint.lin
    rows = ([], [], [], [], [])
    mats = []
    for i in range(N):
        B3 = B3_matrix(weights, lin.A, lin.B, i, driver).values
        B2 = linear.coef("B2", t[i], t[i])
        R = linear.weight("R", t[i])
        core = np.einsum("ba,sbc,cd->sad", B2, B3, B2)
        full = driver.node_values(R[None] + core, i)
        half = driver.node_values(R[None] + 0.5 * core, i)
        mats.append(driver.node_values(B3, i))
        rows[0].append(np.full(full.shape[0], i))
        rows[1].append(np.arange(full.shape[0]))
        rows[2].append(_stationarity(linear, adjoint, X, U, i, driver))
        rows[3].append(np.linalg.eigvalsh(full).min(axis=-1))
        rows[4].append(np.linalg.eigvalsh(half).min(axis=-1))
    c = [np.concatenate(r) for r in rows]
    return ConditionReport("II", c[0].astype(int), c[1].astype(int), c[2], c[3], mats, c[4])

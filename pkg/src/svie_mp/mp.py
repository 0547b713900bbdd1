"""Maximum-condition functionals and the falsification harness.

``script_S`` is ``dH + F/2`` with ``F`` the quadratic functional of the spike
direction.  ``script_S_discrete`` replaces ``F`` by the exact one-step second
variation of the discretized problem; for linear-quadratic problems it equals
``(J(u^eps) - J(ubar)) / (P(node) dt)`` for a single-node spike.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .adjoint import FirstOrderAdjoint, delta_H, hamiltonian_u, solve_first_order_adjoint
from .grid import NoiseDriver
from .problem import ProblemSpec
from .second_order import (
    B3Result,
    B3_matrix,
    F_quadratic,
    QuadraticWeights,
    quadratic_aggregate,
    quadratic_weights,
    spike_direction,
)
from .solver import LinearSVIEInput, Linearization, control_values, linearize, solve_linear_svie

__all__ = [
    "FULL",
    "DIAGONAL",
    "FORMS",
    "script_S",
    "script_S0",
    "script_S_discrete",
    "convex_condition",
    "MPContext",
    "prepare",
    "MPReport",
    "check_mp",
]

FULL = "full"
DIAGONAL = "diagonal"
FORMS = ("theorem", "sde", "discrete")


def script_S(
    spec: ProblemSpec,
    adjoint: FirstOrderAdjoint,
    weights: QuadraticWeights,
    Xbar: np.ndarray,
    ubar,
    t_idx: int,
    u,
    driver: NoiseDriver,
    lin: Optional[Linearization] = None,
) -> np.ndarray:
    """``dH(t,u) + F(t, dsigma(., t))/2`` per leaf, shape (S,)."""
    lin = adjoint.lin if lin is None else lin
    dH = delta_H(spec, adjoint, Xbar, ubar, t_idx, u, driver)
    d = spike_direction(spec, Xbar, ubar, t_idx, u, driver)
    if d.is_zero():
        return dH
    return dH + 0.5 * F_quadratic(weights, d, lin, driver)


def script_S0(
    spec: ProblemSpec,
    adjoint: FirstOrderAdjoint,
    B3: Union[B3Result, np.ndarray],
    Xbar: np.ndarray,
    ubar,
    t_idx: int,
    u,
    driver: NoiseDriver,
    atol: float = 1e-10,
) -> np.ndarray:
    """``dH(t,u) + dsigma(t)' B3(t) dsigma(t) / 2`` per leaf, shape (S,).

    Raises
    ------
    ValueError
        If ``dsigma(., t)`` varies in its first argument by more than ``atol``
        (use :func:`script_S` then).
    """
    d = spike_direction(spec, Xbar, ubar, t_idx, u, driver)
    spread = d.first_argument_spread()
    if spread > atol:
        raise ValueError(
            f"spike direction varies in its first argument (spread {spread:.3e}); use script_S"
        )
    M = B3.values if isinstance(B3, B3Result) else np.asarray(B3, dtype=float)
    ds = d.values[t_idx]
    dH = delta_H(spec, adjoint, Xbar, ubar, t_idx, u, driver)
    return dH + 0.5 * np.einsum("sk,skl,sl->s", ds, np.broadcast_to(M, ds.shape + (ds.shape[-1],)), ds)


def script_S_discrete(
    spec: ProblemSpec,
    adjoint: FirstOrderAdjoint,
    weights: QuadraticWeights,
    Xbar: np.ndarray,
    ubar,
    t_idx: int,
    u,
    driver: NoiseDriver,
    lin: Optional[Linearization] = None,
) -> np.ndarray:
    """One-step discrete analogue of ``script_S``, per leaf (S,).

    ``dH + E_k[Theta(dX)] / (2 dt)`` where ``dX`` solves the linear SVIE from
    ``k`` with forcing ``db(t_i,t_k) dt + dsigma(t_i,t_k) dW_k`` and
    ``Theta(X) = sum_{j>=k} X'QX dt + X_N'GX_N``.
    """
    lin = adjoint.lin if lin is None else lin
    N, S, n, m, dt = driver.N, driver.S, spec.n, spec.m, driver.dt
    k = int(t_idx)
    t = driver.grid.t
    U = np.broadcast_to(control_values(ubar, driver, m), (N, S, m))
    uu = np.asarray(u, dtype=float)
    uu = np.broadcast_to(uu.reshape(-1)[None] if uu.ndim <= 1 else uu, (S, m))
    x = Xbar[k][None]
    ti = t[k + 1 :, None]
    db = np.broadcast_to(spec.b(ti, t[k], x, uu[None]), (N - k, S, n)) - np.broadcast_to(
        spec.b(ti, t[k], x, U[k][None]), (N - k, S, n)
    )
    ds = np.broadcast_to(spec.sigma(ti, t[k], x, uu[None]), (N - k, S, n)) - np.broadcast_to(
        spec.sigma(ti, t[k], x, U[k][None]), (N - k, S, n)
    )
    dH = delta_H(spec, adjoint, Xbar, U, k, uu, driver)
    if not (np.any(db) or np.any(ds)):
        return dH
    psi = np.zeros((N + 1, S, n))
    psi[k + 1 :] = db * dt + ds * driver.dW[None, :, k, None]
    dX = solve_linear_svie(LinearSVIEInput(k, lin.A, lin.B, psi), driver)
    return dH + quadratic_aggregate(weights, dX, dX, k, driver) / (2 * dt)


def convex_condition(
    spec: ProblemSpec,
    adjoint: FirstOrderAdjoint,
    Xbar: np.ndarray,
    ubar,
    t_idx: int,
    u,
    driver: NoiseDriver,
) -> np.ndarray:
    """``<H_u(t), u - ubar(t)>`` per leaf (S,); negative values are violations.

    Raises
    ------
    ValueError
        If the control set is not convex.
    """
    if not spec.control_set.convex:
        raise ValueError("gradient condition needs a convex control set")
    N, S, m = driver.N, driver.S, spec.m
    U = np.broadcast_to(control_values(ubar, driver, m), (N, S, m))
    Hu = hamiltonian_u(spec, adjoint, Xbar, U, t_idx, driver)
    uu = np.asarray(u, dtype=float)
    uu = np.broadcast_to(uu.reshape(-1)[None] if uu.ndim <= 1 else uu, (S, m))
    return (Hu * (uu - U[t_idx])).sum(-1)


# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MPContext:
    """Reference pair with its first-order adjoint and quadratic weights."""

    spec: ProblemSpec
    driver: NoiseDriver
    Xbar: np.ndarray
    ubar: np.ndarray
    lin: Linearization
    adjoint: FirstOrderAdjoint
    weights: QuadraticWeights


def prepare(spec: ProblemSpec, ubar, driver: NoiseDriver, adjoint_method: str = "picard") -> MPContext:
    """Solve state, adjoint and weights for a reference control."""
    from .solver import solve_svie

    U = np.broadcast_to(control_values(ubar, driver, spec.m), (driver.N, driver.S, spec.m))
    X = solve_svie(spec, U, driver)
    lin = linearize(spec, X, U, driver)
    adj = solve_first_order_adjoint(spec, X, U, driver, lin=lin, method=adjoint_method)
    w = quadratic_weights(spec, X, U, driver, adj)
    return MPContext(spec, driver, X, np.array(U), lin, adj, w)


@dataclass
class MPReport:
    """Values of the maximum-condition functional on (time, node, control) triples.

    ``values[r]`` belongs to ``(t_idx[r], node[r])`` and holds one entry per
    row of ``u_grid``; ``at_ubar[r]`` is the value at the reference control.
    """

    form: str
    mode: str
    tol: float
    u_grid: np.ndarray
    t_idx: np.ndarray
    node: np.ndarray
    values: np.ndarray
    at_ubar: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def min_over_u(self) -> np.ndarray:
        return self.values.min(axis=1)

    @property
    def argmin_u(self) -> np.ndarray:
        return self.values.argmin(axis=1)

    @property
    def passed(self) -> bool:
        if self.values.size == 0:
            return True
        return bool(np.all(self.min_over_u >= -self.tol) and np.all(np.abs(self.at_ubar) <= self.tol))

    def violations(self) -> list:
        """``(t_idx, node)`` pairs failing either condition."""
        bad = (self.min_over_u < -self.tol) | (np.abs(self.at_ubar) > self.tol)
        return [(int(a), int(b)) for a, b in zip(self.t_idx[bad], self.node[bad])]

    def worst(self) -> Optional[dict]:
        """The most negative entry, or ``None`` for an empty report."""
        if self.values.size == 0:
            return None
        r, c = np.unravel_index(int(np.argmin(self.values)), self.values.shape)
        return {
            "t_idx": int(self.t_idx[r]),
            "node": int(self.node[r]),
            "u": self.u_grid[c].tolist(),
            "value": float(self.values[r, c]),
        }

    def value(self, t_idx: int, node: int) -> np.ndarray:
        hit = np.nonzero((self.t_idx == t_idx) & (self.node == node))[0]
        if hit.size == 0:
            raise KeyError((t_idx, node))
        return self.values[hit[0]]

    def to_dict(self) -> dict:
        return {
            "form": self.form,
            "mode": self.mode,
            "tol": self.tol,
            "passed": self.passed,
            "checked_pairs": int(self.t_idx.size),
            "min_value": float(self.values.min()) if self.values.size else 0.0,
            "max_abs_at_ubar": float(np.abs(self.at_ubar).max()) if self.at_ubar.size else 0.0,
            "worst": self.worst(),
            "violations": [list(v) for v in self.violations()],
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Rows ``t_idx,node,u,value`` with ``u`` components joined by ``;``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_idx", "node", "u", "value"])
        for r in range(self.t_idx.size):
            for c in range(self.u_grid.shape[0]):
                w.writerow(
                    [
                        int(self.t_idx[r]),
                        int(self.node[r]),
                        ";".join(repr(float(x)) for x in self.u_grid[c]),
                        repr(float(self.values[r, c])),
                    ]
                )
        return buf.getvalue()


def _sample_nodes(n_nodes: int, k: int) -> np.ndarray:
    if n_nodes <= k:
        return np.arange(n_nodes)
    return np.unique(np.linspace(0, n_nodes - 1, k).round().astype(int))


def check_mp(
    spec: ProblemSpec,
    ubar,
    U_grid,
    tol: float,
    mode: str = FULL,
    driver: Optional[NoiseDriver] = None,
    form: str = "theorem",
    context: Optional[MPContext] = None,
    t_indices=None,
    diagonal_nodes: int = 8,
) -> MPReport:
    """Evaluate the maximum condition at every checked (time, node, control).

    Parameters
    ----------
    spec : ProblemSpec
    ubar : array_like
        Reference control.
    U_grid : array_like, shape (k, m)
        Finite sample of the control set.
    tol : float
        Pass requires ``min_u S >= -tol`` and ``|S(t, ubar(t))| <= tol``.
    mode : {"full", "diagonal"}
        ``"full"`` checks every tree node (every path on MC);
        ``"diagonal"`` checks at most ``diagonal_nodes`` evenly spaced nodes
        per time.
    driver : NoiseDriver
    form : {"theorem", "sde", "discrete"}
        ``"theorem"``: :func:`script_S`; ``"sde"``: :func:`script_S0`;
        ``"discrete"``: :func:`script_S_discrete`.
    context : MPContext, optional
        Precomputed reference quantities for ``ubar``.
    t_indices : iterable of int, optional
        Restrict the time indices (default all ``0..N-1``).
    """
    if mode not in (FULL, DIAGONAL):
        raise ValueError(f"unknown mode {mode!r}")
    if form not in FORMS:
        raise ValueError(f"unknown form {form!r}")
    if context is None:
        if driver is None:
            raise ValueError("driver required")
        context = prepare(spec, ubar, driver)
    ctx = context
    drv = ctx.driver
    N, S, m = drv.N, drv.S, spec.m
    Ug = np.asarray(U_grid, dtype=float).reshape(-1, m)
    if Ug.shape[0] == 0:
        raise ValueError("empty control grid")
    rows_t, rows_node, rows_val, rows_bar = [], [], [], []
    for i in range(N) if t_indices is None else t_indices:
        i = int(i)
        if form == "sde":
            B3 = B3_matrix(ctx.weights, ctx.lin.A, ctx.lin.B, i, drv)

        def S_at(u):
            if form == "theorem":
                return script_S(spec, ctx.adjoint, ctx.weights, ctx.Xbar, ctx.ubar, i, u, drv, ctx.lin)
            if form == "sde":
                return script_S0(spec, ctx.adjoint, B3, ctx.Xbar, ctx.ubar, i, u, drv)
            return script_S_discrete(spec, ctx.adjoint, ctx.weights, ctx.Xbar, ctx.ubar, i, u, drv, ctx.lin)

        vals = np.stack([np.broadcast_to(S_at(u), (S,)) for u in Ug], axis=1)
        bar = np.broadcast_to(S_at(ctx.ubar[i]), (S,))
        if drv.is_tree:
            nv = drv.node_values(vals, i)
            nb = drv.node_values(bar, i)
        else:
            nv, nb = vals, bar
        nodes = np.arange(nv.shape[0]) if mode == FULL else _sample_nodes(nv.shape[0], diagonal_nodes)
        rows_t.append(np.full(nodes.size, i))
        rows_node.append(nodes)
        rows_val.append(nv[nodes])
        rows_bar.append(nb[nodes])
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
    return MPReport(
        form,
        mode,
        float(tol),
        Ug,
        cat(rows_t, (0,)).astype(int),
        cat(rows_node, (0,)).astype(int),
        cat(rows_val, (0, Ug.shape[0])),
        cat(rows_bar, (0,)),
        {"backend": drv.kind, "N": N, "paths": S, "adjoint_residual": ctx.adjoint.residual},
    )

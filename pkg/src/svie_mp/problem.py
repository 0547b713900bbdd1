"""Problem specification, control sets, assumption checks and the epidemic model.

Callback contract
-----------------
All coefficient callbacks are pure and vectorized over leading axes:

* ``b(t, s, x, u)`` and ``sigma(t, s, x, u)`` take ``t``, ``s`` broadcastable
  against ``x[..., 0]``, states ``x`` of shape ``(..., n)`` and controls ``u`` of
  shape ``(..., m)``; they return ``(..., n)``.
* ``b_x`` / ``sigma_x`` return ``(..., n, n)`` with ``[k, l] = d b_k / d x_l``;
  ``b_xx`` / ``sigma_xx`` return ``(..., n, n, n)`` with
  ``[k, l, r] = d^2 b_k / d x_l d x_r``; ``b_u`` / ``sigma_u`` return ``(..., n, m)``.
* ``h(x)`` returns ``(...)``, ``h_x`` ``(..., n)``, ``h_xx`` ``(..., n, n)``.  With
  ``random_terminal=True`` the three terminal callbacks also receive the
  keyword ``dW`` (shape ``(..., N)``, the increments of each leaf/path).
* ``l(s, x, u)`` returns ``(...)``, ``l_x`` ``(..., n)``, ``l_xx``
  ``(..., n, n)``, ``l_u`` ``(..., m)``.

Missing second derivatives (``b_xx=None``) mean the coefficient is affine in x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

__all__ = [
    "FINITE",
    "BOX",
    "ALL",
    "ControlSet",
    "ProblemSpec",
    "LinearSpec",
    "ScalarFunction",
    "Clause",
    "ValidationReport",
    "validate_assumptions",
    "epidemic_scenario",
    "cumulative_density",
    "matrix_field",
]

FINITE = "finite"
BOX = "box"
ALL = "all"


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Control region ``U``: a finite point list, a box, or all of R^m."""

    kind: str
    m: int
    points: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == FINITE:
            pts = np.atleast_2d(np.asarray(self.points, dtype=float))
            if pts.size == 0:
                raise ValueError("finite control set must be nonempty")
            if pts.shape[1] != self.m:
                pts = pts.reshape(-1, self.m)
            object.__setattr__(self, "points", pts)
        elif self.kind == BOX:
            lo = np.broadcast_to(np.asarray(self.lower, dtype=float), (self.m,)).copy()
            hi = np.broadcast_to(np.asarray(self.upper, dtype=float), (self.m,)).copy()
            if np.any(lo > hi):
                raise ValueError(f"box control set needs lower <= upper, got {lo} > {hi}")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        elif self.kind != ALL:
            raise ValueError(f"unknown control set kind {self.kind!r}")

    @classmethod
    def finite(cls, points) -> "ControlSet":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(FINITE, pts.shape[1], pts)

    @classmethod
    def box(cls, lower, upper) -> "ControlSet":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        return cls(BOX, lo.size, None, lo, upper)

    @classmethod
    def all(cls, m: int = 1) -> "ControlSet":
        return cls(ALL, int(m))

    @property
    def convex(self) -> bool:
        if self.kind == FINITE:
            return len(np.unique(self.points, axis=0)) == 1
        return True

    def contains(self, u, atol: float = 1e-12) -> np.ndarray:
        """Elementwise membership for ``u`` of shape ``(..., m)``."""
        u = np.asarray(u, dtype=float)
        if self.kind == ALL:
            return np.ones(u.shape[:-1], dtype=bool)
        if self.kind == BOX:
            return np.all((u >= self.lower - atol) & (u <= self.upper + atol), axis=-1)
        d = np.abs(u[..., None, :] - self.points).max(axis=-1)
        return np.any(d <= atol, axis=-1)

    def grid(self, k: int = 11, radius: float = 1.0) -> np.ndarray:
        """Finite sample of U (all points of a finite set, else a tensor grid)."""
        if self.kind == FINITE:
            return self.points.copy()
        if self.kind == BOX:
            lo, hi = self.lower, self.upper
        else:
            lo, hi = -radius * np.ones(self.m), radius * np.ones(self.m)
        axes = [np.linspace(a, b, k) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Controlled SVIE with Bolza cost; see the module docstring for callbacks.

    ``phi`` is either a callable ``phi(t) -> (..., n)`` of deterministic time, or
    an array of shape ``(N+1, S, n)`` / ``(N+1, 1, n)`` on a given grid.
    """

    n: int
    m: int
    phi: object
    b: Callable
    sigma: Callable
    b_x: Callable
    sigma_x: Callable
    h: Callable
    h_x: Callable
    h_xx: Callable
    l: Callable
    l_x: Callable
    l_xx: Callable
    control_set: ControlSet
    b_xx: Optional[Callable] = None
    sigma_xx: Optional[Callable] = None
    b_u: Optional[Callable] = None
    sigma_u: Optional[Callable] = None
    l_u: Optional[Callable] = None
    name: str = ""
    random_terminal: bool = False
    x_free: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("dimensions n and m must be positive")
        if self.control_set.m != self.m:
            raise ValueError(f"control set dimension {self.control_set.m} != m={self.m}")

    def with_phi(self, phi) -> "ProblemSpec":
        return replace(self, phi=phi)

    def terminal(self, name: str, x, dW=None):
        """Evaluate ``h``, ``h_x`` or ``h_xx`` honouring ``random_terminal``."""
        f = getattr(self, name)
        if self.random_terminal:
            return f(x, dW=dW)
        return f(x)


# ---------------------------------------------------------------------------
# linear-quadratic data


def matrix_field(f, t, s, shape) -> np.ndarray:
    """Evaluate a matrix-valued coefficient ``f(t, s)`` on broadcast times.

    ``f`` may be vectorized (returning ``t.shape + shape``), constant (returning
    ``shape``) or scalar-only, in which case it is looped.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    bshape = np.broadcast_shapes(t.shape, s.shape)
    if f is None:
        return np.zeros(bshape + tuple(shape))
    if not callable(f):
        return np.broadcast_to(np.asarray(f, dtype=float).reshape(shape), bshape + tuple(shape)).copy()
    try:
        out = np.asarray(f(t, s), dtype=float)
        if out.shape == bshape + tuple(shape):
            return out
        if out.shape == tuple(shape):
            return np.broadcast_to(out, bshape + tuple(shape)).copy()
        if out.size == int(np.prod(shape)) and not bshape:
            return out.reshape(shape)
    except Exception:
        pass
    tt, ss = np.broadcast_arrays(t, s)
    res = np.empty(bshape + tuple(shape))
    for idx in np.ndindex(bshape):
        res[idx] = np.asarray(f(float(tt[idx]), float(ss[idx])), dtype=float).reshape(shape)
    return res


def _time_field(f, s, shape) -> np.ndarray:
    if f is None:
        return np.zeros(np.shape(s) + tuple(shape))
    if not callable(f):
        return np.broadcast_to(np.asarray(f, dtype=float).reshape(shape), np.shape(s) + tuple(shape)).copy()
    return matrix_field(lambda t, ss: f(ss), np.zeros_like(np.asarray(s, dtype=float)), s, shape)


@dataclass(frozen=True, eq=False)
class LinearSpec:
    """Linear dynamics with quadratic cost.

    ``b = A1(t,s) x + B1(t,s) u``, ``sigma = A2(t,s) x + B2(t,s) u``,
    ``h = x'Gx/2``, ``l = (x'Qx + 2u'Sx + u'Ru)/2``.

    Coefficients may be callables of ``(t, s)`` (``Q``, ``S``, ``R`` of ``s``)
    or constant arrays.  ``G`` is either a constant matrix or a callable
    ``G(dW) -> (..., n, n)`` of the increments, making it terminal-measurable.
    """

    n: int
    m: int
    A1: object = None
    B1: object = None
    A2: object = None
    B2: object = None
    Q: object = None
    S: object = None
    R: object = None
    G: object = None
    x0: object = None
    control_set: Optional[ControlSet] = None
    name: str = "lq"

    def __post_init__(self):
        if self.control_set is None:
            object.__setattr__(self, "control_set", ControlSet.all(self.m))
        if self.control_set.m != self.m:
            raise ValueError("control set dimension does not match m")
        for nm in ("Q", "R"):
            sh = (self.n, self.n) if nm == "Q" else (self.m, self.m)
            mats = _time_field(getattr(self, nm), np.linspace(0.0, 1.0, 5), sh)
            if not np.allclose(mats, np.swapaxes(mats, -1, -2), atol=1e-12):
                raise ValueError(f"{nm} must be symmetric")
        if not callable(self.G) and self.G is not None:
            g = np.asarray(self.G, dtype=float).reshape(self.n, self.n)
            if not np.allclose(g, g.T, atol=1e-12):
                raise ValueError("G must be symmetric")

    @property
    def random_G(self) -> bool:
        return callable(self.G)

    def coef(self, name: str, t, s) -> np.ndarray:
        shape = (self.n, self.n) if name in ("A1", "A2") else (self.n, self.m)
        return matrix_field(getattr(self, name), t, s, shape)

    def weight(self, name: str, s) -> np.ndarray:
        shape = {"Q": (self.n, self.n), "S": (self.m, self.n), "R": (self.m, self.m)}[name]
        return _time_field(getattr(self, name), s, shape)

    def G_values(self, dW=None) -> np.ndarray:
        if self.G is None:
            return np.zeros((1, self.n, self.n))
        if callable(self.G):
            return np.asarray(self.G(dW), dtype=float)
        return np.asarray(self.G, dtype=float).reshape(1, self.n, self.n)

    def x0_vector(self) -> np.ndarray:
        if self.x0 is None:
            return np.zeros(self.n)
        return np.broadcast_to(np.asarray(self.x0, dtype=float), (self.n,)).copy()

    def to_problem(self) -> ProblemSpec:
        """Equivalent :class:`ProblemSpec` (affine drift/diffusion, quadratic cost)."""
        n, m = self.n, self.m
        me = self

        def _mv(M, v):
            return np.einsum("...kl,...l->...k", M, v)

        def b(t, s, x, u):
            return _mv(me.coef("A1", t, s), x) + _mv(me.coef("B1", t, s), u)

        def sigma(t, s, x, u):
            return _mv(me.coef("A2", t, s), x) + _mv(me.coef("B2", t, s), u)

        def _shape(t, s, x):
            return np.broadcast_shapes(np.shape(t), np.shape(s), np.shape(x)[:-1])

        def b_x(t, s, x, u):
            return np.broadcast_to(me.coef("A1", t, s), _shape(t, s, x) + (n, n))

        def sigma_x(t, s, x, u):
            return np.broadcast_to(me.coef("A2", t, s), _shape(t, s, x) + (n, n))

        def b_u(t, s, x, u):
            return np.broadcast_to(me.coef("B1", t, s), _shape(t, s, x) + (n, m))

        def sigma_u(t, s, x, u):
            return np.broadcast_to(me.coef("B2", t, s), _shape(t, s, x) + (n, m))

        def h(x, dW=None):
            G = me.G_values(dW)
            return 0.5 * np.einsum("...k,...kl,...l->...", x, G, x)

        def h_x(x, dW=None):
            return _mv(me.G_values(dW), x)

        def h_xx(x, dW=None):
            return np.broadcast_to(me.G_values(dW), np.shape(x)[:-1] + (n, n))

        def l(s, x, u):
            Q, S, R = me.weight("Q", s), me.weight("S", s), me.weight("R", s)
            return 0.5 * (
                np.einsum("...k,...kl,...l->...", x, Q, x)
                + 2 * np.einsum("...k,...kl,...l->...", u, S, x)
                + np.einsum("...k,...kl,...l->...", u, R, u)
            )

        def l_x(s, x, u):
            Q, S = me.weight("Q", s), me.weight("S", s)
            return _mv(Q, x) + np.einsum("...lk,...l->...k", S, u)

        def l_xx(s, x, u):
            Q = me.weight("Q", s)
            return np.broadcast_to(Q, np.broadcast_shapes(np.shape(s), np.shape(x)[:-1]) + (n, n))

        def l_u(s, x, u):
            S, R = me.weight("S", s), me.weight("R", s)
            return _mv(S, x) + _mv(R, u)

        x0 = self.x0_vector()
        return ProblemSpec(
            n=n, m=m,
            phi=lambda t: np.broadcast_to(x0, np.shape(t) + (n,)),
            b=b, sigma=sigma, b_x=b_x, sigma_x=sigma_x,
            h=h, h_x=h_x, h_xx=h_xx, l=l, l_x=l_x, l_xx=l_xx,
            control_set=self.control_set,
            b_u=b_u, sigma_u=sigma_u, l_u=l_u,
            name=self.name, random_terminal=self.random_G,
            meta={"linear": self},
        )


# ---------------------------------------------------------------------------
# scalar helpers and the epidemic model


@dataclass(frozen=True, eq=False)
class ScalarFunction:
    """A scalar function with its first two derivatives."""

    f: Callable
    df: Callable
    d2f: Callable

    @classmethod
    def quadratic(cls, c: float = 1.0, center: float = 0.0, linear: float = 0.0) -> "ScalarFunction":
        """``c/2 (x - center)^2 + linear x``."""
        return cls(
            lambda x: 0.5 * c * (np.asarray(x) - center) ** 2 + linear * np.asarray(x),
            lambda x: c * (np.asarray(x) - center) + linear,
            lambda x: c * np.ones_like(np.asarray(x, dtype=float)),
        )

    @classmethod
    def zero(cls) -> "ScalarFunction":
        z = lambda x: np.zeros_like(np.asarray(x, dtype=float))
        return cls(z, z, z)


def cumulative_density(m: Callable, dt: float) -> Callable:
    """``F(r) = int_0^r m`` by the left-point rule on steps of size ``dt``.

    Between nodes the rule is continued linearly, so ``F`` is exact on the
    grid and continuous in ``r``.
    """
    def F(r):
        r = np.asarray(r, dtype=float)
        rr = np.maximum(r, 0.0)
        kmax = int(math.ceil(float(np.max(rr, initial=0.0)) / dt - 1e-12)) if rr.size else 0
        nodes = np.arange(kmax + 1) * dt
        dens = np.asarray(m(nodes), dtype=float) * np.ones_like(nodes)
        if np.any(dens < 0):
            raise ValueError("density has a negative sample")
        # weights min(dt, r - k dt)^+ per node
        w = np.clip(rr[..., None] - nodes, 0.0, dt)
        return (w * dens).sum(axis=-1)

    return F


def epidemic_scenario(
    x0: float,
    m1: Callable,
    m2: Callable,
    a: Callable,
    G1: ScalarFunction,
    G2: ScalarFunction,
    *,
    dt: float = 1e-3,
    control_set: Optional[ControlSet] = None,
    T: float = 1.0,
) -> ProblemSpec:
    """Vaccination model with memory.

    ``b(t,s,x,u) = -F1(t-s) x - F2(t-s) a(s) u``, ``sigma = -F2(t-s) u``,
    ``h = 0``, ``l(s,x,u) = G1(x) + G2(u)`` with ``F_i(r) = int_0^r m_i``
    computed by the left-point rule of step ``dt`` (use the solver grid step).

    Parameters
    ----------
    x0 : float
        Initial infected population, nonnegative.
    m1, m2 : callable
        Nonnegative densities on ``[0, T]``.
    a : callable
        Vaccine efficiency ``a(s)``.
    G1, G2 : ScalarFunction
        Running costs of the state and of the control.
    """
    if x0 < 0:
        raise ValueError("x0 must be nonnegative")
    probe = np.linspace(0.0, T, 257)
    for nm, dens in (("m1", m1), ("m2", m2)):
        vals = np.asarray(dens(probe), dtype=float) * np.ones_like(probe)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError(f"density {nm} has a negative or non-finite sample")
    F1 = cumulative_density(m1, dt)
    F2 = cumulative_density(m2, dt)
    cs = control_set if control_set is not None else ControlSet.all(1)

    def _a(s):
        return np.asarray(a(np.asarray(s, dtype=float)), dtype=float) * np.ones_like(np.asarray(s, dtype=float))

    def b(t, s, x, u):
        r = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
        return -F1(r)[..., None] * x - (F2(r) * _a(s))[..., None] * u

    def sigma(t, s, x, u):
        r = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
        return -F2(r)[..., None] * u + 0.0 * x

    def _sh(t, s, x):
        return np.broadcast_shapes(np.shape(t), np.shape(s), np.shape(x)[:-1])

    def b_x(t, s, x, u):
        r = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
        return np.broadcast_to(-F1(r)[..., None, None], _sh(t, s, x) + (1, 1))

    def sigma_x(t, s, x, u):
        return np.zeros(_sh(t, s, x) + (1, 1))

    def b_u(t, s, x, u):
        r = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
        return np.broadcast_to(-(F2(r) * _a(s))[..., None, None], _sh(t, s, x) + (1, 1))

    def sigma_u(t, s, x, u):
        r = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
        return np.broadcast_to(-F2(r)[..., None, None], _sh(t, s, x) + (1, 1))

    def l(s, x, u):
        return G1.f(x[..., 0]) + G2.f(u[..., 0]) + 0.0 * np.asarray(s, dtype=float)

    def l_x(s, x, u):
        return np.asarray(G1.df(x), dtype=float) + 0.0 * u

    def l_xx(s, x, u):
        return np.asarray(G1.d2f(x), dtype=float)[..., None] + 0.0 * u[..., None]

    def l_u(s, x, u):
        return np.asarray(G2.df(u), dtype=float) + 0.0 * x

    zero = lambda x: np.zeros(np.shape(x)[:-1])
    return ProblemSpec(
        n=1, m=1,
        phi=lambda t: np.full(np.shape(t) + (1,), float(x0)),
        b=b, sigma=sigma, b_x=b_x, sigma_x=sigma_x,
        h=zero, h_x=lambda x: np.zeros(np.shape(x)), h_xx=lambda x: np.zeros(np.shape(x) + (1,)),
        l=l, l_x=l_x, l_xx=l_xx,
        control_set=cs, b_u=b_u, sigma_u=sigma_u, l_u=l_u,
        name="epidemic",
        meta={"F1": F1, "F2": F2, "a": _a, "x0": float(x0)},
    )


# ---------------------------------------------------------------------------
# assumption checks


@dataclass
class Clause:
    name: str
    passed: bool
    value: float = 0.0
    detail: str = ""


@dataclass
class ValidationReport:
    clauses: list
    samples: int
    seed: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def clause(self, name: str) -> Clause:
        for c in self.clauses:
            if c.name == name:
                return c
        raise KeyError(name)

    def failed(self) -> list:
        return [c.name for c in self.clauses if not c.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "samples": self.samples,
            "seed": self.seed,
            "clauses": [
                {"name": c.name, "passed": bool(c.passed), "value": float(c.value), "detail": c.detail}
                for c in self.clauses
            ],
        }


def _sample_controls(cs: ControlSet, rng, k: int, radius: float) -> np.ndarray:
    if cs.kind == FINITE:
        return cs.points[rng.integers(0, len(cs.points), size=k)]
    if cs.kind == BOX:
        lo = np.where(np.isfinite(cs.lower), cs.lower, -radius)
        hi = np.where(np.isfinite(cs.upper), cs.upper, radius)
        return lo + (hi - lo) * rng.random((k, cs.m))
    return radius * rng.standard_normal((k, cs.m))


def _fd_jacobian(f, x, step):
    """Central difference of ``f`` w.r.t. the last axis of ``x``; new last axis."""
    cols = []
    for r in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[r] = step
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def _rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)), initial=0.0))


def validate_assumptions(
    spec,
    sample_budget: int = 64,
    seed: int = 0,
    T: float = 1.0,
    radius: float = 1.0,
    rtol: float = 1e-5,
    growth_ratio: float = 2.0,
    n_paths: int = 4,
    n_steps: int = 4,
) -> ValidationReport:
    """Falsification checks of the smoothness, growth and boundedness clauses.

    Parameters
    ----------
    spec : ProblemSpec or LinearSpec
    sample_budget : int
        Number of random ``(t, s, x, u)`` points.
    seed : int
        Seed of the sampler.
    radius : float
        Scale of the sampled states; bounds are compared between ``radius``
        and ``10 * radius``.
    rtol : float
        Tolerance of the derivative-vs-finite-difference clause.
    growth_ratio : float
        A sup over the large sample exceeding ``growth_ratio`` times the sup
        over the small sample flags an unbounded quantity.

    Returns
    -------
    ValidationReport
        One :class:`Clause` per check; an evaluator raising is reported as a
        failed clause naming the callback and sample index.
    """
    clauses = []
    if isinstance(spec, LinearSpec):
        clauses.extend(_linear_clauses(spec, T))
        spec = spec.to_problem()
    rng = np.random.default_rng(seed)
    k = int(sample_budget)
    n = spec.n
    t = T * rng.random(k)
    s = t * rng.random(k)
    x = radius * rng.standard_normal((k, n))
    u = _sample_controls(spec.control_set, rng, k, radius)
    dW = np.sqrt(T / n_steps) * rng.standard_normal((k, n_steps))

    def call(name, f, *args):
        try:
            out = np.asarray(f(*args), dtype=float)
        except Exception as exc:  # reported, not raised
            raise _EvalError(f"{name} raised {type(exc).__name__}: {exc}") from exc
        if not np.all(np.isfinite(out)):
            bad = np.argwhere(~np.isfinite(out))[0]
            raise _EvalError(f"{name} non-finite at sample {tuple(int(v) for v in bad)}")
        return out

    term = (lambda nm, xx: spec.terminal(nm, xx, dW=dW[: len(xx)])) if spec.random_terminal else (
        lambda nm, xx: getattr(spec, nm)(xx))

    # --- evaluation and derivative consistency
    worst = 0.0
    where = ""
    try:
        step = 1e-5 * max(1.0, radius)
        checks = [
            ("b_x", lambda xx: call("b", spec.b, t, s, xx, u), call("b_x", spec.b_x, t, s, x, u)),
            ("sigma_x", lambda xx: call("sigma", spec.sigma, t, s, xx, u), call("sigma_x", spec.sigma_x, t, s, x, u)),
            ("h_x", lambda xx: term("h", xx), term("h_x", x)),
            ("h_xx", lambda xx: term("h_x", xx), term("h_xx", x)),
            ("l_x", lambda xx: call("l", spec.l, t, xx, u), call("l_x", spec.l_x, t, x, u)),
            ("l_xx", lambda xx: call("l_x", spec.l_x, t, xx, u), call("l_xx", spec.l_xx, t, x, u)),
        ]
        for nm in ("b", "sigma"):
            d2 = getattr(spec, nm + "_xx")
            d1 = getattr(spec, nm + "_x")
            if d2 is not None:
                checks.append((nm + "_xx", (lambda f: lambda xx: call(nm + "_x", f, t, s, xx, u))(d1),
                               call(nm + "_xx", d2, t, s, x, u)))
            else:
                checks.append((nm + "_xx(affine)", (lambda f: lambda xx: call(nm + "_x", f, t, s, xx, u))(d1),
                               np.zeros(np.shape(call(nm + "_x", d1, t, s, x, u)) + (n,))))
        for label, parent, analytic in checks:
            fd = _fd_jacobian(parent, x, step)
            err = _rel_err(analytic, fd)
            if err > worst:
                worst, where = err, label
        # optional u-derivatives
        ustep = 1e-5 * max(1.0, radius)
        for label, fparent, deriv in (
            ("b_u", spec.b, spec.b_u), ("sigma_u", spec.sigma, spec.sigma_u), ("l_u", spec.l, spec.l_u)
        ):
            if deriv is None:
                continue
            if label == "l_u":
                parent = lambda uu: call("l", spec.l, t, x, uu)
                analytic = call(label, deriv, t, x, u)
            else:
                parent = (lambda f, nm: lambda uu: call(nm, f, t, s, x, uu))(fparent, label[:-2])
                analytic = call(label, deriv, t, s, x, u)
            fd = _fd_jacobian(parent, u, ustep)
            err = _rel_err(analytic, fd)
            if err > worst:
                worst, where = err, label
        clauses.append(Clause("evaluation", True, 0.0, "all callbacks finite"))
        clauses.append(Clause("derivative_consistency", worst <= rtol, worst,
                              f"max relative discrepancy {worst:.3e} at {where or '-'}"))
    except _EvalError as exc:
        clauses.append(Clause("evaluation", False, float("nan"), str(exc)))
        return ValidationReport(clauses, k, seed)

    # --- boundedness of derivatives and linear growth, radius R vs 10R
    def sup_norm(fn, xx, uu, tt=t, ss=s):
        v = np.asarray(fn(tt, ss, xx, uu), dtype=float)
        return float(np.max(np.abs(v), initial=0.0))

    big_x = 10.0 * x
    big_u = u if spec.control_set.kind == FINITE else (
        np.clip(10 * u, spec.control_set.lower, spec.control_set.upper) if spec.control_set.kind == BOX else 10 * u)
    try:
        bounded = []
        for nm in ("b_x", "sigma_x", "b_xx", "sigma_xx"):
            f = getattr(spec, nm)
            if f is None:
                continue
            small, large = sup_norm(f, x, u), sup_norm(f, big_x, big_u)
            bounded.append((nm, small, large))
        for nm in ("h_xx", "l_xx"):
            if nm == "h_xx":
                small, large = float(np.max(np.abs(term("h_xx", x)))), float(np.max(np.abs(term("h_xx", big_x))))
            else:
                small = float(np.max(np.abs(spec.l_xx(t, x, u))))
                large = float(np.max(np.abs(spec.l_xx(t, big_x, big_u))))
            bounded.append((nm, small, large))
        bad = [nm for nm, a_, b_ in bounded if b_ > growth_ratio * a_ + 1e-12]
        ratio = max((b_ / max(a_, 1e-300) if b_ > 1e-12 else 0.0) for _, a_, b_ in bounded) if bounded else 0.0
        clauses.append(Clause("bounded_derivatives", not bad, ratio,
                              "unbounded: " + ", ".join(bad) if bad else "sup ratio within bound"))

        def growth(vals, xx, uu):
            scale = 1.0 + np.linalg.norm(xx, axis=-1) + np.linalg.norm(uu, axis=-1)
            v = np.asarray(vals, dtype=float)
            v = v.reshape(v.shape[0], -1) if v.ndim > 1 else v[:, None]
            return float(np.max(np.linalg.norm(v, axis=-1) / scale))

        lin = []
        for nm, fn in (("b", lambda xx, uu: spec.b(t, s, xx, uu)), ("sigma", lambda xx, uu: spec.sigma(t, s, xx, uu)),
                       ("h_x", lambda xx, uu: term("h_x", xx)), ("l_x", lambda xx, uu: spec.l_x(t, xx, uu))):
            lin.append((nm, growth(fn(x, u), x, u), growth(fn(big_x, big_u), big_x, big_u)))
        badg = [nm for nm, a_, b_ in lin if b_ > growth_ratio * a_ + 1e-12]
        clauses.append(Clause("linear_growth", not badg,
                              max(b_ for _, _, b_ in lin),
                              "superlinear: " + ", ".join(badg) if badg else "growth constant stable"))

        # modulus of continuity in the first time argument
        mods = []
        for delta in (1e-2, 1e-3, 1e-4):
            t2 = np.clip(t + delta, 0.0, T)
            worst_d = 0.0
            for fn in (spec.b, spec.sigma, spec.b_x, spec.sigma_x):
                d = np.abs(np.asarray(fn(t2, s, x, u)) - np.asarray(fn(t, s, x, u)))
                d = d.reshape(k, -1).max(axis=1) / (1 + np.linalg.norm(x, axis=-1) + np.linalg.norm(u, axis=-1))
                worst_d = max(worst_d, float(d.max()))
            mods.append(worst_d)
        ok_mod = mods[-1] <= 0.1 * mods[0] + 1e-10
        clauses.append(Clause("t_modulus", ok_mod, mods[-1],
                              "sampled moduli " + ", ".join(f"{v:.2e}" for v in mods)))

        # symmetry of second derivatives
        sym = 0.0
        for arr in (term("h_xx", x), spec.l_xx(t, x, u)):
            a_ = np.asarray(arr)
            sym = max(sym, float(np.max(np.abs(a_ - np.swapaxes(a_, -1, -2)), initial=0.0)))
        for nm in ("b_xx", "sigma_xx"):
            f = getattr(spec, nm)
            if f is not None:
                a_ = np.asarray(f(t, s, x, u))
                sym = max(sym, float(np.max(np.abs(a_ - np.swapaxes(a_, -1, -2)), initial=0.0)))
        clauses.append(Clause("hessian_symmetry", sym <= 1e-10, sym, "max asymmetry"))
    except Exception as exc:
        clauses.append(Clause("evaluation", False, float("nan"), f"{type(exc).__name__}: {exc}"))
    return ValidationReport(clauses, k, seed)


class _EvalError(Exception):
    pass


def _linear_clauses(lin: LinearSpec, T: float) -> list:
    out = []
    ts = np.linspace(0.0, T, 9)
    tt, ss = np.meshgrid(ts, ts, indexing="ij")
    sup = 0.0
    for nm in ("A1", "B1", "A2", "B2"):
        v = lin.coef(nm, tt, ss)
        if not np.all(np.isfinite(v)):
            out.append(Clause("coefficients_bounded", False, float("inf"), f"{nm} non-finite"))
            return out
        sup = max(sup, float(np.max(np.abs(v), initial=0.0)))
    out.append(Clause("coefficients_bounded", True, sup, "sampled sup of |A_i|, |B_i|"))
    asym = 0.0
    Qs = lin.weight("Q", ts)
    asym = max(asym, float(np.max(np.abs(Qs - np.swapaxes(Qs, -1, -2)))))
    if not lin.random_G and lin.G is not None:
        G = np.asarray(lin.G, dtype=float).reshape(lin.n, lin.n)
        asym = max(asym, float(np.max(np.abs(G - G.T))))
    out.append(Clause("weights_symmetric", asym <= 1e-12, asym, "Q and G symmetry"))
    return out

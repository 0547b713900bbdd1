"""Time grids, Brownian drivers and the conditional-expectation engine.

Two drivers are provided.  ``TREE`` is a complete binary scenario tree with
increments ``+-sqrt(dt)`` of probability 1/2 each; conditional expectations
on it are exact subtree averages.  ``MONTE_CARLO`` draws Gaussian increments
from a seeded generator and approximates conditional expectations by a least
squares projection on polynomials of the observed increments.

Every process is stored *expanded*: one value per leaf (tree) or path (MC),
shape ``(S, ...)`` per time index.  On the tree, leaf ``k`` takes the upward
move at step ``j`` when bit ``N-1-j`` of ``k`` is set, so the leaves sharing a
depth-``i`` node form the contiguous block ``[a 2^(N-i), (a+1) 2^(N-i))``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

TREE = "tree"
MONTE_CARLO = "mc"
DEFAULT_TREE_CAP = 16
MAX_BASIS_COLUMNS = 600
PROJECTOR_CACHE_BYTES = 512 * 2**20

__all__ = [
    "TREE",
    "MONTE_CARLO",
    "DEFAULT_TREE_CAP",
    "TimeGrid",
    "NoiseDriver",
    "AdaptedProcess",
    "TwoTimeProcess",
    "RegressionWarning",
    "ResourceLimitError",
    "make_grid",
    "build_driver",
    "cond_expect",
    "martingale_integrand",
    "brownian_moment",
]


class ResourceLimitError(RuntimeError):
    """Raised when a request would exceed a configured size cap."""


class RegressionWarning(UserWarning):
    """Emitted when an MC regression falls back to a lower degree."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, T]`` into ``N`` steps."""

    T: float
    N: int

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def t(self) -> np.ndarray:
        # i*dt keeps t_N == T exactly only if we pin the last node
        nodes = np.arange(self.N + 1, dtype=float) * self.dt
        nodes[-1] = self.T
        return nodes

    def index_of(self, time: float, atol: float = 1e-9) -> int:
        """Return the grid index of ``time``; raise if it is not a node."""
        k = int(round(time / self.dt))
        if k < 0 or k > self.N or abs(k * self.dt - time) > atol * max(1.0, self.T):
            raise ValueError(f"time {time!r} is not a node of the grid (dt={self.dt})")
        return k


def make_grid(T: float, N: int) -> TimeGrid:
    """Build a uniform time grid.

    Parameters
    ----------
    T : float
        Horizon, must be positive.
    N : int
        Number of steps, must be at least one.
    """
    if not np.isfinite(T) or T <= 0:
        raise ValueError(f"horizon T must be positive, got {T!r}")
    if int(N) != N or N < 1:
        raise ValueError(f"step count N must be a positive integer, got {N!r}")
    return TimeGrid(float(T), int(N))


@dataclass(frozen=True, eq=False)
class NoiseDriver:
    """Discrete Brownian driver over a :class:`TimeGrid`.

    Attributes
    ----------
    grid : TimeGrid
    kind : str
        ``"tree"`` or ``"mc"``.
    dW : ndarray, shape (S, N)
        Increment of every leaf/path at every step.
    weights : ndarray, shape (S,)
        Probability of each leaf/path (uniform in both backends).
    seed : int or None
        MC seed.
    degree : int
        Regression degree for MC conditional expectations.
    """

    grid: TimeGrid
    kind: str
    dW: np.ndarray
    weights: np.ndarray
    seed: Optional[int] = None
    degree: int = 2
    cap: int = DEFAULT_TREE_CAP
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def S(self) -> int:
        return self.dW.shape[0]

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def is_tree(self) -> bool:
        return self.kind == TREE

    @property
    def W(self) -> np.ndarray:
        """Brownian path values, shape (S, N+1)."""
        out = np.zeros((self.S, self.N + 1))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out

    def expect(self, values) -> np.ndarray:
        """Plain expectation over leaves/paths (axis 0)."""
        v = np.asarray(values, dtype=float)
        if v.shape[0] == 1:
            return v[0]
        return np.tensordot(self.weights, v, axes=(0, 0))

    def n_nodes(self, i: int) -> int:
        """Number of distinct information states at time index ``i``."""
        return 2 ** i if self.is_tree else (1 if i == 0 else self.S)

    def node_values(self, values, i: int) -> np.ndarray:
        """Compress an ``F_{t_i}``-measurable leaf array to one row per node."""
        v = np.asarray(values)
        if not self.is_tree:
            return v[:1] if i == 0 else v
        if v.shape[0] == 1:
            return np.repeat(v, 2 ** i, axis=0)
        block = 2 ** (self.N - i)
        return v.reshape((2 ** i, block) + v.shape[1:])[:, 0]

    def expand(self, node_vals, i: int) -> np.ndarray:
        """Inverse of :meth:`node_values` on the tree."""
        v = np.asarray(node_vals)
        if not self.is_tree:
            return np.broadcast_to(v, (self.S,) + v.shape[1:]).copy() if i == 0 else v
        return np.repeat(v, 2 ** (self.N - i), axis=0)

    def is_adapted(self, values, i: int, atol: float = 0.0) -> bool:
        """Check on the tree that ``values`` is constant on depth-``i`` blocks."""
        v = np.asarray(values)
        if not self.is_tree or v.shape[0] == 1:
            return True
        blk = v.reshape((2 ** i, 2 ** (self.N - i)) + v.shape[1:])
        return bool(np.all(np.abs(blk - blk[:, :1]) <= atol))


def build_driver(
    grid: TimeGrid,
    kind: str = TREE,
    M: int = 1000,
    seed: int = 0,
    d: int = 2,
    cap: int = DEFAULT_TREE_CAP,
) -> NoiseDriver:
    """Construct a deterministic noise driver.

    Parameters
    ----------
    grid : TimeGrid
    kind : {"tree", "mc"}
    M : int
        Number of MC paths (ignored for the tree).
    seed : int
        Seed of ``numpy.random.default_rng`` (MC only).
    d : int
        Polynomial degree of the MC regression basis.
    cap : int
        Maximal tree depth.
    """
    kind = str(kind).lower()
    dt = grid.dt
    if kind in ("tree", "binomial"):
        if grid.N > cap:
            raise ResourceLimitError(
                f"tree depth {grid.N} exceeds cap {cap} ({2 ** grid.N} leaves)"
            )
        S = 2 ** grid.N
        k = np.arange(S)[:, None]
        bits = (k >> (grid.N - 1 - np.arange(grid.N))[None, :]) & 1
        dW = np.where(bits == 1, math.sqrt(dt), -math.sqrt(dt))
        w = np.full(S, 1.0 / S)
        return NoiseDriver(grid, TREE, dW, w, None, int(d), int(cap))
    if kind in ("mc", "monte_carlo", "montecarlo"):
        if int(M) < 1:
            raise ValueError(f"path count M must be >= 1, got {M!r}")
        if int(d) < 0:
            raise ValueError("regression degree must be nonnegative")
        rng = np.random.default_rng(seed)
        dW = rng.standard_normal((int(M), grid.N)) * math.sqrt(dt)
        w = np.full(int(M), 1.0 / int(M))
        return NoiseDriver(grid, MONTE_CARLO, dW, w, int(seed), int(d), int(cap))
    raise ValueError(f"unknown driver kind {kind!r}")


# ---------------------------------------------------------------------------
# conditional expectation


def _basis(driver: NoiseDriver, i: int, degree: int) -> np.ndarray:
    """Monomials of the scaled increments dW_0..dW_{i-1} up to ``degree``."""
    Z = driver.dW[:, :i] / math.sqrt(driver.dt)
    cols = [np.ones(driver.S)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(i), deg):
            cols.append(np.prod(Z[:, list(combo)], axis=1))
    return np.stack(cols, axis=1)


def _n_cols(i: int, degree: int) -> int:
    if i == 0:
        return 1
    return sum(math.comb(i + k - 1, k) for k in range(degree + 1))


def _cache_put(driver: NoiseDriver, key, value, nbytes: int) -> None:
    # keep memory bounded: at most PROJECTOR_CACHE_BYTES of cached arrays
    used = driver._cache.get("bytes", 0)
    if used + nbytes <= PROJECTOR_CACHE_BYTES:
        driver._cache[key] = value
        driver._cache["bytes"] = used + nbytes


def _projector(driver: NoiseDriver, i: int):
    """Regression space at index ``i`` as ``(X, Rinv, degree_used, fell_back)``.

    ``X`` is the (S, c) monomial basis and ``Rinv`` the inverse of its QR
    factor, so ``X @ Rinv`` has orthonormal columns.  Only the small ``Rinv``
    is always cached; ``X`` is cached while it fits the byte budget and is
    rebuilt otherwise.
    """
    key = ("proj", i)
    hit = driver._cache.get(key)
    if hit is not None:
        deg, Rinv, fb = hit
        X = driver._cache.get(("basis", i))
        if X is None:
            X = _basis(driver, i, deg)
        return X, Rinv, deg, fb
    deg = driver.degree
    fell_back = False
    # column budget keeps the QR affordable for long grids
    budget = max(1, min(driver.S // 2, MAX_BASIS_COLUMNS))
    while True:
        X = _basis(driver, i, deg) if _n_cols(i, deg) <= budget else None
        if X is not None:
            R = np.linalg.qr(X, mode="r")
            diag = np.abs(np.diag(R))
            if diag.size == 0 or diag.min() > 1e-10 * max(diag.max(), 1.0):
                break
        fell_back = True
        if deg == 0:
            X = np.ones((driver.S, 1))
            R = np.array([[math.sqrt(driver.S)]])
            break
        deg -= 1
    Rinv = np.linalg.inv(R)
    _cache_put(driver, key, (deg, Rinv, fell_back), Rinv.nbytes)
    _cache_put(driver, ("basis", i), X, X.nbytes)
    return X, Rinv, deg, fell_back


def cond_expect(driver: NoiseDriver, values, t_index: int, return_info: bool = False):
    """Conditional expectation ``E_{t_i}[values]``.

    Parameters
    ----------
    driver : NoiseDriver
    values : array_like, shape (S, ...) or (1, ...)
        Terminal-measurable values, one row per leaf/path.  A leading axis of
        length one means the value is deterministic.
    t_index : int
        Conditioning time index ``i`` (information from ``dW_0..dW_{i-1}``).
    return_info : bool
        If true also return a dict with the regression degree used and a
        ``fallback`` flag (MC only).

    Returns
    -------
    ndarray of the same shape as ``values`` (expanded per leaf/path).
    """
    v = np.asarray(values, dtype=float)
    N = driver.N
    if not 0 <= t_index <= N:
        raise IndexError(f"t_index {t_index} outside 0..{N}")
    info = {"degree": driver.degree, "fallback": False}
    if v.shape[0] == 1:
        out = v
    elif driver.is_tree:
        if t_index == N:
            out = v
        else:
            blk = 2 ** (N - t_index)
            m = v.reshape((2 ** t_index, blk) + v.shape[1:]).mean(axis=1)
            out = np.repeat(m, blk, axis=0)
    else:
        if t_index == N:
            out = v
        elif t_index == 0:
            out = np.broadcast_to(v.mean(axis=0), v.shape).copy()
        else:
            X, Rinv, deg, fb = _projector(driver, t_index)
            flat = v.reshape(v.shape[0], -1)
            out = (X @ (Rinv @ (Rinv.T @ (X.T @ flat)))).reshape(v.shape)
            info = {"degree": deg, "fallback": fb}
            if fb:
                warnings.warn(
                    f"regression basis at t_index={t_index} rank deficient, "
                    f"degree lowered to {deg}",
                    RegressionWarning,
                    stacklevel=2,
                )
    return (out, info) if return_info else out


def martingale_integrand(driver: NoiseDriver, values, j: int) -> np.ndarray:
    """Integrand of the martingale representation at step ``j``.

    Returns ``E_{t_j}[values * dW_j] / dt``, an ``F_{t_j}``-measurable array.
    On the tree this equals the branch difference of ``E_{t_{j+1}}[values]``
    divided by ``2 sqrt(dt)`` and is exact.
    """
    v = np.asarray(values, dtype=float)
    if v.shape[0] == 1:
        return np.zeros_like(v)
    dW = driver.dW[:, j].reshape((-1,) + (1,) * (v.ndim - 1))
    return cond_expect(driver, v * dW, j) / driver.dt


def brownian_moment(k: int, t: float) -> float:
    """Even moment ``E|W(t)|^(2k) = (2k)! / (2^k k!) t^k``.

    The combinatorial factor is computed exactly in integers; an
    ``OverflowError`` is raised if the result is not representable.
    """
    if int(k) != k or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t!r}")
    k = int(k)
    coef = math.factorial(2 * k) // (2 ** k * math.factorial(k))
    if t == 0:
        return 0.0
    val = float(coef) * float(t) ** k
    if not math.isfinite(val):
        raise OverflowError(f"brownian_moment({k}, {t}) overflows a float")
    return val


# ---------------------------------------------------------------------------
# lightweight process containers


@dataclass(frozen=True, eq=False)
class AdaptedProcess:
    """Values ``V(t_i)`` per leaf/path: ``values[i]`` has shape (S, ...)."""

    driver: NoiseDriver
    values: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def at(self, i: int) -> np.ndarray:
        return self.values[i]

    def nodes(self, i: int) -> np.ndarray:
        return self.driver.node_values(self.values[i], i)

    def check_adapted(self, atol: float = 0.0) -> bool:
        return all(self.driver.is_adapted(self.values[i], i, atol) for i in range(len(self.values)))


@dataclass(frozen=True, eq=False)
class TwoTimeProcess:
    """Values ``V(t_i, s_j)``: ``values[i, j]`` has shape (S, ...)."""

    driver: NoiseDriver
    values: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def at(self, i: int, j: int) -> np.ndarray:
        return self.values[i, j]

    def check_adapted(self, atol: float = 0.0) -> bool:
        I, J = self.values.shape[:2]
        return all(
            self.driver.is_adapted(self.values[i, j], j, atol) for i in range(I) for j in range(J)
        )

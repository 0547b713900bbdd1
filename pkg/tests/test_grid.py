import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svie_mp.grid import (
    RegressionWarning,
    ResourceLimitError,
    brownian_moment,
    build_driver,
    cond_expect,
    make_grid,
    martingale_integrand,
)


def test_grid_nodes():
    g = make_grid(1.0, 4)
    assert g.dt == 0.25
    np.testing.assert_allclose(g.t, [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(make_grid(2.0, 1).t, [0.0, 2.0])


@pytest.mark.parametrize("T,N", [(1.0, 0), (0.0, 4), (-1.0, 2)])
def test_grid_invalid(T, N):
    with pytest.raises(ValueError):
        make_grid(T, N)


def test_index_of():
    g = make_grid(1.0, 8)
    assert g.index_of(0.375) == 3
    with pytest.raises(ValueError):
        g.index_of(0.3)


def test_tree_driver_leaves():
    d = build_driver(make_grid(1.0, 2), "tree")
    assert d.S == 4
    np.testing.assert_allclose(d.weights, 0.25)
    assert set(np.round(np.unique(d.dW), 12)) == {round(-math.sqrt(0.5), 12), round(math.sqrt(0.5), 12)}


def test_mc_driver_deterministic():
    g = make_grid(1.0, 3)
    a = build_driver(g, "mc", M=1000, seed=7)
    b = build_driver(g, "mc", M=1000, seed=7)
    assert np.array_equal(a.dW, b.dW)
    assert not np.array_equal(a.dW, build_driver(g, "mc", M=1000, seed=8).dW)


def test_tree_cap():
    with pytest.raises(ResourceLimitError):
        build_driver(make_grid(1.0, 20), "tree")


def test_bad_driver_args():
    g = make_grid(1.0, 2)
    with pytest.raises(ValueError):
        build_driver(g, "mc", M=0)
    with pytest.raises(ValueError):
        build_driver(g, "lattice")


def test_cond_expect_constant():
    d = build_driver(make_grid(1.0, 3))
    v = np.full(d.S, 2.5)
    for i in range(4):
        np.testing.assert_allclose(cond_expect(d, v, i), 2.5)


def test_cond_expect_symmetry_one_step():
    d = build_driver(make_grid(1.0, 1))
    v = d.dW[:, 0] / math.sqrt(d.dt)
    np.testing.assert_allclose(cond_expect(d, v, 0), 0.0, atol=1e-15)


def test_cond_expect_two_steps_by_hand():
    d = build_driver(make_grid(1.0, 2))
    v = d.dW.sum(axis=1) ** 2
    got = cond_expect(d, v, 1)
    np.testing.assert_allclose(got, d.dW[:, 0] ** 2 + d.dt, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_tower_property(N, seed):
    d = build_driver(make_grid(1.0, N))
    v = np.random.default_rng(seed).standard_normal((d.S, 2))
    for t in range(N + 1):
        Et = cond_expect(d, v, t)
        for s in range(t + 1):
            np.testing.assert_allclose(cond_expect(d, Et, s), cond_expect(d, v, s), atol=1e-13)


def test_cond_expect_mc_reproduces_basis_span():
    d = build_driver(make_grid(1.0, 4), "mc", M=500, seed=1)
    v = d.dW[:, 0] + 2 * d.dW[:, 1] - 3 * d.dW[:, 0] * d.dW[:, 1]
    np.testing.assert_allclose(cond_expect(d, v, 2), v, atol=1e-12)


def test_cond_expect_mc_independent_increment_small():
    d = build_driver(make_grid(1.0, 4), "mc", M=20000, seed=1)
    got = cond_expect(d, d.dW[:, 3], 2)
    # the projection of pure noise onto p = 6 columns has RMS sqrt(dt * p / M)
    rms = math.sqrt(np.mean(got ** 2))
    assert rms < 2 * math.sqrt(d.dt * 6 / d.S)


def test_cond_expect_rank_fallback():
    d = build_driver(make_grid(1.0, 6), "mc", M=12, seed=0)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        _, info = cond_expect(d, d.dW.sum(axis=1), 5, return_info=True)
    assert info["fallback"]
    assert info["degree"] < 2
    assert any(issubclass(w.category, RegressionWarning) for w in rec)


def test_martingale_representation_tree():
    d = build_driver(make_grid(1.0, 4))
    v = np.random.default_rng(0).standard_normal(d.S)
    rec = cond_expect(d, v, 0)
    for j in range(4):
        rec = rec + martingale_integrand(d, v, j) * d.dW[:, j]
    np.testing.assert_allclose(rec, v, atol=1e-13)


def test_martingale_integrand_of_terminal_w():
    d = build_driver(make_grid(1.0, 3))
    W = d.dW.sum(axis=1)
    for j in range(3):
        np.testing.assert_allclose(martingale_integrand(d, W, j), 1.0)
    np.testing.assert_allclose(martingale_integrand(d, 2 * W, 0), 2.0)


@pytest.mark.parametrize("k,t,expected", [(1, 1.0, 1.0), (2, 1.0, 3.0), (3, 2.0, 120.0), (2, 0.0, 0.0)])
def test_brownian_moment(k, t, expected):
    assert brownian_moment(k, t) == expected


def test_brownian_moment_errors():
    with pytest.raises(ValueError):
        brownian_moment(0, 1.0)
    with pytest.raises(ValueError):
        brownian_moment(1, -1.0)
    with pytest.raises(OverflowError):
        brownian_moment(200, 1e10)


def test_brownian_moment_tree_is_not_gaussian():
    d = build_driver(make_grid(1.0, 4))
    W = d.dW.sum(axis=1)
    assert d.expect(W ** 2) == pytest.approx(brownian_moment(1, 1.0))
    assert d.expect(W ** 4) < brownian_moment(2, 1.0)


def test_node_values_roundtrip():
    d = build_driver(make_grid(1.0, 4))
    nodes = np.arange(8.0)[:, None]
    leaves = d.expand(nodes, 3)
    assert leaves.shape == (16, 1)
    assert d.is_adapted(leaves, 3)
    assert not d.is_adapted(leaves, 2)
    np.testing.assert_array_equal(d.node_values(leaves, 3), nodes)

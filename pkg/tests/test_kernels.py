import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svie_mp import kernels

compiled = pytest.mark.skipif(kernels.BACKEND != "compiled", reason="compiled kernel not built")


def _case(N, S, n, Sa, rng):
    A = np.zeros((N + 1, N + 1, Sa, n, n))
    B = np.zeros_like(A)
    for i in range(N + 1):
        A[i, :i] = 0.4 * rng.standard_normal((i, Sa, n, n))
        B[i, :i] = 0.4 * rng.standard_normal((i, Sa, n, n))
    return rng.standard_normal((N + 1, S, n)), A, B, rng.standard_normal((S, N)) / np.sqrt(N)


def test_python_kernel_recursion():
    psi = np.ones((3, 1, 1))
    A = np.zeros((3, 3, 1, 1, 1))
    A[1, 0] = A[2, 0] = A[2, 1] = 2.0
    X = kernels.linear_volterra(psi, A, np.zeros_like(A), np.zeros((1, 2)), 0.5, 0, backend="python")
    # X1 = 1 + 2*1*0.5, X2 = 1 + (2*1 + 2*2)*0.5
    np.testing.assert_allclose(X[:, 0, 0], [1.0, 2.0, 4.0])
    X = kernels.linear_volterra(psi, A, np.zeros_like(A), np.zeros((1, 2)), 0.5, 1, backend="python")
    np.testing.assert_allclose(X[:, 0, 0], [0.0, 1.0, 2.0])


@compiled
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(1, 9), st.integers(1, 3), st.booleans(), st.integers(0, 2 ** 31 - 1))
def test_backends_agree(N, S, n, shared, seed):
    rng = np.random.default_rng(seed)
    psi, A, B, dW = _case(N, S, n, 1 if shared else S, rng)
    tau = int(rng.integers(0, N + 1))
    xp = kernels.linear_volterra(psi, A, B, dW, 1.0 / N, tau, backend="python")
    xc = kernels.linear_volterra(psi, A, B, dW, 1.0 / N, tau, backend="compiled")
    np.testing.assert_allclose(xc, xp, rtol=1e-12, atol=1e-12)


def test_compiled_request_without_extension(monkeypatch):
    monkeypatch.setattr(kernels, "BACKEND", "python")
    z = np.zeros((2, 1, 1))
    with pytest.raises(ImportError):
        kernels.linear_volterra(z, np.zeros((2, 2, 1, 1, 1)), np.zeros((2, 2, 1, 1, 1)), np.zeros((1, 1)), 1.0, 0, backend="compiled")


def test_environment_forces_python():
    env = dict(os.environ, SVIE_MP_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from svie_mp import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"

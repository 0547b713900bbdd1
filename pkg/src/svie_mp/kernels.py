"""Selects the compiled Volterra kernel, falling back to numpy.

Set ``SVIE_MP_PURE_PYTHON=1`` to force the numpy implementation.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py.linear_volterra

if os.environ.get("SVIE_MP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:  # pragma: no cover - depends on the build
        from . import _kernels as _compiled

        _impl = _compiled.linear_volterra
        BACKEND = "compiled"
    except ImportError:
        pass


def linear_volterra(psi, A, B, dW, dt, tau, backend=None):
    """Dispatch to the selected backend; see :mod:`svie_mp._kernels_py`."""
    psi = np.ascontiguousarray(psi, dtype=float)
    A = np.ascontiguousarray(np.broadcast_to(A, A.shape), dtype=float)
    B = np.ascontiguousarray(np.broadcast_to(B, B.shape), dtype=float)
    dW = np.ascontiguousarray(dW, dtype=float)
    if backend == "python":
        return _kernels_py.linear_volterra(psi, A, B, dW, float(dt), int(tau))
    if backend == "compiled" and BACKEND != "compiled":
        raise ImportError("compiled kernel not available")
    return _impl(psi, A, B, dW, float(dt), int(tau))

"""Pure numpy implementation of the Volterra sums (fallback and oracle)."""

import numpy as np


def linear_volterra(psi, A, B, dW, dt, tau):
    """X_i = psi_i + sum_{tau<=j<i} (A_ij X_j dt + B_ij X_j dW_j), i >= tau.

    Parameters
    ----------
    psi : ndarray, shape (K, S, n)
    A, B : ndarray, shape (K, K, Sa, n, n), Sa in {1, S}
    dW : ndarray, shape (S, N)
    dt : float
    tau : int

    Returns
    -------
    X : ndarray, shape (K, S, n), zero before ``tau``.
    """
    K, S, n = psi.shape
    X = np.zeros((K, S, n))
    dWt = dW.T[:, :, None]  # (N, S, 1)
    for i in range(tau, K):
        acc = psi[i].copy()
        if i > tau:
            Xj = X[tau:i]  # (m, S, n)
            # sum order follows j so the reduction is deterministic
            acc += (A[i, tau:i] @ Xj[..., None])[..., 0].sum(axis=0) * dt
            acc += (B[i, tau:i] @ (Xj * dWt[tau:i])[..., None])[..., 0].sum(axis=0)
        X[i] = acc
    return X

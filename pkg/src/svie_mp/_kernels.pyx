# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Volterra sums for linear SVIEs."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def linear_volterra(const double[:, :, ::1] psi,
                    const double[:, :, :, :, ::1] A,
                    const double[:, :, :, :, ::1] B,
                    const double[:, ::1] dW,
                    double dt,
                    Py_ssize_t tau):
    """X_i = psi_i + sum_{tau<=j<i} (A_ij X_j dt + B_ij X_j dW_j), i >= tau.

    A and B have shape (N+1, N+1, Sa, n, n) with Sa either 1 or S.
    Entries with i < tau are left at zero.
    """
    cdef Py_ssize_t K = psi.shape[0]
    cdef Py_ssize_t S = psi.shape[1]
    cdef Py_ssize_t n = psi.shape[2]
    cdef Py_ssize_t SA = A.shape[2]
    cdef Py_ssize_t SB = B.shape[2]
    cdef Py_ssize_t i, j, s, k, l, sa, sb
    cdef double acc, xa, xb, w
    X_arr = np.zeros((K, S, n))
    cdef double[:, :, ::1] X = X_arr
    with nogil:
        for i in range(tau, K):
            for s in range(S):
                sa = s if SA > 1 else 0
                sb = s if SB > 1 else 0
                for k in range(n):
                    acc = psi[i, s, k]
                    for j in range(tau, i):
                        w = dW[s, j]
                        xa = 0.0
                        xb = 0.0
                        for l in range(n):
                            xa = xa + A[i, j, sa, k, l] * X[j, s, l]
                            xb = xb + B[i, j, sb, k, l] * X[j, s, l]
                        acc = acc + xa * dt + xb * w
                    X[i, s, k] = acc
    return X_arr

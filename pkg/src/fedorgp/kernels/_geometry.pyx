# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled cosine-geometry kernels. Same contracts as ``_reference``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


cdef inline double _norm(const double[:, ::1] X, Py_ssize_t i, Py_ssize_t K) nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t k
    for k in range(K):
        acc += X[i, k] * X[i, k]
    return sqrt(acc)


def cosine_matrix(const double[:, ::1] A, const double[:, ::1] B):
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], K = A.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] O = out
    na = np.empty(n)
    nb = np.empty(m)
    cdef double[::1] NA = na, NB = nb
    with nogil:
        for i in range(n):
            NA[i] = _norm(A, i, K)
        for j in range(m):
            NB[j] = _norm(B, j, K)
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(K):
                    acc += A[i, k] * B[j, k]
                O[i, j] = acc / (NA[i] * NB[j])
    return out


def or_loss_grad(const double[:, ::1] A, const cnp.int64_t[::1] labels, const double[:, ::1] P,
                 double lam_s, double gamma):
    cdef Py_ssize_t n = A.shape[0], C = P.shape[0], K = A.shape[1]
    cdef Py_ssize_t i, c, k, y
    cdef double acc, sc, g, radial
    cdef double s_sum = 0.0, d_sum = 0.0
    cdef double w_own = -lam_s / n
    cdef double w_other = gamma / (n * (C - 1.0))
    na = np.empty(n)
    npn = np.empty(C)
    dpn = np.zeros((C, K))
    grad = np.empty((C, K))
    cdef double[::1] NA = na, NP = npn
    cdef double[:, ::1] DPN = dpn, GR = grad
    with nogil:
        for i in range(n):
            NA[i] = _norm(A, i, K)
        for c in range(C):
            NP[c] = _norm(P, c, K)
        for i in range(n):
            y = labels[i]
            for c in range(C):
                acc = 0.0
                for k in range(K):
                    acc += A[i, k] * P[c, k]
                sc = acc / (NA[i] * NP[c])
                if c == y:
                    s_sum += sc
                    g = w_own
                else:
                    d_sum += fabs(sc)
                    if sc > 0.0:
                        g = w_other
                    elif sc < 0.0:
                        g = -w_other
                    else:
                        g = 0.0
                if g != 0.0:
                    g = g / NA[i]
                    for k in range(K):
                        DPN[c, k] += g * A[i, k]
        for c in range(C):
            radial = 0.0
            for k in range(K):
                radial += DPN[c, k] * P[c, k]
            radial = radial / NP[c]
            for k in range(K):
                GR[c, k] = (DPN[c, k] - radial * P[c, k] / NP[c]) / NP[c]
    s = s_sum / n
    d = d_sum / (n * (C - 1.0))
    return lam_s * (1.0 - s) + gamma * d, s, d, grad


def alignment_grad(const double[:, ::1] R, const double[:, ::1] P, const unsigned char[::1] mask):
    cdef Py_ssize_t n = R.shape[0], K = R.shape[1]
    cdef Py_ssize_t i, k
    cdef double rn, c
    losses = np.zeros(n)
    grad = np.zeros((n, K))
    cdef double[::1] L = losses
    cdef double[:, ::1] G = grad
    with nogil:
        for i in range(n):
            if not mask[i]:
                continue
            rn = _norm(R, i, K)
            c = 0.0
            for k in range(K):
                c += R[i, k] * P[i, k]
            c = c / rn
            L[i] = 1.0 - c
            for k in range(K):
                G[i, k] = -(P[i, k] - c * R[i, k] / rn) / rn
    return losses, grad

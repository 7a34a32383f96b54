# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled per-example gradient kernels.

A weight's per-example gradient is the outer product of the layer input row
and the output backprop row, times the weight mask. These loops form each
entry in place instead of materialising the (batch, rows, cols) tensor.
Products are evaluated as ((a * d) * m) [* c] and reduced over examples in
index order, matching the numpy fallback's arithmetic.
"""

from libc.math cimport sqrt


def sqnorm_outer(const double[:, ::1] A, const double[:, ::1] D, const double[:, ::1] M,
                 bint masked, double[::1] out):
    """out[s] += sum_ij ((A[s,i] * D[s,j]) * M[i,j])**2"""
    cdef Py_ssize_t b = A.shape[0], m = A.shape[1], n = D.shape[1]
    cdef Py_ssize_t s, i, j
    cdef double acc, a, g
    for s in range(b):
        acc = 0.0
        for i in range(m):
            a = A[s, i]
            if masked:
                for j in range(n):
                    g = a * D[s, j] * M[i, j]
                    acc += g * g
            else:
                for j in range(n):
                    g = a * D[s, j]
                    acc += g * g
        out[s] += acc


def sqnorm_rows(const double[:, ::1] D, double[::1] out):
    """out[s] += sum_j D[s,j]**2"""
    cdef Py_ssize_t b = D.shape[0], n = D.shape[1]
    cdef Py_ssize_t s, j
    cdef double acc
    for s in range(b):
        acc = 0.0
        for j in range(n):
            acc += D[s, j] * D[s, j]
        out[s] += acc


def accum_outer(const double[:, ::1] A, const double[:, ::1] D, const double[:, ::1] M,
                bint masked, const double[::1] c, double[:, ::1] out):
    """out[i,j] += sum_s ((A[s,i] * D[s,j]) * M[i,j]) * c[s], summed in s order."""
    cdef Py_ssize_t b = A.shape[0], m = A.shape[1], n = D.shape[1]
    cdef Py_ssize_t s, i, j
    cdef double a, cs
    for s in range(b):
        cs = c[s]
        for i in range(m):
            a = A[s, i]
            if masked:
                for j in range(n):
                    out[i, j] += a * D[s, j] * M[i, j] * cs
            else:
                for j in range(n):
                    out[i, j] += a * D[s, j] * cs


def accum_rows(const double[:, ::1] D, const double[::1] c, double[::1] out):
    """out[j] += sum_s D[s,j] * c[s], summed in s order."""
    cdef Py_ssize_t b = D.shape[0], n = D.shape[1]
    cdef Py_ssize_t s, j
    cdef double cs
    for s in range(b):
        cs = c[s]
        for j in range(n):
            out[j] += D[s, j] * cs


def clip_rows(double[:, ::1] G, double clip_norm, double[::1] norms):
    """Scale each row of G in place to l2 norm <= clip_norm; rows already
    within the bound are left untouched. Writes pre-clip norms to ``norms``."""
    cdef Py_ssize_t b = G.shape[0], p = G.shape[1]
    cdef Py_ssize_t s, j
    cdef double acc, nrm, f
    for s in range(b):
        acc = 0.0
        for j in range(p):
            acc += G[s, j] * G[s, j]
        nrm = sqrt(acc)
        norms[s] = nrm
        if nrm > clip_norm:
            f = clip_norm / nrm
            for j in range(p):
                G[s, j] = G[s, j] * f

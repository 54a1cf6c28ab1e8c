# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled segment reductions over edge lists.

Accumulation runs in index order so results match the numpy fallback bit for bit.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def segment_sum_1d(const double[::1] values, const long long[::1] seg, Py_ssize_t n):
    cdef Py_ssize_t e, m = values.shape[0]
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    for e in range(m):
        o[seg[e]] += values[e]
    return out


def segment_sum_2d(const double[:, ::1] values, const long long[::1] seg, Py_ssize_t n):
    cdef Py_ssize_t e, j, s, m = values.shape[0], d = values.shape[1]
    out = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    for e in range(m):
        s = seg[e]
        for j in range(d):
            o[s, j] += values[e, j]
    return out


def segment_max_1d(const double[::1] values, const long long[::1] seg, Py_ssize_t n):
    cdef Py_ssize_t e, m = values.shape[0]
    out = np.full(n, -np.inf, dtype=np.float64)
    cdef double[::1] o = out
    cdef double v
    for e in range(m):
        v = values[e]
        if v > o[seg[e]]:
            o[seg[e]] = v
    return out

# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels for relative-position attention.

Same contracts as vrdu._kernels_py; float64 C-contiguous arrays only.
The scatter kernels exist because np.add.at is an order of magnitude
slower than a fused loop for the duplicate-heavy index patterns the
attention backward pass produces.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def gather_pair(double[:, ::1] table, long[:, ::1] rows, long[:, ::1] cols):
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t m = rows.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            out[i, j] = table[rows[i, j], cols[i, j]]
    return out_arr


def scatter_add_pair(double[:, ::1] acc, long[:, ::1] rows, long[:, ::1] cols,
                     double[:, ::1] grad):
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t m = rows.shape[1]
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            acc[rows[i, j], cols[i, j]] += grad[i, j]


def scatter_add_rows(double[:, ::1] acc, long[::1] ids, double[:, ::1] grad):
    cdef Py_ssize_t n = ids.shape[0]
    cdef Py_ssize_t d = grad.shape[1]
    cdef Py_ssize_t i, j
    cdef long r
    for i in range(n):
        r = ids[i]
        for j in range(d):
            acc[r, j] += grad[i, j]

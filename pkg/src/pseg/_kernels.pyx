# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Must agree with ``_kernels_py`` to the last bit for
the copy kernels and to rounding for the accumulating ones."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

ctypedef fused real:
    float
    double


def im2col(real[:, :, ::1] x, int k, int stride, int ho, int wo):
    cdef Py_ssize_t c = x.shape[0]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((c * k * k, ho * wo), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t ci, ki, kj, oy, ox, row, col
    with nogil:
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    col = 0
                    for oy in range(ho):
                        for ox in range(wo):
                            cols[row, col] = x[ci, oy * stride + ki, ox * stride + kj]
                            col += 1
    return out


def col2im(real[:, ::1] cols, int c, int hp, int wp, int k, int stride, int ho, int wo):
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((c, hp, wp), dtype=dtype)
    cdef real[:, :, ::1] x = out
    cdef Py_ssize_t ci, ki, kj, oy, ox, row, col
    with nogil:
        # Same accumulation order as the fallback: kernel offset outermost.
        for ki in range(k):
            for kj in range(k):
                for ci in range(c):
                    row = (ci * k + ki) * k + kj
                    col = 0
                    for oy in range(ho):
                        for ox in range(wo):
                            x[ci, oy * stride + ki, ox * stride + kj] += cols[row, col]
                            col += 1
    return out


def erode_valid(cnp.int64_t[:, ::1] labels, int radius):
    cdef Py_ssize_t h = labels.shape[0], w = labels.shape[1]
    out = np.ones((h, w), dtype=np.bool_)
    cdef cnp.npy_bool[:, ::1] valid = out
    cdef Py_ssize_t i, j, a, b, a0, a1, b0, b1
    cdef cnp.int64_t v
    with nogil:
        for i in range(h):
            a0 = i - radius if i >= radius else 0
            a1 = i + radius if i + radius < h else h - 1
            for j in range(w):
                b0 = j - radius if j >= radius else 0
                b1 = j + radius if j + radius < w else w - 1
                v = labels[i, j]
                for a in range(a0, a1 + 1):
                    for b in range(b0, b1 + 1):
                        if labels[a, b] != v:
                            valid[i, j] = 0
                            break
                    if not valid[i, j]:
                        break
    return out


def window_scatter(double[:, ::1] feats, double[:, ::1] centers, double threshold):
    """Per center: scatter matrix and count of features with |f.c| >= threshold."""
    cdef Py_ssize_t n = feats.shape[0], d = feats.shape[1], s = centers.shape[0]
    scat = np.zeros((s, d, d), dtype=np.float64)
    cnt = np.zeros(s, dtype=np.int64)
    cdef double[:, :, ::1] m = scat
    cdef cnp.int64_t[::1] counts = cnt
    cdef Py_ssize_t si, i, a, b
    cdef double dot, fa
    with nogil:
        for si in range(s):
            for i in range(n):
                dot = 0.0
                for a in range(d):
                    dot = dot + feats[i, a] * centers[si, a]
                if fabs(dot) < threshold:
                    continue
                counts[si] += 1
                for a in range(d):
                    fa = feats[i, a]
                    for b in range(a, d):
                        m[si, a, b] += fa * feats[i, b]
            for a in range(d):
                for b in range(a + 1, d):
                    m[si, b, a] = m[si, a, b]
    return scat, cnt

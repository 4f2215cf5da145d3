# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``.

Loop orders mirror the numpy versions so that accumulations happen in the
same sequence and results match bit for bit.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def conv_output_size(Py_ssize_t size, Py_ssize_t kernel, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - kernel) // stride + 1


def im2col(double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c * kh * kw, oh * ow), dtype=np.float64)
    cdef double[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, r, q, row, hi, wi
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for r in range(oh):
                            hi = r * stride + i - pad
                            if hi < 0 or hi >= h:
                                continue
                            for q in range(ow):
                                wi = q * stride + j - pad
                                if wi < 0 or wi >= w:
                                    continue
                                cols[b, row, r * ow + q] = x[b, ch, hi, wi]
    return out


def col2im(cols_in, x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef double[:, :, ::1] cols = np.ascontiguousarray(cols_in, dtype=np.float64).reshape(n, c * kh * kw, oh * ow)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, i, j, r, q, row, hi, wi
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for r in range(oh):
                            hi = r * stride + i - pad
                            if hi < 0 or hi >= h:
                                continue
                            for q in range(ow):
                                wi = q * stride + j - pad
                                if wi < 0 or wi >= w:
                                    continue
                                dx[b, ch, hi, wi] += cols[b, row, r * ow + q]
    return out


def maxpool_forward(double[:, :, :, ::1] x, Py_ssize_t size, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - size) // stride + 1
    cdef Py_ssize_t ow = (w - size) // stride + 1
    out_arr = np.empty((n, c, oh, ow), dtype=np.float64)
    arg_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef long long[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, r, q, di, dj, best_idx
    cdef double best, val
    with nogil:
        for b in range(n):
            for ch in range(c):
                for r in range(oh):
                    for q in range(ow):
                        best = x[b, ch, r * stride, q * stride]
                        best_idx = 0
                        for di in range(size):
                            for dj in range(size):
                                val = x[b, ch, r * stride + di, q * stride + dj]
                                if val > best:
                                    best = val
                                    best_idx = di * size + dj
                        out[b, ch, r, q] = best
                        arg[b, ch, r, q] = best_idx
    return out_arr, arg_arr


def maxpool_backward(double[:, :, :, ::1] dout, long long[:, :, :, ::1] arg, x_shape,
                     Py_ssize_t size, Py_ssize_t stride):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, r, q, di, dj
    with nogil:
        for b in range(n):
            for ch in range(c):
                # window offsets outermost to match the numpy accumulation order
                for di in range(size):
                    for dj in range(size):
                        for r in range(oh):
                            for q in range(ow):
                                if arg[b, ch, r, q] == di * size + dj:
                                    dx[b, ch, r * stride + di, q * stride + dj] += dout[b, ch, r, q]
    return out


def jacobi_eigh(a_in, double tol, int max_sweeps):
    a_arr = np.array(a_in, dtype=np.float64, copy=True, order="C")
    cdef Py_ssize_t n = a_arr.shape[0]
    v_arr = np.eye(n)
    cdef double[:, ::1] a = a_arr
    cdef double[:, ::1] v = v_arr
    cdef Py_ssize_t p, q, r
    cdef double norm = 0.0, off, apq, theta, t, c, s, xp, xq
    cdef int sweeps = 0
    for p in range(n):
        for q in range(n):
            norm += a[p, q] * a[p, q]
    norm = sqrt(norm)
    if norm == 0.0:
        return np.diag(a_arr).copy(), v_arr, 0
    with nogil:
        while sweeps < max_sweeps:
            off = 0.0
            for p in range(n):
                for q in range(p + 1, n):
                    off += a[p, q] * a[p, q]
            off = sqrt(2.0 * off)
            if off <= tol * norm:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if fabs(theta) > 1e150:
                        t = 0.5 / theta
                    else:
                        t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                        if theta < 0.0:
                            t = -t
                    c = 1.0 / sqrt(t * t + 1.0)
                    s = t * c
                    for r in range(n):
                        xp = a[r, p]
                        xq = a[r, q]
                        a[r, p] = c * xp - s * xq
                        a[r, q] = s * xp + c * xq
                    for r in range(n):
                        xp = a[p, r]
                        xq = a[q, r]
                        a[p, r] = c * xp - s * xq
                        a[q, r] = s * xp + c * xq
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    for r in range(n):
                        xp = v[r, p]
                        xq = v[r, q]
                        v[r, p] = c * xp - s * xq
                        v[r, q] = s * xp + c * xq
            sweeps += 1
    return np.diag(a_arr).copy(), v_arr, sweeps


def pq_lookup(cnp.uint8_t[:, ::1] indices, float[:, ::1] centers, double[:, ::1] x):
    cdef Py_ssize_t m = indices.shape[0], nseg = indices.shape[1]
    cdef Py_ssize_t k = centers.shape[0], n = centers.shape[1]
    cdef Py_ssize_t s = n // nseg
    cdef Py_ssize_t batch = x.shape[1]
    out = np.zeros((m, batch), dtype=np.float64)
    table_arr = np.empty((k, batch), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] table = table_arr
    cdef Py_ssize_t g, e, cc, b, r, col
    cdef double cv
    with nogil:
        for g in range(nseg):
            for cc in range(k):
                for b in range(batch):
                    table[cc, b] = 0.0
            for e in range(s):
                col = g * s + e
                for cc in range(k):
                    cv = <double>centers[cc, col]
                    for b in range(batch):
                        table[cc, b] += cv * x[col, b]
            for r in range(m):
                cc = indices[r, g]
                for b in range(batch):
                    y[r, b] += table[cc, b]
    return out

"""Pure-numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same floating-point accumulation order, so both backends produce
bit-identical results on the data paths used by training.
"""

import math

import numpy as np


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold (N, C, H, W) into (N, C*kh*kw, OH*OW) patch columns."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the image."""
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def maxpool_forward(x, size, stride):
    """Returns pooled output and the window-local argmax (first max on ties)."""
    n, c, h, w = x.shape
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    windows = np.empty((size * size, n, c, oh, ow), dtype=np.float64)
    for di in range(size):
        for dj in range(size):
            windows[di * size + dj] = x[:, :, di:di + stride * oh:stride, dj:dj + stride * ow:stride]
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]
    return out, arg.astype(np.int64)


def maxpool_backward(dout, arg, x_shape, size, stride):
    n, c, h, w = x_shape
    oh, ow = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape, dtype=np.float64)
    for di in range(size):
        for dj in range(size):
            hit = arg == di * size + dj
            if hit.any():
                dx[:, :, di:di + stride * oh:stride, dj:dj + stride * ow:stride] += np.where(hit, dout, 0.0)
    return dx


def jacobi_eigh(a, tol, max_sweeps):
    """Cyclic Jacobi on a symmetric matrix.

    Returns unsorted eigenvalues, eigenvectors (as columns) and the number of
    sweeps performed.  Convergence is declared when the off-diagonal Frobenius
    norm falls to ``tol * ||a||_F``.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    norm = math.sqrt(float(np.sum(a * a)))
    sweeps = 0
    if norm == 0.0:
        return np.diag(a).copy(), v, sweeps
    while sweeps < max_sweeps:
        off = math.sqrt(2.0 * float(np.sum(np.triu(a, 1) ** 2)))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                colp = a[:, p].copy()
                colq = a[:, q].copy()
                a[:, p] = c * colp - s * colq
                a[:, q] = s * colp + c * colq
                rowp = a[p, :].copy()
                rowq = a[q, :].copy()
                a[p, :] = c * rowp - s * rowq
                a[q, :] = s * rowp + c * rowq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        sweeps += 1
    return np.diag(a).copy(), v, sweeps


def pq_lookup(indices, centers, x):
    """Y = W_hat @ X using per-segment centroid dot-product tables.

    indices: (m, n/s) uint8; centers: (k, n) float32; x: (n, B) float64.
    """
    m, nseg = indices.shape
    k, n = centers.shape
    s = n // nseg
    batch = x.shape[1]
    cd = centers.astype(np.float64)
    y = np.zeros((m, batch), dtype=np.float64)
    for g in range(nseg):
        table = np.zeros((k, batch), dtype=np.float64)
        for e in range(s):
            table += cd[:, g * s + e, None] * x[g * s + e]
        y += table[indices[:, g]]
    return y

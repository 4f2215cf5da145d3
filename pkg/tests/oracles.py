"""Independent reference computations used to freeze expected values.

Nothing here imports the code under test except to perturb parameters for
finite differences.
"""

import itertools

import numpy as np


def direct_conv2d(x, w, b, stride=1, pad=0):
    """Nested-loop cross-correlation on (N, C, H, W) with (O, C, k, k) weights."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for bi in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[oc]
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[bi, ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = acc
    return out


def central_difference(f, arr, eps=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(analytic, numeric):
    """Max-norm relative error between two gradient arrays."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def best_kmeans_partition(points, k):
    """Exhaustive minimum-SSE partition of ``points`` into ``k`` nonempty groups."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    best = None
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) != k or labels[0] != 0:
            continue
        labels = np.array(labels)
        sse = sum(((points[labels == c] - points[labels == c].mean(0)) ** 2).sum() for c in range(k))
        if best is None or sse < best[0] - 1e-12:
            best = (sse, labels)
    return best


def brute_force_ncut(affinity, k):
    """Partition of nodes into ``k`` nonempty groups minimising the normalized cut."""
    n = affinity.shape[0]
    deg = affinity.sum(1)
    best = None
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) != k or labels[0] != 0:
            continue
        labels = np.array(labels)
        cost = 0.0
        for c in range(k):
            inside = labels == c
            cut = affinity[np.ix_(inside, ~inside)].sum()
            cost += cut / deg[inside].sum()
        if best is None or cost < best[0] - 1e-12:
            best = (cost, labels)
    return best


def canonical_partition(labels):
    """Partition as a frozenset of frozensets; invariant to cluster relabeling."""
    labels = np.asarray(labels)
    return frozenset(frozenset(np.flatnonzero(labels == c).tolist()) for c in np.unique(labels))

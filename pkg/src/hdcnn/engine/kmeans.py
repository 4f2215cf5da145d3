"""Lloyd's k-means with k-means++ seeding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hdcnn.errors import InvalidInputError

MAX_ITER = 300


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    sse: float
    n_iter: int
    sse_trace: list[float]


def _sq_dists(points, centers):
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _seed(points, k, rng):
    """k-means++ seeding: first center uniform, later ones sampled by D^2."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen[-1]][None])[:, 0]
    for _ in range(1, k):
        total = float(closest.sum())
        u = rng.random()
        if total > 0.0:
            idx = int(np.searchsorted(np.cumsum(closest), u * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(u * n) % n
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[idx][None])[:, 0])
    return points[chosen].copy()


def _update(points, labels, k, dists):
    """Recompute means; an empty cluster is re-seeded at the farthest point."""
    d = points.shape[1]
    sums = np.zeros((k, d))
    np.add.at(sums, labels, points)
    counts = np.bincount(labels, minlength=k)
    centers = np.zeros((k, d))
    nonempty = counts > 0
    centers[nonempty] = sums[nonempty] / counts[nonempty, None]
    if not nonempty.all():
        far = dists[np.arange(points.shape[0]), labels].copy()
        for c in np.flatnonzero(~nonempty):
            idx = int(np.argmax(far))
            centers[c] = points[idx]
            far[idx] = -1.0
    return centers


def extend_centers(points, centers, rng) -> np.ndarray:
    """Append one center drawn by D^2 sampling against ``centers``."""
    points = np.asarray(points, dtype=np.float64)
    closest = _sq_dists(points, centers).min(axis=1)
    total = float(closest.sum())
    u = rng.random()
    if total > 0.0:
        idx = min(int(np.searchsorted(np.cumsum(closest), u * total, side="right")), len(points) - 1)
    else:
        idx = int(u * len(points)) % len(points)
    return np.vstack([centers, points[idx]])


def kmeans(points, k, rng, max_iter=MAX_ITER, init=None) -> KMeansResult:
    """Cluster ``points`` (n, d) into ``k`` groups.

    Iterates until assignments stop changing or ``max_iter`` updates; ties in
    assignment go to the lowest center index.  ``init`` (k, d) replaces the
    k-means++ seeding.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise InvalidInputError("points must be a 2-D array")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise InvalidInputError(f"k must lie in [1, {n}], got {k}")
    if init is None:
        centers = _seed(points, k, rng)
    else:
        centers = np.array(init, dtype=np.float64)
        if centers.shape != (k, points.shape[1]):
            raise InvalidInputError(f"init must have shape ({k}, {points.shape[1]})")
    dists = _sq_dists(points, centers)
    labels = np.argmin(dists, axis=1)
    trace = [float(dists[np.arange(n), labels].sum())]
    it = 0
    for it in range(1, max_iter + 1):
        centers = _update(points, labels, k, dists)
        dists = _sq_dists(points, centers)
        new = np.argmin(dists, axis=1)
        trace.append(float(dists[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    sse = float(dists[np.arange(n), labels].sum())
    return KMeansResult(labels.astype(np.int64), centers, sse, it, trace)

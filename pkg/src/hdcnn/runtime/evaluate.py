"""Single-view and 10-view evaluation with timing and storage accounting."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from hdcnn.engine.network import Network, forward
from hdcnn.errors import InvalidInputError
from hdcnn.model import HdcnnModel, full_forward
from hdcnn.runtime.conditional import ExecPolicy

# A predictor maps an NCHW batch to (probs (n, C), executed components per image or None).
Predictor = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray | None]]

TIMING_BATCH = 50


def block_predictor(net: Network) -> Predictor:
    def run(batch):
        return forward(net, batch).output, None
    return run


def averaging_predictor(nets: list[Network]) -> Predictor:
    """Mean of the probability vectors of independently trained networks."""
    if not nets:
        raise InvalidInputError("model averaging needs at least one network")

    def run(batch):
        total = forward(nets[0], batch).output.copy()
        for net in nets[1:]:
            total += forward(net, batch).output
        return total / len(nets), None
    return run


def hdcnn_predictor(model: HdcnnModel, policy: ExecPolicy | None = None) -> Predictor:
    def run(batch):
        pred = full_forward(model, batch, policy)
        return pred.probs, pred.executed_counts.astype(np.float64)
    return run


def crop_views(images: np.ndarray, crop: int) -> list[np.ndarray]:
    """Four corner crops and the center crop, then their horizontal reflections."""
    h, w = images.shape[-2:]
    if crop > h or crop > w:
        raise InvalidInputError(f"crop {crop} larger than image {h}x{w}")
    top, left = (h - crop) // 2, (w - crop) // 2
    origins = [(0, 0), (0, w - crop), (h - crop, 0), (h - crop, w - crop), (top, left)]
    views = [images[..., r:r + crop, c:c + crop] for r, c in origins]
    return views + [v[..., ::-1] for v in views]


def multiview_predict(predictor: Predictor, images, crop: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Average of the ten per-view probability vectors."""
    probs = None
    executed = None
    views = crop_views(images, crop)
    for v in views:
        p, e = predictor(np.ascontiguousarray(v))
        probs = p.copy() if probs is None else probs + p
        if e is not None:
            executed = e.copy() if executed is None else executed + e
    probs /= len(views)
    if executed is not None:
        executed /= len(views)
    return probs, executed


def single_view(images, crop: int | None):
    if crop is None or crop == images.shape[-1]:
        return images
    h, w = images.shape[-2:]
    if crop > h or crop > w:
        raise InvalidInputError(f"crop {crop} larger than image {h}x{w}")
    top, left = (h - crop) // 2, (w - crop) // 2
    return np.ascontiguousarray(images[..., top:top + crop, left:left + crop])


def topk_error(probs, labels, k: int) -> float:
    """Percentage of images whose label is outside the top ``k``; ties rank the lower index first."""
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    hit = (order == np.asarray(labels)[:, None]).any(axis=1)
    return 100.0 * float(1.0 - hit.mean())


@dataclass
class EvalReport:
    top1_err: float
    top5_err: float | None
    mean_executed: float | None
    wall_time_sec: float
    param_bytes_raw: int
    param_bytes_stored: int
    probs: np.ndarray | None = None


def evaluate(predictor: Predictor, images, labels, view_mode: str = "single", crop: int | None = None,
             param_bytes: tuple[int, int] = (0, 0), batch_size: int = TIMING_BATCH,
             keep_probs: bool = False) -> EvalReport:
    """Top-1/top-5 error over ``images`` processed in batches of ``batch_size``.

    Wall time covers prediction only; top-5 is reported when there are at
    least five classes.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    if view_mode not in ("single", "multi"):
        raise InvalidInputError(f"unknown view mode {view_mode!r}")
    crop = images.shape[-1] if crop is None else crop
    chunks, executed = [], []
    start = time.perf_counter()
    for lo in range(0, len(labels), batch_size):
        batch = images[lo:lo + batch_size]
        if view_mode == "multi":
            p, e = multiview_predict(predictor, batch, crop)
        else:
            p, e = predictor(single_view(batch, crop))
        chunks.append(p)
        if e is not None:
            executed.append(e)
    elapsed = time.perf_counter() - start
    probs = np.concatenate(chunks)
    top5 = topk_error(probs, labels, 5) if probs.shape[1] >= 5 else None
    mean_exec = float(np.concatenate(executed).mean()) if executed else None
    return EvalReport(topk_error(probs, labels, 1), top5, mean_exec, elapsed,
                      int(param_bytes[0]), int(param_bytes[1]), probs if keep_probs else None)

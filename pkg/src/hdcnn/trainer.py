"""Staged training: building block, fine-component pretraining, fine-tuning.

Fine-tuning minimises

    E = -(1/n) sum_i log p_{y_i} + (lam/2) sum_k (t_k - (1/n) sum_i B_ik)^2

where p is the coarse-weighted average of the fine components and B the
L1-normalised coarse probabilities.  Gradients are derived by hand and flow
through the averaging quotient, the aggregation/normalisation and every
component back into the shared layers.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from hdcnn.engine.losses import PROB_FLOOR, multinomial_logistic_loss
from hdcnn.engine.network import Network, NetworkSpec, backward, flatten_grads, forward, init_network
from hdcnn.engine.optim import OptimizerState, sgd_step
from hdcnn.engine.rng import make_rng
from hdcnn.errors import InvalidInputError, TrainingDivergedError
from hdcnn.hierarchy import Hierarchy
from hdcnn.model import HdcnnModel

LogFn = Callable[[dict], None]


@dataclass
class TrainConfig:
    batch_size: int = 64
    iterations: int = 1000
    lr: float = 0.01
    drop_factor: float = 10.0
    drop_every: int | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lam: float = 20.0
    crop: int | None = None
    flip: bool = False
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.lam < 0:
            raise InvalidInputError("lam must be >= 0")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be >= 0")

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.lr, self.drop_factor, self.drop_every, self.momentum, self.weight_decay)

    def with_(self, **changes) -> TrainConfig:
        return replace(self, **changes)


class JsonlLog:
    """Collects training records and optionally appends them to a JSON-lines file."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=False) + "\n")


def center_crop(images: np.ndarray, crop: int | None) -> np.ndarray:
    if crop is None or crop == images.shape[-1]:
        return images
    h, w = images.shape[-2:]
    top, left = (h - crop) // 2, (w - crop) // 2
    return images[..., top:top + crop, left:left + crop]


class BatchStream:
    """Endless shuffled minibatches with optional random crops and flips."""

    def __init__(self, images, labels, batch_size, rng, crop=None, flip=False):
        if len(images) == 0:
            raise InvalidInputError("cannot sample batches from an empty set")
        self.images = images
        self.labels = np.asarray(labels)
        self.batch_size = min(batch_size, len(images))
        self.rng = rng
        self.crop = crop
        self.flip = flip
        self._order = np.zeros(0, np.int64)
        self._pos = 0

    def _indices(self):
        out = []
        need = self.batch_size
        while need:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(len(self.images))
                self._pos = 0
            take = self._order[self._pos:self._pos + need]
            self._pos += len(take)
            need -= len(take)
            out.append(take)
        return np.concatenate(out)

    def next(self):
        idx = self._indices()
        x = self.images[idx]
        h, w = x.shape[-2:]
        if self.crop is not None and self.crop < h:
            tops = self.rng.integers(0, h - self.crop + 1, len(idx))
            lefts = self.rng.integers(0, w - self.crop + 1, len(idx))
            x = np.stack([img[:, t:t + self.crop, l:l + self.crop] for img, t, l in zip(x, tops, lefts)])
        if self.flip:
            flips = self.rng.random(len(idx)) < 0.5
            x = np.where(flips[:, None, None, None], x[..., ::-1], x)
        return np.ascontiguousarray(x), self.labels[idx]


class _Tracker:
    """Averages loss/error over a logging interval and emits JSON records."""

    def __init__(self, stage, log, every):
        self.stage, self.log, self.every = stage, log, every
        self.reset()
        self.trace: list[float] = []

    def reset(self):
        self.loss = self.cons = self.err = 0.0
        self.count = 0

    def update(self, it, lr, loss, cons, err):
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"{self.stage}: non-finite loss", it)
        self.trace.append(loss)
        self.loss += loss
        self.cons += cons
        self.err += err
        self.count += 1
        self.last = (it, lr)
        if (it + 1) % self.every == 0:
            self.emit()

    def emit(self):
        """Write the running averages (also called once after the last iteration)."""
        if self.log is not None and self.count:
            it, lr = self.last
            self.log({"stage": self.stage, "iteration": it + 1, "lr": lr,
                      "loss": self.loss / self.count, "consistency_term": self.cons / self.count,
                      "top1_train_err": 100.0 * self.err / self.count})
        self.reset()


def _top1_err(probs, labels) -> float:
    return float(np.mean(np.argmax(probs, axis=1) != labels))


def train_network(net: Network, images, labels, cfg: TrainConfig, stage="block", log: LogFn | None = None,
                  stream_key=("batches",), frozen_prefix: Network | None = None) -> list[float]:
    """Plain SGD on the cross-entropy of ``net``; returns the per-iteration loss trace.

    With ``frozen_prefix`` the inputs pass through that (untouched) chain first.
    """
    stream = BatchStream(images, labels, cfg.batch_size, make_rng(cfg.seed, stage, *stream_key), cfg.crop, cfg.flip)
    state = cfg.optimizer()
    params = net.param_arrays()
    tracker = _Tracker(stage, log, cfg.log_every)
    for it in range(cfg.iterations):
        x, y = stream.next()
        if frozen_prefix is not None:
            x = forward(frozen_prefix, x).output
        tr = forward(net, x)
        loss, g = multinomial_logistic_loss(tr.output, y)
        grads, _ = backward(net, tr, g, input_grad=False)
        lr = state.lr
        try:
            sgd_step(params, flatten_grads(net, grads), state)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"{stage}: non-finite gradient", it) from exc
        tracker.update(it, lr, loss, 0.0, _top1_err(tr.output, y))
    tracker.emit()
    return tracker.trace


def pretrain_building_block(spec: NetworkSpec, images, labels, cfg: TrainConfig,
                            log: LogFn | None = None, stage="block") -> Network:
    """Initialise a network from ``cfg.seed`` and train it on the remainder split."""
    net = init_network(spec, make_rng(cfg.seed, stage, "init"))
    train_network(net, images, labels, cfg, stage=stage, log=log)
    return net


def pretrain_fine_component(model: HdcnnModel, k: int, images, labels, cfg: TrainConfig,
                            log: LogFn | None = None):
    """Train component ``k`` on the images whose label lies in its partial set.

    Shared layers are frozen; only component ``k``'s parameters change.
    """
    comp = model.fine[k]
    labels = np.asarray(labels)
    keep = np.isin(labels, comp.partial_set)
    if not keep.any():
        raise InvalidInputError(f"fine component {k} has no training images")
    local = comp.local_labels(labels[keep])
    train_network(comp.net, images[keep], local, cfg, stage=f"pretrain_fine{k}", log=log,
                  stream_key=("fine", k), frozen_prefix=model.shared)
    return comp


def pretrain_fine_components(model: HdcnnModel, images, labels, cfg: TrainConfig,
                             log: LogFn | None = None, workers: int = 1) -> None:
    """Pretrain every fine component; components are independent so they may run in threads."""
    ks = range(model.num_coarse)
    if workers <= 1:
        for k in ks:
            pretrain_fine_component(model, k, images, labels, cfg, log)
        return
    logs: dict[int, list[dict]] = {k: [] for k in ks}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(pretrain_fine_component, model, k, images, labels, cfg, logs[k].append) for k in ks]
        for f in futures:
            f.result()
    if log is not None:
        for k in ks:
            for rec in logs[k]:
                log(rec)


def consistency_targets(hierarchy: Hierarchy, class_sizes) -> np.ndarray:
    """Share of training images per coarse category, counting overlaps once per category."""
    sizes = np.asarray(class_sizes, dtype=np.float64)
    if sizes.shape != (hierarchy.num_fine,) or np.any(sizes <= 0):
        raise InvalidInputError("class_sizes must be positive, one per fine class")
    per_coarse = sizes @ hierarchy.membership.astype(np.float64)
    return per_coarse / per_coarse.sum()


@dataclass
class LossResult:
    loss: float
    cross_entropy: float
    consistency: float
    grads: dict[str, list[np.ndarray]] = field(repr=False)
    probs: np.ndarray = field(repr=False)
    coarse: np.ndarray = field(repr=False)


def hdcnn_loss_and_grad(model: HdcnnModel, batch, labels, targets, lam: float) -> LossResult:
    """Consistency-regularised loss of the full model and its gradient for every group."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    rows = np.arange(n)
    targets = np.asarray(targets, dtype=np.float64)
    membership = model.coarse_membership

    sh_tr = forward(model.shared, batch)
    h = sh_tr.output
    co_tr = forward(model.coarse, h)
    raw = co_tr.output @ membership
    rowsum = raw.sum(axis=1, keepdims=True)
    b = raw / rowsum
    denom = b.sum(axis=1)

    fine_trs = []
    p_y_comp = np.zeros((n, model.num_coarse))   # p_k(x_i)[y_i], zero when y_i is outside S_k
    num = np.zeros((n, model.num_classes))
    inside_list = []
    for comp in model.fine:
        tr = forward(comp.net, h)
        fine_trs.append(tr)
        inside = np.isin(labels, comp.partial_set)
        local = np.searchsorted(comp.partial_set, labels[inside])
        p_y_comp[inside, comp.k] = tr.output[inside, local]
        inside_list.append((inside, local))
        num[:, comp.partial_set] += b[:, comp.k, None] * tr.output
    probs = num / denom[:, None]

    p_y = probs[rows, labels]
    p_y_safe = np.maximum(p_y, PROB_FLOOR)
    ce = float(-np.mean(np.log(p_y_safe)))
    dev = targets - b.mean(axis=0)
    cons = 0.5 * lam * float(np.sum(dev * dev))
    loss = ce + cons
    if not math.isfinite(loss):
        raise TrainingDivergedError("non-finite fine-tuning loss")

    d_py = -1.0 / (n * p_y_safe)                      # dE/dp_{i,y_i}
    d_b = d_py[:, None] * (p_y_comp - p_y[:, None]) / denom[:, None]
    d_b += -lam * dev[None, :] / n
    d_raw = (d_b - np.sum(d_b * b, axis=1, keepdims=True)) / rowsum
    d_coarse_out = d_raw @ membership.T
    co_grads, dh = backward(model.coarse, co_tr, d_coarse_out)
    grads = {"coarse": flatten_grads(model.coarse, co_grads)}

    fine_grads = {}
    for comp, tr, (inside, local) in zip(model.fine, fine_trs, inside_list):
        g = np.zeros_like(tr.output)
        g[np.flatnonzero(inside), local] = (d_py * b[:, comp.k] / denom)[inside]
        f_grads, dh_k = backward(comp.net, tr, g)
        dh = dh + dh_k
        fine_grads[f"fine{comp.k}"] = flatten_grads(comp.net, f_grads)
    sh_grads, _ = backward(model.shared, sh_tr, dh, input_grad=False)
    grads = {"shared": flatten_grads(model.shared, sh_grads), **grads, **fine_grads}
    return LossResult(loss, ce, cons, grads, probs, b)


def hdcnn_loss(model: HdcnnModel, batch, labels, targets, lam: float) -> float:
    """Loss value only (used by finite-difference checks and reporting)."""
    return hdcnn_loss_and_grad(model, batch, labels, targets, lam).loss


def finetune(model: HdcnnModel, images, labels, targets, cfg: TrainConfig, log: LogFn | None = None,
             stage="finetune") -> list[float]:
    """SGD on the full model (shared layers included); returns the loss trace."""
    stream = BatchStream(images, labels, cfg.batch_size, make_rng(cfg.seed, stage, "batches"), cfg.crop, cfg.flip)
    state = cfg.optimizer()
    groups = model.param_groups()
    params = [a for g in groups.values() for a in g]
    tracker = _Tracker(stage, log, cfg.log_every)
    for it in range(cfg.iterations):
        x, y = stream.next()
        res = hdcnn_loss_and_grad(model, x, y, targets, cfg.lam)
        grads = [a for name in groups for a in res.grads[name]]
        lr = state.lr
        try:
            sgd_step(params, grads, state)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"{stage}: non-finite gradient", it) from exc
        tracker.update(it, lr, res.loss, res.consistency, _top1_err(res.probs, y))
    tracker.emit()
    return tracker.trace

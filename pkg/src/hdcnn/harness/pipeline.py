"""Experiment orchestration: staged training, evaluation, baselines and sweeps.

Every stage reads its inputs from memory or from the experiment directory and
writes its outputs back, so individual CLI subcommands and the full pipeline
share one code path.  All randomness derives from the configured seed.
"""

from __future__ import annotations

import csv
import io
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hdcnn.engine.network import NetworkSpec, forward
from hdcnn.engine.rng import make_rng
from hdcnn.errors import HdcnnError, StageError
from hdcnn.harness.bundle import load_block, load_bundle, save_block, save_bundle
from hdcnn.harness.config import ExperimentConfig
from hdcnn.harness.data import Dataset, load_dataset, save_dataset, synth_dataset
from hdcnn.hierarchy import Hierarchy, build_hierarchy, sample_held_out
from hdcnn.model import HdcnnModel, assemble
from hdcnn.runtime.conditional import ExecPolicy
from hdcnn.runtime.evaluate import (
    EvalReport,
    averaging_predictor,
    block_predictor,
    evaluate,
    hdcnn_predictor,
)
from hdcnn.runtime.pq import model_storage_bytes, network_storage_bytes, quantize_model
from hdcnn.trainer import (
    JsonlLog,
    center_crop,
    consistency_targets,
    finetune,
    pretrain_building_block,
    pretrain_fine_components,
)

METRIC_COLUMNS = ["model", "policy", "views", "quantized", "top1_err", "top5_err", "mean_executed",
                  "param_bytes_raw", "param_bytes_stored"]
TIMING_COLUMNS = ["model", "policy", "views", "quantized", "wall_time_sec", "workers"]
BASELINE_COLUMNS = ["model", "top1_err", "top5_err"]
SWEEP_COLUMNS = ["parameter", "value", "status", "top1_err", "top5_err", "mean_executed",
                 "mean_partial_size", "wall_time_sec"]

NO_FINETUNE = "hdcnn_no_finetune"


def finetuned_name(lam: float) -> str:
    return f"hdcnn_finetune_lam{lam:g}"


@contextmanager
def stage(name: str):
    """Re-raise any failure inside the block tagged with ``name``."""
    try:
        yield
    except StageError:
        raise
    except (HdcnnError, OSError, ValueError, ArithmeticError, KeyError) as exc:
        raise StageError(name, exc) from exc


class ExperimentLock:
    """Exclusive ownership of an experiment directory through a lock file."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise StageError("lock", f"{self.path} exists; another process owns this directory") from exc
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


@dataclass
class MetricRow:
    model: str
    policy: str
    views: str
    quantized: bool
    report: EvalReport

    def values(self) -> list[str]:
        r = self.report
        return [self.model, self.policy, self.views, "yes" if self.quantized else "no", _fmt(r.top1_err),
                _fmt(r.top5_err), _fmt(r.mean_executed), str(r.param_bytes_raw), str(r.param_bytes_stored)]


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{x:.6f}"


def write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class Experiment:
    """Artifacts of one (config, seed) run, computed on demand and cached on disk."""

    def __init__(self, cfg: ExperimentConfig, out, workers: int | None = None, fresh: bool = False):
        self.cfg = cfg
        self.out = Path(out)
        self.workers = workers or cfg.workers
        self.fresh = fresh
        self.out.mkdir(parents=True, exist_ok=True)
        self.log = JsonlLog(self.out / "train_log.jsonl")
        self._cache: dict[str, object] = {}

    # -- paths ---------------------------------------------------------------
    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def _have(self, *parts) -> bool:
        return not self.fresh and self.path(*parts).exists()

    def _cached(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    # -- data ------------------------------------------------------------------
    def data(self) -> tuple[Dataset, Dataset]:
        return self._cached("data", self._data)

    def _data(self):
        with stage("synth"):
            cfg = self.cfg
            if cfg.data_source == "file":
                return load_dataset(cfg.train_path, "train"), load_dataset(cfg.test_path, "test")
            if self._have("data", "train.hdc") and self._have("data", "test.hdc"):
                return load_dataset(self.path("data", "train.hdc"), "train"), load_dataset(self.path("data", "test.hdc"), "test")
            train, test = synth_dataset(cfg.synth, make_rng(cfg.seed, "synth"))
            self.path("data").mkdir(exist_ok=True)
            save_dataset(self.path("data", "train.hdc"), train)
            save_dataset(self.path("data", "test.hdc"), test)
            return train, test

    def tensors(self):
        def build():
            train, test = self.data()
            return train.tensors(), train.labels, test.tensors(), test.labels
        return self._cached("tensors", build)

    def split(self):
        def build():
            train, _ = self.data()
            with stage("split"):
                return sample_held_out(train.labels, self.cfg.per_class_heldout, make_rng(self.cfg.seed, "heldout"),
                                       train.num_classes)
        return self._cached("split", build)

    def remainder(self):
        x, y, _, _ = self.tensors()
        idx = self.split().remainder
        return x[idx], y[idx]

    # -- step 1: building block -------------------------------------------------
    def block(self):
        return self._cached("block", self._block)

    def _block(self):
        d = self.path("bundles", "block")
        if self._have("bundles", "block", "block.hdw"):
            with stage("pretrain"):
                return load_block(d)
        x, y = self.remainder()
        with stage("pretrain"):
            net = pretrain_building_block(self.cfg.block_spec, x, y, self.cfg.stage("block"), self.log)
            save_block(d, net)
            return net

    def heldout_probs(self):
        def build():
            x, y, _, _ = self.tensors()
            idx = self.split().heldout
            if len(idx) == 0:
                raise StageError("hierarchy", "per_class_heldout must be positive to estimate the confusion matrix")
            return forward(self.block(), center_crop(x[idx], self.cfg.crop)).output, y[idx]
        return self._cached("heldout_probs", build)

    def hierarchy(self, k: int | None = None, gamma: float | None = None, save: bool = True) -> Hierarchy:
        k = self.cfg.k if k is None else k
        gamma = self.cfg.gamma if gamma is None else gamma
        default = (k, gamma) == (self.cfg.k, self.cfg.gamma)
        if default and "hierarchy" in self._cache:
            return self._cache["hierarchy"]
        if default and save and self._have("hierarchy.txt"):
            h = Hierarchy.load(self.path("hierarchy.txt"))
        else:
            probs, labels = self.heldout_probs()
            with stage("hierarchy"):
                h, conf = build_hierarchy(probs, labels, k, gamma, make_rng(self.cfg.seed, "hierarchy", k))
            if default and save:
                h.save(self.path("hierarchy.txt"))
                write_csv(self.path("confusion.csv"), [f"pred{j + 1}" for j in range(conf.shape[1])],
                          [[f"{v:.6f}" for v in row] for row in conf])
        if default:
            self._cache["hierarchy"] = h
        return h

    def pretrained(self, hierarchy: Hierarchy | None = None, save: bool = True) -> HdcnnModel:
        custom = hierarchy is not None
        if not custom and "pretrained" in self._cache:
            return self._cache["pretrained"]
        if not custom and self._have("bundles", "pretrained", "manifest.txt"):
            with stage("pretrain-fine"):
                model = load_bundle(self.path("bundles", "pretrained"))
        else:
            h = hierarchy or self.hierarchy()
            block = self.block()
            x, y = self.remainder()
            with stage("pretrain-fine"):
                model = assemble(block, self.cfg.split_index, h, make_rng(self.cfg.seed, "assemble", h.num_coarse))
                pretrain_fine_components(model, x, y, self.cfg.stage("fine"), None if custom else self.log,
                                         self.workers)
                if save and not custom:
                    save_bundle(self.path("bundles", "pretrained"), model, notes={"stage": "pretrained"})
        if not custom:
            self._cache["pretrained"] = model
        return model

    # -- step 2: fine-tuning ---------------------------------------------------
    def finetuned(self, lam: float | None = None) -> HdcnnModel:
        lam = self.cfg.stage("finetune").lam if lam is None else lam
        name = finetuned_name(lam)
        if name in self._cache:
            return self._cache[name]
        if self._have("bundles", name, "manifest.txt"):
            with stage("finetune"):
                model = load_bundle(self.path("bundles", name))
        else:
            base = self.pretrained()
            x, y = self.remainder()
            with stage("finetune"):
                model = base.copy()
                targets = consistency_targets(model.hierarchy, np.bincount(y, minlength=model.num_classes))
                cfg = self.cfg.stage("finetune").with_(lam=lam)
                finetune(model, x, y, targets, cfg, self.log, stage=f"finetune_lam{lam:g}")
                save_bundle(self.path("bundles", name), model, notes={"stage": name})
        self._cache[name] = model
        return model

    # -- runtime ---------------------------------------------------------------
    def compressed(self, model: HdcnnModel, name: str) -> HdcnnModel:
        with stage("compress"):
            descriptors = self.cfg.pq_descriptors(model.coarse)
            qmodel, _ = quantize_model(model, descriptors)
            save_bundle(self.path("bundles", f"{name}_pq"), qmodel, descriptors, notes={"stage": f"{name}_pq"})
        return qmodel

    def _eval(self, predictor, views: str, param_bytes) -> EvalReport:
        _, _, xt, yt = self.tensors()
        with stage("eval"):
            return evaluate(predictor, xt, yt, views, self.cfg.crop, param_bytes)

    def eval_block(self, views=None) -> list[MetricRow]:
        block = self.block()
        nb = network_storage_bytes(block)
        return [MetricRow("block", "all", v, False, self._eval(block_predictor(block), v, nb))
                for v in (views or self.cfg.view_modes)]

    def eval_model(self, model: HdcnnModel, name: str, policies=None, views=None,
                   quantized: bool = False) -> list[MetricRow]:
        nb = model_storage_bytes(model)
        rows = []
        for v in views or self.cfg.view_modes:
            for pol in policies or [ExecPolicy.all()]:
                rows.append(MetricRow(name, pol.label(), v, quantized,
                                      self._eval(hdcnn_predictor(model, pol), v, nb)))
        return rows

    def beta_policies(self) -> list[ExecPolicy]:
        return [ExecPolicy.all()] + [ExecPolicy.threshold(b) for b in self.cfg.betas]

    # -- outputs -----------------------------------------------------------------
    def write_metrics(self, rows: list[MetricRow]) -> None:
        write_csv(self.path("metrics.csv"), METRIC_COLUMNS, [r.values() for r in rows])
        timing = [[r.model, r.policy, r.views, "yes" if r.quantized else "no",
                   f"{r.report.wall_time_sec:.6f}", str(self.workers)] for r in rows]
        write_csv(self.path("timings.csv"), TIMING_COLUMNS, timing)


def run_pipeline(cfg: ExperimentConfig, out, workers: int | None = None) -> Path:
    """Split, pretrain, cluster, assemble, pretrain fine components, fine-tune, evaluate."""
    out = Path(out)
    with ExperimentLock(out):
        for stale in ("bundles", "train_log.jsonl", "metrics.csv", "timings.csv"):
            p = out / stale
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
        (out / "config.ini").write_text(cfg.source_text or "# defaults\n")
        exp = Experiment(cfg, out, workers, fresh=True)
        lam = cfg.stage("finetune").lam
        rows = exp.eval_block()
        pretrained = exp.pretrained()
        if cfg.ablation:
            rows += exp.eval_model(pretrained, NO_FINETUNE, views=["single"])
            if lam != 0:
                rows += exp.eval_model(exp.finetuned(0.0), finetuned_name(0.0), views=["single"])
        final = exp.finetuned(lam)
        name = finetuned_name(lam)
        rows += exp.eval_model(final, name, views=cfg.view_modes)
        rows += exp.eval_model(final, name, policies=exp.beta_policies()[1:], views=["single"])
        if cfg.pq != "none":
            rows += exp.eval_model(exp.compressed(final, name), name, views=["single"], quantized=True)
        exp.write_metrics(rows)
        save_bundle(out / "bundle", final, notes={"stage": name})
    return out


# ---- baselines ---------------------------------------------------------------

def doubled_spec(spec: NetworkSpec) -> NetworkSpec:
    """Twice the filters in every convolutional layer; fully connected inputs follow."""
    lines = []
    first_conv = True
    for layer in spec.layers:
        if layer.kind == "conv2d":
            changes = {"out": 2 * layer["out"]}
            if not first_conv:
                changes["in"] = 2 * layer["in"]
            first_conv = False
            layer = layer.replace(**changes)
        lines.append(layer)
    return NetworkSpec.chained(spec.input_shape, lines, spec.split_index)


def run_baselines(cfg: ExperimentConfig, out, workers: int | None = None, members: int | None = None) -> Path:
    """Building block, model averaging, doubled width, and the three HD-CNN variants (single view)."""
    out = Path(out)
    exp = Experiment(cfg, out, workers)
    members = cfg.averaging_members if members is None else members
    x, y = exp.remainder()
    block = exp.block()
    nets = [block]
    block_cfg = cfg.stage("block")
    with stage("baselines"):
        for i in range(1, members):
            nets.append(pretrain_building_block(cfg.block_spec, x, y, block_cfg, None,
                                                stage=f"block_member{i}"))
        double = pretrain_building_block(doubled_spec(cfg.block_spec), x, y, block_cfg, None, stage="block_double")
    rows = [("block", exp._eval(block_predictor(block), "single", (0, 0)))]
    rows.append((f"model_averaging_{members}", exp._eval(averaging_predictor(nets), "single", (0, 0))))
    rows.append(("block_double", exp._eval(block_predictor(double), "single", (0, 0))))
    lam = cfg.stage("finetune").lam
    variants = [(NO_FINETUNE, exp.pretrained()), (finetuned_name(0.0), exp.finetuned(0.0)),
                (finetuned_name(lam), exp.finetuned(lam))]
    seen = set()
    for name, model in variants:
        if name in seen:
            continue
        seen.add(name)
        rows.append((name, exp._eval(hdcnn_predictor(model), "single", (0, 0))))
    table = [[name, _fmt(r.top1_err), _fmt(r.top5_err)] for name, r in rows]
    write_csv(out / "baselines.csv", BASELINE_COLUMNS, table)
    return out / "baselines.csv"


# ---- sweeps ------------------------------------------------------------------

def sweep(cfg: ExperimentConfig, out, parameter: str, grid, workers: int | None = None) -> Path:
    """One CSV row per grid value; failures are recorded and the sweep continues.

    ``beta`` re-evaluates the fine-tuned model; ``gamma`` and ``K`` rebuild
    the hierarchy and pretrain fresh fine components (no fine-tuning).
    """
    if parameter not in ("beta", "gamma", "K"):
        raise StageError("sweep", f"unknown sweep parameter {parameter!r}")
    out = Path(out)
    exp = Experiment(cfg, out, workers)
    rows = []
    for value in grid:
        start = time.perf_counter()
        try:
            if parameter == "beta":
                model = exp.finetuned()
                rep = exp.eval_model(model, "hdcnn", [ExecPolicy.threshold(float(value))], ["single"])[0].report
                sizes = [len(s) for s in model.hierarchy.partial_sets]
            else:
                k = int(value) if parameter == "K" else cfg.k
                gamma = float(value) if parameter == "gamma" else cfg.gamma
                h = exp.hierarchy(k, gamma, save=False)
                model = exp.pretrained(h, save=False)
                rep = exp.eval_model(model, "hdcnn", views=["single"])[0].report
                sizes = [len(s) for s in h.partial_sets]
            rows.append([parameter, f"{float(value):g}", "ok", _fmt(rep.top1_err), _fmt(rep.top5_err),
                         _fmt(rep.mean_executed), _fmt(float(np.mean(sizes))),
                         f"{time.perf_counter() - start:.6f}"])
        except (HdcnnError, ValueError) as exc:
            msg = str(exc).replace(",", ";").replace("\n", " ")
            rows.append([parameter, str(value), f"failed: {msg}", "", "", "", "",
                         f"{time.perf_counter() - start:.6f}"])
    path = out / f"sweep_{parameter}.csv"
    write_csv(path, SWEEP_COLUMNS, rows)
    return path

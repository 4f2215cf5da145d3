"""INI experiment configuration with desk-scale defaults."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

from hdcnn.engine.network import NetworkSpec, build_spec
from hdcnn.errors import FormatError, InvalidInputError
from hdcnn.harness.data import SynthSpec
from hdcnn.runtime.pq import PqDescriptor
from hdcnn.trainer import TrainConfig

DEFAULT_SPLIT = 3   # after the first pooling stage


def default_block_spec(channels: int, side: int, num_classes: int, split_index: int = DEFAULT_SPLIT,
                       width: int = 1) -> NetworkSpec:
    """Two conv+pool stages, one fully connected classifier; ``width`` scales the filter counts."""
    c1, c2 = 8 * width, 16 * width
    flat = c2 * (side // 4) * (side // 4)
    lines = [f"conv2d in={channels} out={c1} kernel=5 pad=2", "relu", "maxpool size=2",
             f"conv2d in={c1} out={c2} kernel=5 pad=2", "relu", "maxpool size=2",
             "flatten", f"fc in={flat} out={num_classes}", "softmax"]
    return build_spec((channels, side, side), lines, split_index)

STAGES = ("block", "fine", "finetune")

DEFAULT_TEXT = """\
# Desk-scale HD-CNN experiment.
[seed]
seed = 0

[data]
source = synth
groups = 4
per_group = 4
size = 32
channels = 1
similarity = 0.8
noise = 2.0
train_per_class = 200
test_per_class = 50
smoothing = 2.0
max_shift = 2

[model]
spec_file =
split_index = 3
crop = 28

[hierarchy]
k = 4
gamma = 5
per_class_heldout = 20

[train]
momentum = 0.9
weight_decay = 0.0005
lam = 20
flip = true
log_every = 50
workers = 1

[train.block]
batch_size = 64
iterations = 600
lr = 0.02
drop_every = 420

[train.fine]
batch_size = 64
iterations = 300
lr = 0.02
drop_every = 210

[train.finetune]
batch_size = 128
iterations = 150
lr = 0.002
drop_every =

[runtime]
betas = 1, 2, 4, 8, 16, inf
view_modes = single, multi
pq = auto
pq_s = 4
pq_k = 16
pq_seed = 0
ablation = true

[baselines]
averaging_members = 2
"""


def _float(text: str) -> float:
    return math.inf if text.strip().lower() in ("inf", "infinity") else float(text)


def _opt_int(text: str) -> int | None:
    text = text.strip()
    return None if text in ("", "none") else int(text)


@dataclass
class ExperimentConfig:
    seed: int = 0
    data_source: str = "synth"
    synth: SynthSpec = field(default_factory=SynthSpec)
    train_path: Path | None = None
    test_path: Path | None = None
    block_spec: NetworkSpec = field(default_factory=lambda: default_block_spec(1, 28, 16))
    split_index: int = DEFAULT_SPLIT
    crop: int | None = 28
    k: int = 4
    gamma: float = 5.0
    per_class_heldout: int = 20
    train: dict[str, TrainConfig] = field(default_factory=dict)
    workers: int = 1
    betas: tuple[float, ...] = (1, 2, 4, 8, 16, math.inf)
    view_modes: tuple[str, ...] = ("single", "multi")
    pq: str = "auto"
    pq_s: int = 4
    pq_k: int = 16
    pq_seed: int = 0
    ablation: bool = True
    averaging_members: int = 2
    source_text: str = ""

    def stage(self, name: str) -> TrainConfig:
        return self.train[name]

    def pq_descriptors(self, rear_net=None) -> list[PqDescriptor]:
        """Parsed descriptors; ``auto`` picks the two largest rear weight matrices."""
        if self.pq == "none":
            return []
        if self.pq == "auto":
            from hdcnn.runtime.pq import largest_rear_layers

            if rear_net is None:
                raise InvalidInputError("automatic layer choice needs the rear network")
            return [PqDescriptor(i, self.pq_s, self.pq_k, self.pq_seed)
                    for i in largest_rear_layers(rear_net, self.split_index)]
        return [PqDescriptor.from_text(d) for d in self.pq.split(";") if d.strip()]

    def validate(self) -> None:
        if self.data_source not in ("synth", "file"):
            raise InvalidInputError(f"data source must be synth or file, got {self.data_source!r}")
        if self.data_source == "file":
            for p in (self.train_path, self.test_path):
                if p is None or not Path(p).exists():
                    raise InvalidInputError(f"dataset file {p} does not exist")
        if not 0 <= self.split_index < len(self.block_spec.layers):
            raise InvalidInputError("split_index out of range")
        if self.k < 1:
            raise InvalidInputError("k must be >= 1")
        if self.data_source == "synth" and self.k > self.synth.num_classes:
            raise InvalidInputError(f"k={self.k} exceeds the class count {self.synth.num_classes}")
        if self.gamma <= 0:
            raise InvalidInputError("gamma must be positive")
        if self.per_class_heldout < 0:
            raise InvalidInputError("per_class_heldout must be >= 0")
        if any(not b > 0 for b in self.betas):
            raise InvalidInputError("betas must be positive")
        if self.workers < 1:
            raise InvalidInputError("workers must be >= 1")


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Layer ``text`` over the defaults and build an :class:`ExperimentConfig`."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None, strict=False)
    try:
        cp.read_string(DEFAULT_TEXT)
        cp.read_string(text)
    except configparser.Error as exc:
        raise FormatError(f"config: {exc}") from exc
    base_dir = Path(base_dir or ".")
    try:
        return _build(cp, base_dir, text)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise FormatError(f"config: {exc}") from exc


def _build(cp: configparser.ConfigParser, base_dir: Path, text: str) -> ExperimentConfig:
    d = cp["data"]
    synth = SynthSpec(groups=d.getint("groups"), per_group=d.getint("per_group"), size=d.getint("size"),
                      channels=d.getint("channels"), similarity=d.getfloat("similarity"),
                      noise=d.getfloat("noise"), train_per_class=d.getint("train_per_class"),
                      test_per_class=d.getint("test_per_class"), smoothing=d.getfloat("smoothing"),
                      max_shift=d.getint("max_shift"))
    m = cp["model"]
    split_index = m.getint("split_index")
    crop = _opt_int(m.get("crop", ""))
    if m.get("spec_file", "").strip():
        spec = NetworkSpec.from_text((base_dir / m["spec_file"].strip()).read_text())
    else:
        spec = default_block_spec(synth.channels, crop or synth.size, synth.num_classes, split_index)
    t = cp["train"]
    common = dict(momentum=t.getfloat("momentum"), weight_decay=t.getfloat("weight_decay"),
                  lam=t.getfloat("lam"), flip=t.getboolean("flip"), log_every=t.getint("log_every"))
    seed = cp["seed"].getint("seed")
    train = {}
    for name in STAGES:
        s = cp[f"train.{name}"]
        train[name] = TrainConfig(batch_size=s.getint("batch_size"), iterations=s.getint("iterations"),
                                  lr=s.getfloat("lr"), drop_every=_opt_int(s.get("drop_every", "")),
                                  crop=crop, seed=seed, **common)
    r = cp["runtime"]
    h = cp["hierarchy"]
    cfg = ExperimentConfig(
        seed=seed, data_source=d.get("source").strip(), synth=synth,
        train_path=(base_dir / d["train_path"]) if d.get("train_path") else None,
        test_path=(base_dir / d["test_path"]) if d.get("test_path") else None,
        block_spec=spec, split_index=split_index, crop=crop,
        k=h.getint("k"), gamma=_float(h["gamma"]), per_class_heldout=h.getint("per_class_heldout"),
        train=train, workers=t.getint("workers"),
        betas=tuple(_float(b) for b in r["betas"].split(",") if b.strip()),
        view_modes=tuple(v.strip() for v in r["view_modes"].split(",") if v.strip()),
        pq=r["pq"].strip(), pq_s=r.getint("pq_s"), pq_k=r.getint("pq_k"), pq_seed=r.getint("pq_seed"),
        ablation=r.getboolean("ablation"), averaging_members=cp["baselines"].getint("averaging_members"),
        source_text=text,
    )
    cfg.validate()
    return cfg


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return parse_config("")
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def with_overrides(cfg_text: str, **sections) -> str:
    """Append ``[section] key = value`` overrides to a config text."""
    lines = [cfg_text.rstrip("\n")]
    for section, values in sections.items():
        lines.append(f"\n[{section}]")
        lines += [f"{k} = {v}" for k, v in values.items()]
    return "\n".join(lines) + "\n"

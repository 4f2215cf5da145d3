"""Datasets: the HDC1 binary format and the synthetic confusable-group generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from hdcnn.errors import FormatError, InvalidInputError

MAGIC = b"HDC1"
HEADER = struct.Struct("<5I")

# fixed pixel normalisation so every stage sees identical inputs
PIXEL_CENTER = 128.0
PIXEL_SCALE = 64.0


@dataclass
class Dataset:
    images: np.ndarray   # (N, H, W, Ch) uint8
    labels: np.ndarray   # (N,) int64, 0-based in memory, 1-based on disk
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise InvalidInputError("images must be uint8 with shape (N, H, W, Ch)")
        if len(self.images) != len(self.labels):
            raise InvalidInputError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidInputError("label outside [0, C)")
        if self.split not in ("train", "test"):
            raise InvalidInputError(f"unknown split tag {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def tensors(self) -> np.ndarray:
        """Float NCHW array fed to networks."""
        return (self.images.transpose(0, 3, 1, 2).astype(np.float64) - PIXEL_CENTER) / PIXEL_SCALE

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def dump_dataset(ds: Dataset) -> bytes:
    n, h, w, ch = ds.images.shape
    head = MAGIC + HEADER.pack(n, h, w, ch, ds.num_classes)
    return head + (ds.labels + 1).astype("<u2").tobytes() + ds.images.tobytes(order="C")


def parse_dataset(data: bytes, split: str = "train") -> Dataset:
    if data[:4] != MAGIC:
        raise FormatError("bad magic, expected HDC1", 0)
    if len(data) < 4 + HEADER.size:
        raise FormatError("truncated header", len(data))
    n, h, w, ch, c = HEADER.unpack_from(data, 4)
    pos = 4 + HEADER.size
    pixels = n * h * w * ch
    if len(data) < pos + 2 * n:
        raise FormatError("truncated label table", len(data))
    labels = np.frombuffer(data, "<u2", n, pos).astype(np.int64)
    bad = np.flatnonzero((labels < 1) | (labels > c))
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} outside [1, {c}]", pos + 2 * int(bad[0]))
    pos += 2 * n
    if len(data) < pos + pixels:
        raise FormatError("truncated pixel payload", len(data))
    if len(data) > pos + pixels:
        raise FormatError("trailing bytes", pos + pixels)
    images = np.frombuffer(data, np.uint8, pixels, pos).reshape(n, h, w, ch).copy()
    return Dataset(images, labels - 1, c, split)


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dump_dataset(ds))


def load_dataset(path, split: str = "train") -> Dataset:
    return parse_dataset(Path(path).read_bytes(), split)


@dataclass(frozen=True)
class SynthSpec:
    groups: int = 4
    per_group: int = 4
    size: int = 32
    channels: int = 1
    similarity: float = 0.8
    noise: float = 0.6
    train_per_class: int = 200
    test_per_class: int = 50
    smoothing: float = 2.0
    max_shift: int = 2

    def __post_init__(self):
        if not 0.0 <= self.similarity <= 1.0:
            raise InvalidInputError("similarity must lie in [0, 1]")
        if min(self.groups, self.per_group, self.size, self.channels) < 1:
            raise InvalidInputError("groups, per_group, size and channels must be positive")
        if self.noise < 0 or self.max_shift < 0:
            raise InvalidInputError("noise and max_shift must be nonnegative")

    @property
    def num_classes(self) -> int:
        return self.groups * self.per_group


def _pattern(rng, spec: SynthSpec) -> np.ndarray:
    field = rng.normal(size=(spec.size, spec.size, spec.channels))
    if spec.smoothing > 0:
        field = gaussian_filter(field, sigma=(spec.smoothing, spec.smoothing, 0), mode="wrap")
    return field / field.std()


def class_templates(spec: SynthSpec, rng) -> np.ndarray:
    """(C, H, W, Ch) templates: group base mixed with a class pattern at the similarity ratio."""
    bases = [_pattern(rng, spec) for _ in range(spec.groups)]
    out = []
    for g in range(spec.groups):
        for _ in range(spec.per_group):
            own = _pattern(rng, spec)
            out.append(spec.similarity * bases[g] + (1.0 - spec.similarity) * own)
    return np.stack(out)


def _render(templates, labels, spec: SynthSpec, rng) -> np.ndarray:
    n = len(labels)
    shifts = rng.integers(-spec.max_shift, spec.max_shift + 1, size=(n, 2))
    noise = rng.normal(size=(n, spec.size, spec.size, spec.channels))
    imgs = np.empty((n, spec.size, spec.size, spec.channels))
    for i, (y, (dy, dx)) in enumerate(zip(labels, shifts)):
        imgs[i] = np.roll(templates[y], (dy, dx), axis=(0, 1))
    imgs += spec.noise * noise
    return np.clip(np.rint(PIXEL_CENTER + PIXEL_SCALE * 0.5 * imgs), 0, 255).astype(np.uint8)


def synth_dataset(spec: SynthSpec, rng) -> tuple[Dataset, Dataset]:
    """Train/test sets with ``per_group`` confusable classes in each of ``groups`` groups.

    Labels run group-major: class ``g * per_group + j`` belongs to group ``g``.
    """
    templates = class_templates(spec, rng)
    c = spec.num_classes
    train_labels = np.repeat(np.arange(c), spec.train_per_class)
    test_labels = np.repeat(np.arange(c), spec.test_per_class)
    train = Dataset(_render(templates, train_labels, spec, rng), train_labels, c, "train")
    test = Dataset(_render(templates, test_labels, spec, rng), test_labels, c, "test")
    return train, test


def group_of(spec: SynthSpec) -> np.ndarray:
    return np.repeat(np.arange(spec.groups), spec.per_group)

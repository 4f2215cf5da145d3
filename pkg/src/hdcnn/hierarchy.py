"""Learning a two-level category hierarchy from a classifier's confusions.

Pipeline: balanced held-out split -> confusion matrix -> symmetric distance
matrix -> spectral clustering into disjoint coarse categories -> overlapping
extension driven by per-class misclassification likelihoods.

Class and coarse-category ids are 0-based in memory; the text format written
by :meth:`Hierarchy.to_text` uses 1-based ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hdcnn.engine.eigh import eigh_symmetric
from hdcnn.engine.kmeans import kmeans
from hdcnn.errors import FormatError, HdcnnError, InvalidInputError

SIMPLEX_TOL = 1e-6
DEGENERATE_AFFINITY = 1e-8
SPECTRAL_ATTEMPTS = 5


@dataclass(frozen=True)
class HeldOutSplit:
    heldout: np.ndarray      # indices into the training set, ascending
    remainder: np.ndarray
    per_class_count: int


def sample_held_out(labels, per_class_count, rng, num_classes=None) -> HeldOutSplit:
    """Draw ``per_class_count`` images of every class without replacement."""
    labels = np.asarray(labels)
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    if per_class_count < 0:
        raise InvalidInputError("per_class_count must be >= 0")
    picked = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per_class_count:
            raise InvalidInputError(f"class {c} has {len(idx)} images, fewer than per_class_count={per_class_count}")
        picked.append(idx[rng.permutation(len(idx))[:per_class_count]])
    heldout = np.sort(np.concatenate(picked)).astype(np.int64) if picked else np.zeros(0, np.int64)
    mask = np.ones(len(labels), dtype=bool)
    mask[heldout] = False
    return HeldOutSplit(heldout, np.flatnonzero(mask).astype(np.int64), per_class_count)


def confusion_matrix(true_labels, predicted_labels, num_classes) -> np.ndarray:
    """Row-normalized confusion: ``F[j, l]`` is the fraction of class j predicted as l."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    counts = np.zeros((num_classes, num_classes))
    np.add.at(counts, (true_labels, predicted_labels), 1.0)
    sizes = counts.sum(axis=1)
    missing = np.flatnonzero(sizes == 0)
    if missing.size:
        raise InvalidInputError(f"classes {missing.tolist()} have no held-out images")
    return counts / sizes[:, None]


def confusion_from_probs(probs, true_labels) -> np.ndarray:
    """Confusion matrix of argmax predictions (ties go to the lowest class id)."""
    probs = np.asarray(probs)
    return confusion_matrix(true_labels, np.argmax(probs, axis=1), probs.shape[1])


def distance_from_confusion(confusion) -> np.ndarray:
    d = 1.0 - np.asarray(confusion, dtype=np.float64)
    np.fill_diagonal(d, 0.0)
    return 0.5 * (d + d.T)


def spectral_embedding(distance, k) -> np.ndarray:
    """Unit-length rows of the k smallest eigenvectors of the normalized Laplacian."""
    a = 1.0 - np.asarray(distance, dtype=np.float64)
    np.fill_diagonal(a, 0.0)
    if np.any(a.sum(axis=1) <= 0.0):
        a = a + DEGENERATE_AFFINITY
        np.fill_diagonal(a, 0.0)
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    lap = np.eye(a.shape[0]) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    lap = 0.5 * (lap + lap.T)
    _, vecs = eigh_symmetric(lap)
    emb = vecs[:, :k]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    return emb / np.where(norms > 0, norms, 1.0)


def spectral_cluster(distance, k, rng) -> np.ndarray:
    """Disjoint fine->coarse assignment (length C, values in [0, k))."""
    distance = np.asarray(distance, dtype=np.float64)
    c = distance.shape[0]
    if distance.shape != (c, c):
        raise InvalidInputError("distance matrix must be square")
    if not 2 <= k <= c:
        raise InvalidInputError(f"need 2 <= K <= C, got K={k}, C={c}")
    emb = spectral_embedding(distance, k)
    for _ in range(SPECTRAL_ATTEMPTS):
        labels = kmeans(emb, k, rng).assignments
        if len(np.unique(labels)) == k:
            return _canonical_ids(labels)
    raise HdcnnError(f"spectral clustering left an empty cluster after {SPECTRAL_ATTEMPTS} attempts")


def _canonical_ids(labels):
    """Relabel clusters in order of first appearance so ids are seed-independent."""
    mapping = {}
    for lab in labels:
        mapping.setdefault(int(lab), len(mapping))
    return np.array([mapping[int(lab)] for lab in labels], dtype=np.int64)


def membership_matrix(assignment, k) -> np.ndarray:
    assignment = np.asarray(assignment, dtype=np.int64)
    m = np.zeros((len(assignment), k), dtype=bool)
    m[np.arange(len(assignment)), assignment] = True
    return m


def aggregate_coarse(fine_probs, membership) -> np.ndarray:
    """Sum fine probabilities into coarse categories, then L1-normalize rows.

    ``membership`` is a (C, K) boolean matrix; a disjoint mapping has one True
    per row, an overlapping one may have several.
    """
    fine_probs = np.asarray(fine_probs, dtype=np.float64)
    membership = np.asarray(membership)
    if fine_probs.ndim != 2 or fine_probs.shape[1] != membership.shape[0]:
        raise InvalidInputError(f"fine_probs {fine_probs.shape} incompatible with mapping {membership.shape}")
    if np.any(fine_probs < -SIMPLEX_TOL) or np.any(np.abs(fine_probs.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise InvalidInputError("fine_probs rows must lie on the probability simplex")
    raw = fine_probs @ membership.astype(np.float64)
    return raw / raw.sum(axis=1, keepdims=True)


def misclassification_likelihood(coarse_probs, labels, num_classes) -> np.ndarray:
    """``u[k, j]``: mean coarse probability of category k over held-out images of class j."""
    coarse_probs = np.asarray(coarse_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = coarse_probs.shape[1]
    sums = np.zeros((num_classes, k))
    np.add.at(sums, labels, coarse_probs)
    counts = np.bincount(labels, minlength=num_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise InvalidInputError(f"classes {missing.tolist()} absent from the held-out set")
    return (sums / counts[:, None]).T


def likelihood_threshold(gamma, k) -> float:
    if not gamma > 0:
        raise InvalidInputError("gamma must be positive")
    return 0.0 if math.isinf(gamma) else 1.0 / (gamma * k)


@dataclass
class Hierarchy:
    num_coarse: int
    disjoint: np.ndarray        # (C,) coarse id per fine class
    membership: np.ndarray      # (C, K) bool, the overlapping mapping
    gamma: float = math.inf
    u: np.ndarray | None = None  # (K, C)

    def __post_init__(self):
        self.disjoint = np.asarray(self.disjoint, dtype=np.int64)
        self.membership = np.asarray(self.membership, dtype=bool)
        self.validate()

    @property
    def num_fine(self) -> int:
        return len(self.disjoint)

    @property
    def partial_sets(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.membership[:, k]) for k in range(self.num_coarse)]

    def overlapping(self, j) -> list[int]:
        return np.flatnonzero(self.membership[j]).tolist()

    def disjoint_membership(self) -> np.ndarray:
        return membership_matrix(self.disjoint, self.num_coarse)

    def validate(self) -> None:
        c, k = self.num_fine, self.num_coarse
        if self.membership.shape != (c, k):
            raise InvalidInputError(f"membership shape {self.membership.shape} != ({c}, {k})")
        if self.disjoint.size and (self.disjoint.min() < 0 or self.disjoint.max() >= k):
            raise InvalidInputError("disjoint mapping out of range")
        if len(np.unique(self.disjoint)) != k:
            raise InvalidInputError("every coarse category needs at least one fine class")
        if not self.membership[np.arange(c), self.disjoint].all():
            raise InvalidInputError("overlapping mapping must contain the disjoint one")
        if self.u is not None and self.u.shape != (k, c):
            raise InvalidInputError(f"u shape {self.u.shape} != ({k}, {c})")

    def to_text(self) -> str:
        gamma = "inf" if math.isinf(self.gamma) else repr(float(self.gamma))
        lines = [f"K={self.num_coarse} gamma={gamma}"]
        for j in range(self.num_fine):
            over = ",".join(str(k + 1) for k in self.overlapping(j))
            lines.append(f"fine {j + 1} disjoint {self.disjoint[j] + 1} overlapping {over}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, u=None) -> Hierarchy:
        rows = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
        rows = [r for r in rows if r]
        if not rows:
            raise FormatError("empty hierarchy file")
        try:
            head = dict(part.split("=", 1) for part in rows[0].split())
            k = int(head["K"])
            gamma = float(head["gamma"])
            disjoint, over = [], []
            for lineno, row in enumerate(rows[1:], 2):
                parts = row.split()
                if len(parts) != 6 or parts[0] != "fine" or parts[2] != "disjoint" or parts[4] != "overlapping":
                    raise FormatError(f"line {lineno}: malformed entry {row!r}")
                if int(parts[1]) != lineno - 1:
                    raise FormatError(f"line {lineno}: fine ids must be consecutive from 1")
                disjoint.append(int(parts[3]) - 1)
                over.append([int(x) - 1 for x in parts[5].split(",")])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed hierarchy header or entry: {exc}") from exc
        membership = np.zeros((len(disjoint), k), dtype=bool)
        for j, ks in enumerate(over):
            membership[j, ks] = True
        return cls(k, np.array(disjoint), membership, gamma, u)

    def save(self, path) -> None:
        """Write the text file and, when present, ``u`` as a CSV sidecar (``<stem>.u.csv``)."""
        path = Path(path)
        path.write_text(self.to_text())
        if self.u is not None:
            np.savetxt(u_sidecar(path), self.u, delimiter=",", fmt="%.17g")

    @classmethod
    def load(cls, path) -> Hierarchy:
        path = Path(path)
        side = u_sidecar(path)
        u = np.atleast_2d(np.loadtxt(side, delimiter=",")) if side.exists() else None
        h = cls.from_text(path.read_text())
        if u is not None:
            h.u = u.reshape(h.num_coarse, h.num_fine)
        return h


def u_sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".u.csv")


def extend_overlapping(disjoint, u, gamma) -> Hierarchy:
    """Add every fine class j to coarse category k when ``u[k, j] >= 1/(gamma*K)``.

    ``gamma = inf`` makes the threshold 0, which puts every class everywhere.
    """
    disjoint = np.asarray(disjoint, dtype=np.int64)
    u = np.asarray(u, dtype=np.float64)
    k = u.shape[0]
    membership = (u >= likelihood_threshold(gamma, k)).T
    membership[np.arange(len(disjoint)), disjoint] = True
    return Hierarchy(k, disjoint, membership, float(gamma), u)


def single_coarse_hierarchy(num_classes) -> Hierarchy:
    """Degenerate K=1 hierarchy: one coarse category holding every class."""
    return Hierarchy(1, np.zeros(num_classes, np.int64), np.ones((num_classes, 1), bool),
                     math.inf, np.ones((1, num_classes)))


def build_hierarchy(heldout_probs, heldout_labels, k, gamma, rng) -> tuple[Hierarchy, np.ndarray]:
    """Full hierarchy learning from a building block's held-out predictions.

    Returns the hierarchy and the confusion matrix it was built from.
    """
    heldout_probs = np.asarray(heldout_probs, dtype=np.float64)
    c = heldout_probs.shape[1]
    confusion = confusion_from_probs(heldout_probs, heldout_labels)
    if k == 1:
        return single_coarse_hierarchy(c), confusion
    disjoint = spectral_cluster(distance_from_confusion(confusion), k, rng)
    coarse = aggregate_coarse(heldout_probs, membership_matrix(disjoint, k))
    u = misclassification_likelihood(coarse, heldout_labels, c)
    return extend_overlapping(disjoint, u, gamma), confusion

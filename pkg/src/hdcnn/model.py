"""The hierarchical model: shared layers, coarse component, fine components.

The building block's layer chain is cut at ``split_index``.  The prefix is
shared; the coarse component is a full copy of the rear layers followed by
fine-to-coarse aggregation over the overlapping mapping; each fine component
is a copy of the rear layers whose classifier is resized to its partial set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hdcnn.engine.network import Network, NetworkSpec, forward, init_layer
from hdcnn.errors import InvalidInputError
from hdcnn.hierarchy import Hierarchy, aggregate_coarse
from hdcnn.runtime.conditional import ExecPolicy, policy_mask


@dataclass
class FineComponent:
    k: int
    partial_set: np.ndarray   # sorted fine class ids; position i <-> local label i
    net: Network

    def __post_init__(self):
        ps = np.asarray(self.partial_set, dtype=np.int64)
        if ps.size == 0 or np.any(np.diff(ps) <= 0):
            raise InvalidInputError("partial set must be nonempty, sorted and duplicate-free")
        if self.net.label_count != ps.size:
            raise InvalidInputError(f"component {self.k}: classifier width {self.net.label_count} != |S|={ps.size}")
        self.partial_set = ps

    def local_labels(self, labels) -> np.ndarray:
        """Map global fine labels (all inside the partial set) to local indices."""
        pos = np.searchsorted(self.partial_set, labels)
        if np.any(pos >= self.partial_set.size) or np.any(self.partial_set[np.minimum(pos, self.partial_set.size - 1)] != labels):
            raise InvalidInputError(f"labels outside partial set of component {self.k}")
        return pos


@dataclass
class HdcnnModel:
    block_spec: NetworkSpec
    split_index: int
    shared: Network
    coarse: Network
    fine: list[FineComponent]
    hierarchy: Hierarchy
    coarse_membership: np.ndarray = field(init=False)

    def __post_init__(self):
        self.coarse_membership = self.hierarchy.membership.astype(np.float64)
        if len(self.fine) != self.hierarchy.num_coarse:
            raise InvalidInputError("one fine component per coarse category is required")
        for k, comp in enumerate(self.fine):
            if comp.k != k or not np.array_equal(comp.partial_set, self.hierarchy.partial_sets[k]):
                raise InvalidInputError(f"fine component {k} does not match the hierarchy")
        if self.coarse.label_count != self.hierarchy.num_fine:
            raise InvalidInputError("coarse component width differs from the hierarchy's class count")

    @property
    def num_coarse(self) -> int:
        return self.hierarchy.num_coarse

    @property
    def num_classes(self) -> int:
        return self.hierarchy.num_fine

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.shared.spec.input_shape

    def param_groups(self) -> dict[str, list[np.ndarray]]:
        groups = {"shared": self.shared.param_arrays(), "coarse": self.coarse.param_arrays()}
        for comp in self.fine:
            groups[f"fine{comp.k}"] = comp.net.param_arrays()
        return groups

    def param_arrays(self) -> list[np.ndarray]:
        return [a for group in self.param_groups().values() for a in group]

    def copy(self) -> HdcnnModel:
        return HdcnnModel(self.block_spec, self.split_index, self.shared.copy(), self.coarse.copy(),
                          [FineComponent(c.k, c.partial_set.copy(), c.net.copy()) for c in self.fine],
                          self.hierarchy)


def assemble(block: Network, split_index: int, hierarchy: Hierarchy, rng) -> HdcnnModel:
    """Build an HD-CNN from a trained building block.

    Shared and coarse parameters are copies of the block's; fine components
    copy the rear layers except their classifier, which is freshly drawn from
    ``rng`` with width ``|S_k|``.
    """
    if hierarchy.num_fine != block.label_count:
        raise InvalidInputError(f"hierarchy has {hierarchy.num_fine} classes, block predicts {block.label_count}")
    n_layers = len(block.spec.layers)
    if not 0 <= split_index < n_layers:
        raise InvalidInputError(f"split_index must lie in [0, {n_layers})")
    shared = block.slice(0, split_index).copy()
    coarse = block.slice(split_index).copy()
    cls_idx = coarse.spec.classifier_index()
    fine = []
    for k, ps in enumerate(hierarchy.partial_sets):
        spec = coarse.spec.with_classifier_width(len(ps))
        params = []
        for i, (layer, p) in enumerate(zip(spec.layers, coarse.params)):
            if i == cls_idx:
                params.append(init_layer(layer, rng, classifier=True))
            else:
                params.append({name: arr.copy() for name, arr in p.items()})
        fine.append(FineComponent(k, ps, Network(spec, params)))
    return HdcnnModel(block.spec, split_index, shared, coarse, fine, hierarchy)


def shared_forward(model: HdcnnModel, batch) -> np.ndarray:
    return forward(model.shared, batch).output


def coarse_from_shared(model: HdcnnModel, shared_act) -> tuple[np.ndarray, np.ndarray]:
    """Returns (fine prediction of the coarse component, coarse probabilities B)."""
    fine_pred = forward(model.coarse, shared_act).output
    return fine_pred, aggregate_coarse(fine_pred, model.hierarchy.membership)


def coarse_forward(model: HdcnnModel, batch) -> np.ndarray:
    return coarse_from_shared(model, shared_forward(model, batch))[1]


def embed_partial(probs, partial_set, num_classes) -> np.ndarray:
    out = np.zeros((probs.shape[0], num_classes))
    out[:, partial_set] = probs
    return out


def fine_forward(model: HdcnnModel, k: int, shared_act) -> np.ndarray:
    """Prediction of fine component ``k`` embedded as a length-C vector per image."""
    if not 0 <= k < model.num_coarse:
        raise InvalidInputError(f"fine component {k} out of range [0, {model.num_coarse})")
    comp = model.fine[k]
    return embed_partial(forward(comp.net, shared_act).output, comp.partial_set, model.num_classes)


def probabilistic_average(coarse_probs, component_probs, mask=None) -> np.ndarray:
    """Weighted average of component predictions by masked coarse probabilities.

    ``coarse_probs``: (n, K); ``component_probs``: (n, K, C); ``mask``: (n, K)
    bool or None for all.  Rows whose masked weights sum to zero fall back to
    the single component with the largest coarse probability.
    """
    b = np.atleast_2d(np.asarray(coarse_probs, dtype=np.float64))
    comps = np.asarray(component_probs, dtype=np.float64)
    if comps.ndim == 2:
        comps = comps[None]
    n, k = b.shape
    mask = np.ones((n, k), bool) if mask is None else np.atleast_2d(np.asarray(mask, bool))
    num = np.zeros((n, comps.shape[2]))
    den = np.zeros(n)
    for c in range(k):
        w = np.where(mask[:, c], b[:, c], 0.0)
        num += w[:, None] * comps[:, c]
        den += w
    out = np.empty_like(num)
    ok = den > 0
    out[ok] = num[ok] / den[ok, None]
    if not ok.all():
        rows = np.flatnonzero(~ok)
        out[rows] = comps[rows, np.argmax(b[rows], axis=1)]
    return out


@dataclass
class FinalPrediction:
    probs: np.ndarray      # (n, C)
    coarse: np.ndarray     # (n, K) coarse weights used
    executed: np.ndarray   # (n, K) bool, components evaluated per image

    @property
    def executed_counts(self) -> np.ndarray:
        return self.executed.sum(axis=1)


def full_forward(model: HdcnnModel, batch, policy: ExecPolicy | None = None, shared_act=None) -> FinalPrediction:
    """End-to-end prediction; shared layers run once and feed every component.

    Under a threshold policy each fine component only sees the images whose
    coarse weight clears the threshold.
    """
    policy = ExecPolicy.all() if policy is None else policy
    h = shared_forward(model, batch) if shared_act is None else shared_act
    _, b = coarse_from_shared(model, h)
    mask = policy_mask(b, policy)
    n, c = b.shape[0], model.num_classes
    num = np.zeros((n, c))
    den = np.zeros(n)
    for k in range(model.num_coarse):
        rows = mask[:, k]
        if rows.all():
            num += b[:, k, None] * fine_forward(model, k, h)
            den += b[:, k]
        elif rows.any():
            idx = np.flatnonzero(rows)
            num[idx] += b[idx, k, None] * fine_forward(model, k, h[idx])
            den[idx] += b[idx, k]
    probs = np.empty_like(num)
    ok = den > 0
    probs[ok] = num[ok] / den[ok, None]
    if not ok.all():
        for i in np.flatnonzero(~ok):
            top = int(np.argmax(b[i]))
            mask[i] = False
            mask[i, top] = True
            probs[i] = fine_forward(model, top, h[i:i + 1])[0]
    return FinalPrediction(probs, b, mask)

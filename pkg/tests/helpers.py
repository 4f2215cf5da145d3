"""Small shared builders for model-level tests."""

import numpy as np

from hdcnn.engine import init_network, make_rng
from hdcnn.engine.network import build_spec
from hdcnn.hierarchy import Hierarchy
from hdcnn.model import assemble

TINY_LINES = [
    "conv2d in=1 out=2 kernel=3 pad=1", "relu", "maxpool size=2",
    "conv2d in=2 out=3 kernel=3 pad=1", "relu", "avgpool size=2",
    "flatten", "fc in=12 out=4", "softmax",
]


def overlapping_hierarchy():
    """C=4, K=2: classes {0,1} -> 0, {2,3} -> 1, class 1 also in 1, class 2 also in 0."""
    membership = np.array([[1, 0], [1, 1], [1, 1], [0, 1]], bool)
    return Hierarchy(2, np.array([0, 0, 1, 1]), membership, 5.0)


def tiny_model(seed=0, hierarchy=None):
    spec = build_spec((1, 8, 8), TINY_LINES, 3)
    block = init_network(spec, make_rng(seed, "block"))
    return assemble(block, 3, hierarchy or overlapping_hierarchy(), make_rng(seed, "assemble")), block


def tiny_batch(n=3, seed=0):
    rng = make_rng(seed, "batch")
    return rng.normal(size=(n, 1, 8, 8)), rng.integers(0, 4, n)

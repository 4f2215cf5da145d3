"""Deterministic CPU neural-network and numerics core."""

from hdcnn.engine.checkpoint import load_network, load_tensors, save_network, save_tensors
from hdcnn.engine.eigh import eigh_symmetric
from hdcnn.engine.kmeans import KMeansResult, kmeans
from hdcnn.engine.losses import PROB_FLOOR, multinomial_logistic_loss
from hdcnn.engine.network import (
    LayerSpec,
    Network,
    NetworkSpec,
    Trace,
    backward,
    flatten_grads,
    forward,
    init_network,
    predict,
    softmax,
)
from hdcnn.engine.optim import OptimizerState, sgd_step
from hdcnn.engine.rng import make_rng

__all__ = [
    "KMeansResult", "LayerSpec", "Network", "NetworkSpec", "OptimizerState", "PROB_FLOOR", "Trace",
    "backward", "eigh_symmetric", "flatten_grads", "forward", "init_network", "kmeans",
    "load_network", "load_tensors", "make_rng", "multinomial_logistic_loss", "predict",
    "save_network", "save_tensors", "sgd_step", "softmax",
]

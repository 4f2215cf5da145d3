"""Conditional execution of fine components."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from hdcnn.errors import InvalidInputError


@dataclass(frozen=True)
class ExecPolicy:
    mode: str = "all"
    beta: float | None = None

    def __post_init__(self):
        if self.mode not in ("all", "threshold"):
            raise InvalidInputError(f"unknown execution mode {self.mode!r}")
        if self.mode == "threshold":
            # beta = inf is accepted as the B_t -> 0 limit
            if self.beta is None or not self.beta > 0 or math.isnan(self.beta):
                raise InvalidInputError("threshold policy needs beta > 0")

    @classmethod
    def all(cls) -> ExecPolicy:
        return cls("all")

    @classmethod
    def threshold(cls, beta: float) -> ExecPolicy:
        return cls("threshold", float(beta))

    def label(self) -> str:
        return "all" if self.mode == "all" else f"beta={self.beta:g}"


def coarse_threshold(beta: float, k: int) -> float:
    return 0.0 if math.isinf(beta) else 1.0 / (beta * k)


def conditional_mask(coarse_probs, beta, k=None) -> np.ndarray:
    """Boolean (n, K) mask of components to execute: ``B_ik >= 1/(beta*K)``.

    A row whose mask would be empty falls back to its argmax component.
    """
    coarse_probs = np.atleast_2d(np.asarray(coarse_probs, dtype=np.float64))
    k = coarse_probs.shape[1] if k is None else k
    if coarse_probs.shape[1] != k:
        raise InvalidInputError(f"coarse probabilities have {coarse_probs.shape[1]} columns, expected {k}")
    mask = coarse_probs >= coarse_threshold(beta, k)
    empty = ~mask.any(axis=1)
    if empty.any():
        rows = np.flatnonzero(empty)
        mask[rows, np.argmax(coarse_probs[rows], axis=1)] = True
    return mask


def policy_mask(coarse_probs, policy: ExecPolicy) -> np.ndarray:
    if policy.mode == "all":
        return np.ones(coarse_probs.shape, dtype=bool)
    return conditional_mask(coarse_probs, policy.beta)

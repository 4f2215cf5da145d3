import numpy as np

from hdcnn.errors import InvalidInputError

PROB_FLOOR = 1e-12


def multinomial_logistic_loss(probs, labels):
    """Mean negative log-likelihood of ``labels`` (0-based) under ``probs``.

    Probabilities are clamped at ``PROB_FLOOR`` before the log; the returned
    gradient w.r.t. ``probs`` uses the same clamped value.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    if labels.shape != (n,):
        raise InvalidInputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InvalidInputError(f"labels must lie in [0, {c})")
    rows = np.arange(n)
    picked = np.maximum(probs[rows, labels], PROB_FLOOR)
    loss = float(-np.mean(np.log(picked)))
    grad = np.zeros_like(probs)
    grad[rows, labels] = -1.0 / (n * picked)
    return loss, grad

"""Point-forecast error metrics."""

import numpy as np

from .errors import ShapeError


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size == 0:
        raise ShapeError("metrics need at least one value")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def mse(pred, truth) -> float:
    """Mean of squared deviations (no square root)."""
    pred, truth = _pair(pred, truth)
    diff = pred - truth
    return float(np.mean(diff * diff))

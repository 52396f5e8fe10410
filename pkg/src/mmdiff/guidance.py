"""Decoupled classifier-free guidance and training-time condition dropout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class GuidanceWeights:
    """Inference-time guidance scales for the timestamp and text conditions."""

    w_t: float = 0.5
    w_d: float = 0.8

    def __post_init__(self):
        for name in ("w_t", "w_d"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"guidance weight {name} must be finite")

    def passes_per_step(self) -> int:
        return 1 + int(self.w_t != 0.0) + int(self.w_d != 0.0)


def combine(pred_full, pred_no_t, pred_no_d, w: GuidanceWeights):
    """``full + w_t (full - no_t) + w_d (full - no_d)``."""
    if not (np.shape(pred_full) == np.shape(pred_no_t) == np.shape(pred_no_d)):
        raise ShapeError(
            f"guidance predictions differ in shape: {np.shape(pred_full)}, {np.shape(pred_no_t)}, {np.shape(pred_no_d)}"
        )
    return pred_full + w.w_t * (pred_full - pred_no_t) + w.w_d * (pred_full - pred_no_d)


def apply_condition_dropout(batch_size: int, p_t: float, p_d: float, rng: np.random.Generator, joint: bool = False):
    """Per-example drop masks for the timestamp and text conditions.

    Independent Bernoulli draws by default. ``joint=True`` makes a single draw
    (probability ``p_t``) that drops both conditions together.
    Returns ``(drop_t, drop_d)`` boolean arrays of length ``batch_size``.
    """
    for name, p in (("p_t", p_t), ("p_d", p_d)):
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1], got {p}")
    if joint:
        drop = rng.random(batch_size) < p_t
        return drop, drop.copy()
    u = rng.random((batch_size, 2))
    return u[:, 0] < p_t, u[:, 1] < p_d

"""Adaptive three-source prediction head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .fusion import masked_mean
from .tensor import Tensor

FUSE_HIDDEN = 64


@dataclass
class HeadOutput:
    y_hat: Tensor  # [B, L_out, C]
    gamma: Tensor  # [B, 3] weights for (series, timestamp, text)
    y_z: Tensor
    y_t: Tensor
    y_d: Tensor


def pool_mean(x, mask: np.ndarray | None = None) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ShapeError(f"pool_mean needs at least one row, got shape {x.shape}")
    return masked_mean(x, mask)


def head_forward(z_L, t, d, params: dict[str, Tensor], L_out: int, channels: int, d_mask: np.ndarray | None = None) -> HeadOutput:
    """Pool each stream, predict from each, and blend with softmax weights.

    ``z_L``, ``t`` and ``d`` are ``[B, rows, d_model]``; the blend weights are
    one triple per sample, computed from the three predictions themselves.
    """
    z_L, t, d = T.as_tensor(z_L), T.as_tensor(t), T.as_tensor(d)
    out_w = L_out * channels
    if params["head.z.w"].shape[1] != out_w:
        raise ShapeError(f"head width {params['head.z.w'].shape[1]} != L_out*channels = {out_w}")
    y_z = T.linear(pool_mean(z_L), params["head.z.w"], params["head.z.b"])
    y_t = T.linear(pool_mean(t), params["head.t.w"], params["head.t.b"])
    y_d = T.linear(pool_mean(d, d_mask), params["head.d.w"], params["head.d.b"])
    cat = T.concat([y_z, y_t, y_d], axis=-1)
    h = T.gelu(T.linear(cat, params["head.fuse.w1"], params["head.fuse.b1"]))
    gamma = T.softmax(T.linear(h, params["head.fuse.w2"], params["head.fuse.b2"]), axis=-1)
    y = (
        y_z * T.getitem(gamma, (Ellipsis, slice(0, 1)))
        + y_t * T.getitem(gamma, (Ellipsis, slice(1, 2)))
        + y_d * T.getitem(gamma, (Ellipsis, slice(2, 3)))
    )
    y = T.reshape(y, y.shape[:-1] + (L_out, channels))
    return HeadOutput(y, gamma, y_z, y_t, y_d)


def init_head_params(d_model: int, L_out: int, channels: int, init) -> dict[str, np.ndarray]:
    w = L_out * channels
    out = {}
    for src in ("z", "t", "d"):
        out[f"head.{src}.w"] = init((d_model, w))
        out[f"head.{src}.b"] = np.zeros(w)
    out["head.fuse.w1"] = init((3 * w, FUSE_HIDDEN))
    out["head.fuse.b1"] = np.zeros(FUSE_HIDDEN)
    out["head.fuse.w2"] = init((FUSE_HIDDEN, 3))
    out["head.fuse.b2"] = np.zeros(3)
    return out

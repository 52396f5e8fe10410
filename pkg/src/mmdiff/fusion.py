"""Cross-attention fusion of patch embeddings with timestamp and text context.

Three layer types share one interface:

* ``unified``: one cross-attention per layer over ``concat(lambda * t, d)``;
* ``sequential``: attend to ``lambda * t`` then to ``d``, each with its own
  residual and norm (ablation);
* ``simple``: mean-pooled ``t`` and ``d`` concatenated onto every patch and
  projected back (ablation, no attention).

Every layer ends with a GELU feed-forward block. Attention is patch-to-context
only; patches never attend to each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ConfigError, NonFiniteError, ShapeError
from .tensor import Tensor

MASK_VALUE = -1e9
FusionMode = Literal["unified", "sequential", "simple"]
MODES = ("unified", "sequential", "simple")


@dataclass(frozen=True)
class FusionConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    lam: float = 1.0
    mode: str = "unified"
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.lam < 0:
            raise ConfigError(f"timestamp weight lambda must be >= 0, got {self.lam}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}; expected one of {MODES}")
        if self.layers < 0:
            raise ConfigError("layer count must be >= 0")


@dataclass
class AttentionTrace:
    """Attention weights per layer and head.

    ``weights[(layer, block)]`` is ``[B, heads, M, n_keys]`` (float64 in memory, float32 on export). ``block`` is
    ``"ctx"`` for unified layers and ``"time"``/``"text"`` for the two
    sequential sub-blocks. ``n_time`` is the number of leading timestamp columns
    (unified blocks only); ``key_mask`` marks real (non-padding) columns.
    """

    weights: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    key_masks: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    n_time: dict[tuple[int, str], int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.weights)


def build_context(t, d, lam: float, d_mask: np.ndarray | None = None):
    """``c = concat(lam * t, d)`` along rows, plus its key mask and split point."""
    t, d = T.as_tensor(t), T.as_tensor(d)
    if t.shape[-1] != d.shape[-1]:
        raise ShapeError(f"timestamp width {t.shape[-1]} != text width {d.shape[-1]}")
    c = T.concat([t * lam, d], axis=-2)
    n_t = t.shape[-2]
    if d_mask is None:
        d_mask = np.ones(d.shape[:-1], dtype=bool)
    t_mask = np.ones(t.shape[:-1], dtype=bool)
    return c, np.concatenate([t_mask, d_mask], axis=-1), n_t


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, D = x.shape
    return T.transpose(T.reshape(x, (B, N, heads, D // heads)), (0, 2, 1, 3))


def cross_attention(z, c, params: dict[str, Tensor], prefix: str, heads: int, key_mask: np.ndarray | None = None, layer: int = 0):
    """Multi-head scaled dot-product attention with queries from ``z`` and keys/values from ``c``.

    Accepts unbatched ``[M, d]`` / ``[N, d]`` or batched ``[B, M, d]`` / ``[B, N, d]``.
    Returns the output-projected result and the attention weights ``[B, h, M, N]``.
    """
    z, c = T.as_tensor(z), T.as_tensor(c)
    unbatched = z.ndim == 2
    if unbatched:
        z = T.reshape(z, (1,) + z.shape)
        c = T.reshape(c, (1,) + c.shape)
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    B, M, D = z.shape
    if D % heads:
        raise ConfigError(f"d_model={D} is not divisible by heads={heads}")
    dk = D // heads
    q = _split_heads(T.matmul(z, params[f"{prefix}.wq"]), heads)
    k = _split_heads(T.matmul(c, params[f"{prefix}.wk"]), heads)
    v = _split_heads(T.matmul(c, params[f"{prefix}.wv"]), heads)
    try:
        logits = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dk))
    except NonFiniteError:
        raise NonFiniteError(f"non-finite attention logits in fusion layer {layer}") from None
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_VALUE)[:, None, None, :]
        logits = logits + bias
    attn = T.softmax(logits, axis=-1)
    out = T.matmul(attn, v)  # [B, h, M, dk]
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, M, D))
    out = T.matmul(out, params[f"{prefix}.wo"])
    weights = attn.data
    if unbatched:
        out = T.reshape(out, (M, D))
    return out, weights


def _ln(x, params, name):
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def ffn(x, params, prefix):
    h = T.gelu(T.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return T.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def fuse_layer(z, c, params: dict[str, Tensor], prefix: str, heads: int, key_mask=None, layer: int = 0):
    """Post-norm block: attention residual then feed-forward residual."""
    a, w = cross_attention(z, c, params, f"{prefix}.attn", heads, key_mask, layer)
    z1 = _ln(z + a, params, f"{prefix}.ln1")
    z2 = _ln(z1 + ffn(z1, params, f"{prefix}.ffn"), params, f"{prefix}.ln2")
    return z2, w


def masked_mean(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over the row axis (-2), ignoring rows where ``mask`` is False."""
    x = T.as_tensor(x)
    if mask is None:
        if x.shape[-2] < 1:
            raise ShapeError("cannot pool an empty sequence")
        return T.mean(x, axis=-2)
    m = np.asarray(mask, dtype=np.float64)
    cnt = m.sum(axis=-1, keepdims=True)
    if np.any(cnt == 0):
        raise ShapeError("cannot pool a fully masked sequence")
    return T.sum_(x * m[..., None], axis=-2) * (1.0 / cnt)


def fuse_stack(z0, t, d, cfg: FusionConfig, params: dict[str, Tensor], d_mask: np.ndarray | None = None, prefix: str = "fusion"):
    """Run ``cfg.layers`` fusion layers; returns ``(z_L, AttentionTrace)``."""
    z = T.as_tensor(z0)
    t, d = T.as_tensor(t), T.as_tensor(d)
    trace = AttentionTrace()
    if cfg.layers == 0:
        return z, trace
    if d_mask is None:
        d_mask = np.ones(d.shape[:-1], dtype=bool)
    if cfg.mode == "unified":
        c, kmask, n_t = build_context(t, d, cfg.lam, d_mask)
        for l in range(cfg.layers):
            z, w = fuse_layer(z, c, params, f"{prefix}.{l}", cfg.heads, kmask, l)
            trace.weights[(l, "ctx")] = w
            trace.key_masks[(l, "ctx")] = kmask
            trace.n_time[(l, "ctx")] = n_t
    elif cfg.mode == "sequential":
        ts = t * cfg.lam
        t_mask = np.ones(t.shape[:-1], dtype=bool)
        for l in range(cfg.layers):
            p = f"{prefix}.{l}"
            a, wt = cross_attention(z, ts, params, f"{p}.attn_t", cfg.heads, t_mask, l)
            z = _ln(z + a, params, f"{p}.ln1")
            a, wd = cross_attention(z, d, params, f"{p}.attn_d", cfg.heads, d_mask, l)
            z = _ln(z + a, params, f"{p}.ln2")
            z = _ln(z + ffn(z, params, f"{p}.ffn"), params, f"{p}.ln3")
            trace.weights[(l, "time")] = wt
            trace.key_masks[(l, "time")] = t_mask
            trace.n_time[(l, "time")] = t.shape[-2]
            trace.weights[(l, "text")] = wd
            trace.key_masks[(l, "text")] = d_mask
            trace.n_time[(l, "text")] = 0
    else:
        pooled = T.concat([masked_mean(t), masked_mean(d, d_mask)], axis=-1)  # [B, 2d]
        for l in range(cfg.layers):
            p = f"{prefix}.{l}"
            ctx = T.broadcast_to(T.reshape(pooled, pooled.shape[:-1] + (1, pooled.shape[-1])), z.shape[:-1] + (pooled.shape[-1],))
            cat = T.concat([z, ctx], axis=-1)
            z = _ln(z + T.linear(cat, params[f"{p}.proj.w"], params[f"{p}.proj.b"]), params, f"{p}.ln1")
            z = _ln(z + ffn(z, params, f"{p}.ffn"), params, f"{p}.ln2")
    return z, trace


def init_fusion_params(cfg: FusionConfig, init, prefix: str = "fusion") -> dict[str, np.ndarray]:
    """Parameter arrays for the stack; ``init(shape)`` draws projection weights."""
    D, H = cfg.d_model, cfg.ffn_mult * cfg.d_model
    out: dict[str, np.ndarray] = {}

    def attn(p):
        for n in ("wq", "wk", "wv", "wo"):
            out[f"{p}.{n}"] = init((D, D))

    def norm(p):
        out[f"{p}.g"] = np.ones(D)
        out[f"{p}.b"] = np.zeros(D)

    for l in range(cfg.layers):
        p = f"{prefix}.{l}"
        if cfg.mode == "unified":
            attn(f"{p}.attn")
            norms = ("ln1", "ln2")
        elif cfg.mode == "sequential":
            attn(f"{p}.attn_t")
            attn(f"{p}.attn_d")
            norms = ("ln1", "ln2", "ln3")
        else:
            out[f"{p}.proj.w"] = init((3 * D, D))
            out[f"{p}.proj.b"] = np.zeros(D)
            norms = ("ln1", "ln2")
        out[f"{p}.ffn.w1"] = init((D, H))
        out[f"{p}.ffn.b1"] = np.zeros(H)
        out[f"{p}.ffn.w2"] = init((H, D))
        out[f"{p}.ffn.b2"] = np.zeros(D)
        for n in norms:
            norm(f"{p}.{n}")
    return out

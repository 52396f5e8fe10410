"""The conditional denoiser: encoders, fusion stack and head wired together."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .data import WindowSet
from .encoders import (
    HashedBowEncoder,
    N_CALENDAR_FEATURES,
    TEXT_BUCKETS,
    PatchConfig,
    TextBatch,
    calendar_matrix,
    embed_patches,
    embed_text,
    encode_timestamps,
    patchify,
    text_batch,
)
from .errors import CheckpointError, ConfigError, ShapeError
from .fusion import AttentionTrace, FusionConfig, fuse_stack, init_fusion_params
from .head import HeadOutput, head_forward, init_head_params
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    L_in: int = 36
    L_out: int = 12
    channels: int = 1
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    lam: float = 1.0
    fusion_mode: str = "unified"
    patch_len: int = 16
    stride: int = 8
    text_buckets: int = TEXT_BUCKETS
    text_dim: int | None = None  # set when using precomputed text vectors
    text_recency: bool = True
    lookback: int = 36
    use_timestamps: bool = True
    use_text: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.L_in < 1 or self.L_out < 1 or self.channels < 1:
            raise ConfigError("L_in, L_out and channels must be positive")
        self.fusion_config()
        self.patch_config()

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.layers, self.heads, self.d_model, self.lam, self.fusion_mode)

    def patch_config(self) -> PatchConfig:
        return PatchConfig(self.patch_len, self.stride, self.d_model)

    def text_encoder(self, encoder=None):
        """``encoder`` if given, else the hashed encoder sized to this model's bucket table."""
        return encoder if encoder is not None else HashedBowEncoder(self.text_buckets)

    @property
    def num_patches(self) -> int:
        return self.patch_config().num_patches(self.L_in + self.L_out)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal draws resampled until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0])

    def init(shape):
        return truncated_normal(rng, shape, cfg.init_std)

    D = cfg.d_model
    pdim = cfg.patch_len * cfg.channels
    p: dict[str, np.ndarray] = {
        "patch.w1": init((pdim, 2 * D)),
        "patch.b1": np.zeros(2 * D),
        "patch.w2": init((2 * D, D)),
        "patch.b2": np.zeros(D),
        "patch.pos": init((cfg.num_patches, D)),
        "time.w1": init((N_CALENDAR_FEATURES, D)),
        "time.b1": np.zeros(D),
        "time.w2": init((D, D)),
        "time.b2": np.zeros(D),
    }
    if cfg.text_dim is None:
        p["text.table"] = init((cfg.text_buckets, D))
    else:
        p["text.proj_w"] = init((cfg.text_dim, D))
        p["text.proj_b"] = np.zeros(D)
    if cfg.text_recency:
        p["text.age"] = init((cfg.lookback + 1, D))
    p["null.t"] = init((1, D))
    p["null.d"] = init((1, D))
    p.update(init_fusion_params(cfg.fusion_config(), init))
    p.update(init_head_params(D, cfg.L_out, cfg.channels, init))
    return p


@dataclass
class Conditions:
    """Everything the denoiser sees besides the noisy target."""

    x: np.ndarray  # [B, L_in, C]
    calendar: np.ndarray  # [B, L_in + L_out, 6]
    text: TextBatch

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Conditions":
        return Conditions(self.x[idx], self.calendar[idx], self.text.subset(idx))

    @classmethod
    def from_windows(cls, ws: WindowSet, encoder=None) -> "Conditions":
        cal = np.stack([calendar_matrix(d) for d in ws.dates]) if len(ws) else np.zeros((0, 0, N_CALENDAR_FEATURES))
        return cls(ws.x, cal, text_batch(ws.texts, encoder))


class ForecastModel:
    """Parameter set plus the forward pass ``f(y_k, k, X, T_full, D)``."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray | Tensor]):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {
            name: (v if isinstance(v, Tensor) else T.parameter(v, name)) for name, v in params.items()
        }

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ForecastModel":
        return cls(cfg, init_params(cfg, seed))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        expected = {k: v.shape for k, v in self.params.items()}
        got = {k: tuple(np.shape(v)) for k, v in arrays.items()}
        diffs = []
        for k in sorted(set(expected) | set(got)):
            if k not in got:
                diffs.append(f"{k}: missing")
            elif k not in expected:
                diffs.append(f"{k}: unexpected")
            elif expected[k] != got[k]:
                diffs.append(f"{k}: expected {expected[k]}, got {got[k]}")
        if diffs:
            raise CheckpointError("parameter mismatch: " + "; ".join(diffs[:10]) + (" ..." if len(diffs) > 10 else ""))
        for k, v in arrays.items():
            self.params[k].data = np.asarray(v, dtype=np.float64).copy()

    def round_to_float32(self) -> None:
        for p in self.params.values():
            p.data = p.data.astype(np.float32).astype(np.float64)

    def forward(self, y_k, k, cond: Conditions, drop_t=None, drop_d=None, trace: bool = False):
        """Predict the clean target from the noisy one.

        ``k`` is an int or per-sample int array; ``drop_t``/``drop_d`` are
        per-sample booleans selecting the null tokens. Returns the head output and
        the attention trace (empty unless ``trace``).
        """
        cfg = self.cfg
        P = self.params
        y_k = np.asarray(y_k, dtype=np.float64)
        B = len(cond)
        if y_k.shape != (B, cfg.L_out, cfg.channels):
            raise ShapeError(f"noisy target has shape {y_k.shape}, expected {(B, cfg.L_out, cfg.channels)}")
        if cond.x.shape[1:] != (cfg.L_in, cfg.channels):
            raise ShapeError(f"history has shape {cond.x.shape}, expected (B, {cfg.L_in}, {cfg.channels})")
        drop_t = _mask(drop_t, B) | (not cfg.use_timestamps)
        drop_d = _mask(drop_d, B) | (not cfg.use_text)
        ks = np.broadcast_to(np.asarray(k, dtype=np.int64), (B,))

        series = np.concatenate([cond.x, y_k], axis=1)
        z = embed_patches(patchify(series, cfg.patch_config()), P, ks)

        t = encode_timestamps(cond.calendar, P)
        if drop_t.any():
            keep = (~drop_t).astype(np.float64)[:, None, None]
            t = t * keep + T.reshape(P["null.t"], (1, 1, -1)) * (1.0 - keep)

        d, d_mask = embed_text(cond.text, P, drop_d, cfg.text_recency)

        zL, tr = fuse_stack(z, t, d, cfg.fusion_config(), P, d_mask)
        out = head_forward(zL, t, d, P, cfg.L_out, cfg.channels, d_mask)
        return out, (tr if trace else AttentionTrace())

    def predict(self, y_k, k, cond: Conditions, drop_t=None, drop_d=None) -> np.ndarray:
        with T.no_grad():
            out, _ = self.forward(y_k, k, cond, drop_t, drop_d)
        return out.y_hat.data

    def forward_nograd(self, y_k, k, cond: Conditions, drop_t: bool, drop_d: bool, trace: bool = False):
        B = len(cond)
        with T.no_grad():
            out, tr = self.forward(y_k, k, cond, np.full(B, drop_t), np.full(B, drop_d), trace)
        return out.y_hat.data, tr

    def denoiser(self, cond: Conditions, pass_log: list | None = None):
        """Adapt to the sampler's ``(y_k, k, drop_t, drop_d)`` call signature."""
        B = len(cond)

        def call(y_k, k, drop_t, drop_d):
            if pass_log is not None:
                pass_log.append((k, drop_t, drop_d))
            return self.predict(y_k, k, cond, np.full(B, drop_t), np.full(B, drop_d))

        return call


def _mask(m, B: int) -> np.ndarray:
    if m is None:
        return np.zeros(B, dtype=bool)
    return np.broadcast_to(np.asarray(m, dtype=bool), (B,)).copy()

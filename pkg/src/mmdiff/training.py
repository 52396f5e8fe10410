"""Training loop for the conditional denoiser, plus checkpoint persistence."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .container import decode_container, encode_container, read_container, write_container
from .data import WindowSet
from .diffusion import DiffusionConfig, NoiseSchedule, forward_noise
from .errors import CheckpointError, ConfigError, NonFiniteError
from .guidance import GuidanceWeights, apply_condition_dropout
from .inference import forecast
from .metrics import mse
from .model import Conditions, ForecastModel, ModelConfig
from .optim import Adam, AdamState, clip_grad_norm

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mmdiff-checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    p_uncond_t: float = 0.1
    p_uncond_d: float = 0.1
    joint_dropout: bool = False
    seed: int = 0
    clip_norm: float = 1.0
    val_every: int = 250
    patience: int = 10
    val_windows: int = 64

    def __post_init__(self):
        for name in ("p_uncond_t", "p_uncond_d"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        for name in ("steps", "batch_size", "val_every", "patience", "val_windows"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict | None = None
    optimizer: AdamState | None = None
    extra: dict = field(default_factory=dict)

    def model(self) -> ForecastModel:
        cfg = ModelConfig.from_dict(self.config["model"])
        m = ForecastModel.init(cfg, 0)
        m.load_state_dict(self.params)
        return m


# -- persistence ------------------------------------------------------------------
def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": ckpt.config,
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "optimizer": None,
    }
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    if ckpt.optimizer is not None:
        st = ckpt.optimizer
        meta["optimizer"] = {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step}
        arrays.update({f"adam.m/{k}": v for k, v in st.m.items()})
        arrays.update({f"adam.v/{k}": v for k, v in st.v.items()})
    return encode_container(meta, arrays)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def _checkpoint_from(meta: dict, arrays: dict[str, np.ndarray], source: str) -> Checkpoint:
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{source}: not a model checkpoint (format={meta.get('format')!r})")
    params, m, v = {}, {}, {}
    for name, arr in arrays.items():
        kind, _, key = name.partition("/")
        {"param": params, "adam.m": m, "adam.v": v}.get(kind, {})[key] = arr
    if not params:
        raise CheckpointError(f"{source}: no parameter arrays")
    opt = None
    if meta.get("optimizer"):
        o = meta["optimizer"]
        opt = AdamState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"],
                        {k: a.astype(np.float64) for k, a in m.items()},
                        {k: a.astype(np.float64) for k, a in v.items()})
    ckpt = Checkpoint(meta["config"], params, meta.get("step", 0), meta.get("rng_state"), opt, meta.get("extra") or {})
    # validate shapes against the stored config before handing anything back
    try:
        ckpt.model()
    except ConfigError as exc:
        raise CheckpointError(f"{source}: invalid stored config: {exc}") from None
    except CheckpointError as exc:
        raise CheckpointError(f"{source}: {exc}") from None
    return ckpt


def load_checkpoint(path: str | Path, expect_model: ModelConfig | None = None) -> Checkpoint:
    """Load and validate a checkpoint; optionally require a matching model config."""
    meta, arrays = read_container(path)
    ckpt = _checkpoint_from(meta, arrays, str(path))
    if expect_model is not None:
        ForecastModel.init(expect_model, 0).load_state_dict(ckpt.params)
    return ckpt


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    meta, arrays = decode_container(buf)
    return _checkpoint_from(meta, arrays, "<bytes>")


# -- training -----------------------------------------------------------------------
def train_step(model: ForecastModel, opt: Adam, cond: Conditions, y: np.ndarray, schedule: NoiseSchedule,
               cfg: TrainConfig, rng: np.random.Generator, sample_ids=None) -> dict:
    """One optimizer step on a batch; returns loss and the drawn dropout masks."""
    B = len(cond)
    k = rng.integers(1, schedule.K + 1, size=B)
    eps = rng.standard_normal(y.shape)
    y_k = forward_noise(y, k, schedule, eps)
    drop_t, drop_d = apply_condition_dropout(B, cfg.p_uncond_t, cfg.p_uncond_d, rng, cfg.joint_dropout)
    opt.zero_grad()
    try:
        out, _ = model.forward(y_k, k, cond, drop_t, drop_d)
        loss = T.mse(out.y_hat, y)
    except NonFiniteError as exc:
        raise NonFiniteError(f"{exc} (steps k={k.tolist()}, samples={sample_ids})") from None
    T.backward(loss)
    grads, norm = clip_grad_norm(opt.grads(), cfg.clip_norm)
    opt.state.lr = cfg.lr
    opt.step(grads)
    return {"loss": loss.item(), "grad_norm": norm, "drop_t": drop_t, "drop_d": drop_d}


@dataclass
class FitResult:
    best: Checkpoint
    final: Checkpoint
    log: list[dict]
    best_val: float
    stopped_early: bool = False


def run_config(model_cfg: ModelConfig, diffusion: DiffusionConfig, train_cfg: TrainConfig, guidance: GuidanceWeights) -> dict:
    return {
        "model": model_cfg.to_dict(),
        "diffusion": asdict(diffusion),
        "training": asdict(train_cfg),
        "guidance": asdict(guidance),
    }


def validation_mse(model: ForecastModel, cond: Conditions, y: np.ndarray, diffusion: DiffusionConfig,
                   guidance: GuidanceWeights, seed: int, ids) -> float:
    pred = forecast(model, cond, diffusion, guidance, seed, ids).values
    return mse(pred, y)


def fit(train: WindowSet, val: WindowSet | None, model_cfg: ModelConfig, diffusion: DiffusionConfig,
        train_cfg: TrainConfig, guidance: GuidanceWeights = GuidanceWeights(), encoder=None,
        progress=None) -> FitResult:
    """Train from scratch, keeping the parameters with the best validation MSE.

    Validation runs full guided sampling on a fixed, evenly spaced subset of
    the validation windows every ``val_every`` steps.
    """
    if len(train) == 0:
        raise ConfigError("training split is empty")
    seed = train_cfg.seed
    model = ForecastModel.init(model_cfg, seed)
    opt = Adam(model.params, lr=train_cfg.lr)
    rng = np.random.default_rng([seed, 1])
    schedule = diffusion.schedule()
    encoder = model_cfg.text_encoder(encoder)
    cond_all = Conditions.from_windows(train, encoder)
    y_all = train.y

    has_val = val is not None and len(val) > 0
    if has_val:
        n_val = min(train_cfg.val_windows, len(val))
        v_idx = np.unique(np.linspace(0, len(val) - 1, n_val).round().astype(int))
        v_cond = Conditions.from_windows(val.subset(v_idx), encoder)
        v_y = val.y[v_idx]
    config = run_config(model_cfg, diffusion, train_cfg, guidance)

    logs: list[dict] = []
    best_val = np.inf
    best_params = model.state_dict()
    best_step = 0
    stale = 0
    stopped = False
    order = rng.permutation(len(train))
    pos = 0
    t0 = time.perf_counter()
    for step in range(1, train_cfg.steps + 1):
        if pos + train_cfg.batch_size > len(order) and pos > 0:
            order = rng.permutation(len(train))
            pos = 0
        idx = order[pos : pos + train_cfg.batch_size]
        pos += len(idx)
        info = train_step(model, opt, cond_all.subset(idx), y_all[idx], schedule, train_cfg, rng, idx.tolist())
        entry = {"step": step, "loss": info["loss"], "grad_norm": info["grad_norm"],
                 "drop_t": int(info["drop_t"].sum()), "drop_d": int(info["drop_d"].sum()), "batch": len(idx)}
        if has_val and (step % train_cfg.val_every == 0 or step == train_cfg.steps):
            vm = validation_mse(model, v_cond, v_y, diffusion, guidance, seed, v_idx)
            entry["val_mse"] = vm
            if vm < best_val:
                best_val, best_params, best_step, stale = vm, model.state_dict(), step, 0
            else:
                stale += 1
        entry["wall"] = time.perf_counter() - t0
        logs.append(entry)
        if progress is not None:
            progress(entry)
        if has_val and stale >= train_cfg.patience:
            stopped = True
            break

    final_params = model.state_dict()
    if not has_val:
        best_params, best_step = final_params, logs[-1]["step"]
    f32 = lambda d: {k: v.astype(np.float32) for k, v in d.items()}
    best = Checkpoint(config, f32(best_params), best_step, None, None, {"val_mse": None if not has_val else float(best_val)})
    final = Checkpoint(config, f32(final_params), logs[-1]["step"], _rng_state(rng), opt.state,
                       {"val_mse": logs[-1].get("val_mse")})
    return FitResult(best, final, logs, float(best_val) if has_val else float("nan"), stopped)


def _rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"], "state": {k: int(v) for k, v in st["state"].items()},
            "has_uint32": int(st["has_uint32"]), "uinteger": int(st["uinteger"])}

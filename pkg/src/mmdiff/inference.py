"""Forecasting a set of windows with guided reverse diffusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import write_container
from .diffusion import DiffusionConfig, sample
from .fusion import AttentionTrace
from .guidance import GuidanceWeights
from .model import Conditions, ForecastModel


@dataclass
class Forecast:
    values: np.ndarray  # [B, L_out, C], normalized scale
    trace: AttentionTrace | None = None
    passes: int = 0


def window_rngs(seed: int, window_ids) -> list[np.random.Generator]:
    """Independent sampling streams keyed by (run seed, window index)."""
    return [np.random.default_rng([seed, 1_000_003, int(w)]) for w in window_ids]


def forecast(
    model: ForecastModel,
    cond: Conditions,
    diffusion: DiffusionConfig,
    guidance: GuidanceWeights,
    seed: int = 0,
    window_ids=None,
    trace: bool = False,
    batch_size: int = 256,
) -> Forecast:
    """Sample one forecast per window.

    With ``trace=True`` the attention weights of the last fully conditioned
    denoiser pass (the final inference step) are returned.
    """
    B = len(cond)
    if trace:
        batch_size = max(B, 1)  # one trace covering every window
    ids = np.arange(B) if window_ids is None else np.asarray(window_ids)
    schedule = diffusion.schedule()
    sampler = diffusion.sampler_config(seed)
    shape = (model.cfg.L_out, model.cfg.channels)
    out = np.zeros((B,) + shape)
    passes = 0
    last_trace: list[AttentionTrace] = []
    for lo in range(0, B, batch_size):
        sub = cond.subset(slice(lo, lo + batch_size))
        n = len(sub)
        log: list = []

        if trace:
            def denoise(y_k, k, drop_t, drop_d, _sub=sub):
                log.append(k)
                res, tr = model.forward_nograd(y_k, k, _sub, drop_t, drop_d, trace=not (drop_t or drop_d))
                if not (drop_t or drop_d):
                    last_trace[:] = [tr]
                return res
        else:
            inner = model.denoiser(sub)

            def denoise(y_k, k, drop_t, drop_d):
                log.append(k)
                return inner(y_k, k, drop_t, drop_d)

        out[lo : lo + n] = sample(denoise, (n,) + shape, schedule, sampler, guidance, window_rngs(seed, ids[lo : lo + n]))
        passes += len(log)
    return Forecast(out, last_trace[0] if last_trace else None, passes)


def trace_arrays(trace: AttentionTrace) -> dict[str, np.ndarray]:
    """Flatten a trace into named float32 arrays: ``attn/<layer>/<block>`` and ``mask/<layer>/<block>``."""
    out = {}
    for (layer, block), w in sorted(trace.weights.items()):
        out[f"attn/{layer}/{block}"] = w.astype(np.float32)
        mask = trace.key_masks.get((layer, block))
        if mask is not None:
            out[f"mask/{layer}/{block}"] = np.asarray(mask, dtype=np.float32)
    return out


def write_trace(trace: AttentionTrace, path, meta: dict | None = None) -> None:
    info = dict(meta or {})
    info["format"] = "mmdiff-attention-trace"
    info["n_time"] = {f"{layer}/{block}": n for (layer, block), n in sorted(trace.n_time.items())}
    write_container(path, info, trace_arrays(trace))

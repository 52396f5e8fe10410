"""Test-set evaluation, the ablation matrix and result tables."""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .data import Dataset, Report, SeriesFrame, denormalize, prepare_dataset
from .errors import ConfigError
from .guidance import GuidanceWeights
from .inference import forecast
from .metrics import mae, mse
from .model import Conditions, ForecastModel
from .training import Checkpoint, fit

# shared weight for the single-scale guidance variant (midpoint of the decoupled defaults)
COUPLED_WEIGHT = 0.65


def _full(cfg: RunConfig) -> RunConfig:
    return cfg


def _no_text(cfg: RunConfig) -> RunConfig:
    # the text-free pass equals the full pass, so skip it
    return replace(cfg.with_model(use_text=False), guidance=replace(cfg.guidance, w_d=0.0))


def _no_time(cfg: RunConfig) -> RunConfig:
    return replace(cfg.with_model(use_timestamps=False), guidance=replace(cfg.guidance, w_t=0.0))


def _no_both(cfg: RunConfig) -> RunConfig:
    return replace(cfg.with_model(use_text=False, use_timestamps=False), guidance=GuidanceWeights(0.0, 0.0))


def _coupled(cfg: RunConfig) -> RunConfig:
    return replace(
        cfg,
        training=replace(cfg.training, joint_dropout=True),
        guidance=GuidanceWeights(COUPLED_WEIGHT, COUPLED_WEIGHT),
    )


VARIANTS: dict[str, Callable[[RunConfig], RunConfig]] = {
    "full": _full,
    "w/o-text": _no_text,
    "w/o-timestamp": _no_time,
    "w/o-both": _no_both,
    "sequential": lambda c: c.with_model(fusion_mode="sequential"),
    "simple": lambda c: c.with_model(fusion_mode="simple"),
    "coupled-cfg": _coupled,
}


def check_variants(names) -> list[str]:
    names = list(names)
    bad = [n for n in names if n not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variant(s) {bad}; valid variants: {', '.join(VARIANTS)}")
    if not names:
        raise ConfigError(f"no variants given; valid variants: {', '.join(VARIANTS)}")
    return names


def variant_config(base: RunConfig, name: str) -> RunConfig:
    check_variants([name])
    return VARIANTS[name](base)


@dataclass
class HorizonResult:
    horizon: int
    mse: float
    mae: float
    seed_mse: list[float]
    seed_mae: list[float]
    mse_orig: float | None = None
    mae_orig: float | None = None


@dataclass
class EvalReport:
    """Metrics for one variant, averaged over seeds, for each forecast horizon."""

    variant: str
    seeds: list[int]
    horizons: list[HorizonResult]
    wall_seconds: float = 0.0
    window_errors: dict[int, np.ndarray] = field(default_factory=dict)
    checkpoints: dict[tuple[int, int], Checkpoint] = field(default_factory=dict)

    @property
    def avg_mse(self) -> float:
        return float(np.mean([h.mse for h in self.horizons]))

    @property
    def avg_mae(self) -> float:
        return float(np.mean([h.mae for h in self.horizons]))

    def records(self) -> list[dict]:
        out = []
        for h in self.horizons:
            rec = {"variant": self.variant, "horizon": h.horizon, "mse": h.mse, "mae": h.mae,
                   "seeds": self.seeds, "seed_mse": h.seed_mse, "seed_mae": h.seed_mae}
            if h.mse_orig is not None:
                rec.update(mse_orig=h.mse_orig, mae_orig=h.mae_orig)
            out.append(rec)
        out.append({"variant": self.variant, "horizon": "avg", "mse": self.avg_mse, "mae": self.avg_mae,
                    "seeds": self.seeds, "wall_seconds": self.wall_seconds})
        return out


def evaluate(model: ForecastModel, data: Dataset, cfg: RunConfig, seed: int = 0, encoder=None,
             guidance: GuidanceWeights | None = None) -> dict:
    """Forecast every test window and score it on the normalized and original scales."""
    test = data.test
    if len(test) == 0:
        raise ConfigError("test split is empty")
    cond = Conditions.from_windows(test, model.cfg.text_encoder(encoder))
    pred = forecast(model, cond, cfg.diffusion, guidance or cfg.guidance, seed, np.arange(len(test))).values
    window_mse = ((pred - test.y) ** 2).mean(axis=(1, 2))
    out = {"mse": mse(pred, test.y), "mae": mae(pred, test.y), "window_mse": window_mse, "pred": pred}
    out["mse_orig"] = mse(denormalize(pred, data.stats), denormalize(test.y, data.stats))
    out["mae_orig"] = mae(denormalize(pred, data.stats), denormalize(test.y, data.stats))
    return out


def _run_job(job) -> dict:
    frame, reports, cfg, horizon, seed, encoder = job
    cfg = cfg.with_model(L_out=horizon)
    cfg = replace(cfg, training=replace(cfg.training, seed=seed))
    data = prepare_dataset(frame, reports, cfg.model.L_in, horizon, cfg.data.split_spec(), cfg.model.lookback)
    t0 = time.perf_counter()
    res = fit(data.train, data.val, cfg.model, cfg.diffusion, cfg.training, cfg.guidance, encoder)
    model = res.best.model()
    scores = evaluate(model, data, cfg, seed, encoder)
    scores.pop("pred")
    scores.update(horizon=horizon, seed=seed, wall=time.perf_counter() - t0, checkpoint=res.best)
    return scores


def run_ablation(frame: SeriesFrame, reports: list[Report], base: RunConfig, variants, seeds=None,
                 horizons=None, workers: int | None = None, encoder=None, keep_checkpoints: bool = False,
                 progress=None) -> list[EvalReport]:
    """Train and test every variant with identical seeds and budgets.

    Each (variant, horizon, seed) run is independent; with ``workers > 1`` they
    run in separate processes. Results do not depend on the worker count.
    """
    variants = check_variants(variants)
    seeds = list(base.eval.seeds if seeds is None else seeds)
    horizons = list(horizons or base.eval.horizons or (base.model.L_out,))
    workers = base.eval.workers if workers is None else workers
    if not seeds:
        raise ConfigError("at least one seed is required")

    jobs = [(v, h, s) for v in variants for h in horizons for s in seeds]
    payload = [(frame, reports, variant_config(base, v), h, s, encoder) for v, h, s in jobs]
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_job, payload))
    else:
        results = []
        for job in payload:
            results.append(_run_job(job))
            if progress is not None:
                progress(job[2], results[-1])

    reports_out = []
    for v in variants:
        rows = [r for (jv, _, _), r in zip(jobs, results) if jv == v]
        hres = []
        for h in horizons:
            hr = [r for r in rows if r["horizon"] == h]
            hres.append(HorizonResult(
                h,
                float(np.mean([r["mse"] for r in hr])),
                float(np.mean([r["mae"] for r in hr])),
                [r["mse"] for r in hr],
                [r["mae"] for r in hr],
                float(np.mean([r["mse_orig"] for r in hr])),
                float(np.mean([r["mae_orig"] for r in hr])),
            ))
        rep = EvalReport(v, seeds, hres, float(sum(r["wall"] for r in rows)))
        rep.window_errors = {h: np.mean([r["window_mse"] for r in rows if r["horizon"] == h], axis=0) for h in horizons}
        if keep_checkpoints:
            rep.checkpoints = {(r["horizon"], r["seed"]): r["checkpoint"] for r in rows}
        reports_out.append(rep)
    if progress is not None:
        progress("done", {"wall": time.perf_counter() - t0})
    return reports_out


def guidance_sweep(model: ForecastModel, data: Dataset, cfg: RunConfig, w_t_grid, w_d_grid, seed: int = 0,
                   encoder=None) -> dict[tuple[float, float], float]:
    """Test MSE for every (w_t, w_d) pair with a fixed trained model."""
    return {(wt, wd): evaluate(model, data, cfg, seed, encoder, GuidanceWeights(wt, wd))["mse"]
            for wt in w_t_grid for wd in w_d_grid}


# -- output -------------------------------------------------------------------------
def write_jsonl(reports: list[EvalReport], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rep in reports:
            for rec in rep.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def format_table(reports: list[EvalReport], denormalized: bool = False) -> str:
    """Aligned text table: one row per variant, MSE/MAE per horizon plus the average."""
    if not reports:
        return ""
    horizons = [h.horizon for h in reports[0].horizons]
    heads = ["variant"] + [f"{h}:{m}" for h in [*horizons, "avg"] for m in ("mse", "mae")]
    rows = []
    for rep in reports:
        cells = [rep.variant]
        for h in rep.horizons:
            if denormalized:
                cells += [f"{h.mse_orig:.3f}", f"{h.mae_orig:.3f}"]
            else:
                cells += [f"{h.mse:.3f}", f"{h.mae:.3f}"]
        if denormalized:
            cells += [f"{np.mean([h.mse_orig for h in rep.horizons]):.3f}",
                      f"{np.mean([h.mae_orig for h in rep.horizons]):.3f}"]
        else:
            cells += [f"{rep.avg_mse:.3f}", f"{rep.avg_mae:.3f}"]
        rows.append(cells)
    widths = [max(len(r[i]) for r in [heads, *rows]) for i in range(len(heads))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(heads), "  ".join("-" * w for w in widths), *map(fmt, rows)])

"""Command-line interface: generate, train, forecast, evaluate, ablate.

Exit codes: 0 success, 2 usage or configuration problem, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict, load_config
from .data import denormalize, format_timestamp, load_reports, load_series, prepare_dataset, write_reports, write_series
from .encoders import PrecomputedTextEncoder
from .errors import CheckpointError, ConfigError, InputError, MMDiffError
from .evaluation import EvalReport, HorizonResult, check_variants, evaluate, format_table, run_ablation, write_jsonl
from .inference import forecast, write_trace
from .model import Conditions
from .synthetic import generate_synthetic
from .training import fit, load_checkpoint, save_checkpoint

log = logging.getLogger("mmdiff")

# flag dest -> config key
FLAG_KEYS = {
    "seed": "training.seed",
    "l_in": "model.L_in",
    "l_out": "model.L_out",
    "w_t": "guidance.w_t",
    "w_d": "guidance.w_d",
    "lam": "model.lam",
    "p_uncond_t": "training.p_uncond_t",
    "p_uncond_d": "training.p_uncond_d",
    "k_steps": "diffusion.K",
    "inference_steps": "diffusion.inference_steps",
    "fusion_mode": "model.fusion_mode",
    "steps": "training.steps",
    "series": "data.series",
    "reports": "data.reports",
    "text_embeddings": "data.text_embeddings",
    "workers": "eval.workers",
}


class UsageError(MMDiffError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config entry (value parsed as JSON when possible)")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--l-in", dest="l_in", type=int)
    p.add_argument("--l-out", dest="l_out", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--p-uncond-t", "--p_uncond_t", dest="p_uncond_t", type=float)
    p.add_argument("--p-uncond-d", "--p_uncond_d", dest="p_uncond_d", type=float)
    p.add_argument("--k-steps", dest="k_steps", type=int)
    p.add_argument("--fusion-mode", dest="fusion_mode", choices=["unified", "sequential", "simple"])
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--series", help="series CSV path")
    p.add_argument("--reports", help="reports JSONL path")
    p.add_argument("--text-embeddings", dest="text_embeddings", help="precomputed report vectors")


def _sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--w-t", "--w_t", dest="w_t", type=float)
    p.add_argument("--w-d", "--w_d", dest="w_d", type=float)
    p.add_argument("--inference-steps", dest="inference_steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mmdiff", description="Multimodal diffusion forecasting.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    _common(g)
    g.add_argument("--length", type=int)
    g.add_argument("--freq", choices=["daily", "weekly", "monthly"])
    g.add_argument("--event-rate", dest="event_rate", type=float)

    t = sub.add_parser("train", help="train a model")
    _common(t)
    _model_flags(t)
    _sampling_flags(t)

    f = sub.add_parser("forecast", help="forecast windows with a trained model")
    _common(f)
    _sampling_flags(f)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--split", choices=["train", "val", "test"], default="test")
    f.add_argument("--windows", help="window selector within the split: 'a:b' or comma-separated indices")
    f.add_argument("--trace", action="store_true", help="also export attention weights")
    f.add_argument("--denormalized", action="store_true", help="write original-unit values only")

    e = sub.add_parser("evaluate", help="score a trained model on the test split")
    _common(e)
    _sampling_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--denormalized", action="store_true")

    a = sub.add_parser("ablate", help="train and score ablation variants")
    _common(a)
    _model_flags(a)
    _sampling_flags(a)
    a.add_argument("--variants", help="comma-separated variant names")
    a.add_argument("--seeds", help="comma-separated seeds (default from config)")
    a.add_argument("--horizons", help="comma-separated forecast horizons")
    a.add_argument("--workers", type=int)
    a.add_argument("--denormalized", action="store_true")
    return ap


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    out = {}
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            out[key] = v
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key] = _parse_value(value)
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path, extra: dict | None = None) -> None:
    d = cfg.to_dict()
    if extra:
        d["command"] = extra
    (out / "config.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def _load_data(cfg: RunConfig):
    if not cfg.data.series:
        raise ConfigError("data.series is required (set it in the config or pass --series)")
    frame = load_series(cfg.data.series)
    reports = load_reports(cfg.data.reports) if cfg.data.reports else []
    encoder = PrecomputedTextEncoder(cfg.data.text_embeddings) if cfg.data.text_embeddings else None
    return frame, reports, encoder


def _check_text_dim(cfg: RunConfig, encoder) -> RunConfig:
    if encoder is not None and cfg.model.text_dim != encoder.dim:
        return cfg.with_model(text_dim=encoder.dim)
    if encoder is None and cfg.model.text_dim is not None:
        raise ConfigError("model.text_dim is set but no data.text_embeddings file was given")
    return cfg


# -- commands -----------------------------------------------------------------------
def cmd_generate(args) -> int:
    ov = _overrides(args)
    seed = ov.pop("training.seed", 0)
    for name in ("length", "freq", "event_rate"):
        if getattr(args, name) is not None:
            ov[f"synthetic.{name}"] = getattr(args, name)
    cfg = load_config(args.config, ov)
    frame, reports, events = generate_synthetic(cfg.synthetic, seed)
    out = _out_dir(args)
    write_series(frame, out / "series.csv")
    write_reports(reports, out / "reports.jsonl")
    with (out / "events.jsonl").open("w") as fh:
        for e in events:
            rec = e.as_dict()
            rec["date"] = frame.timestamps[e.onset]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    cfg = replace(cfg, data=replace(cfg.data, series=str(out / "series.csv"), reports=str(out / "reports.jsonl")))
    _echo_config(cfg, out, {"name": "generate", "seed": seed})
    print(f"wrote {len(frame)} rows, {len(reports)} reports to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    frame, reports, encoder = _load_data(cfg)
    cfg = _check_text_dim(cfg, encoder)
    out = _out_dir(args)
    _echo_config(cfg, out)
    data = prepare_dataset(frame, reports, cfg.model.L_in, cfg.model.L_out, cfg.data.split_spec(), cfg.model.lookback)
    log_fh = (out / "train_log.jsonl").open("w")

    def progress(entry):
        log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if "val_mse" in entry:
            log.info("step %d loss %.4f val_mse %.4f", entry["step"], entry["loss"], entry["val_mse"])

    try:
        res = fit(data.train, data.val, cfg.model, cfg.diffusion, cfg.training, cfg.guidance, encoder, progress)
    finally:
        log_fh.close()
    for ckpt in (res.best, res.final):
        ckpt.config = cfg.to_dict()
    save_checkpoint(res.best, out / "checkpoint.undf")
    save_checkpoint(res.final, out / "final.undf")
    print(f"trained {res.final.step} steps; best val mse {res.best_val:.4f} at step {res.best.step}; wrote {out}")
    return 0


def _checkpoint_config(args):
    """Effective config for commands that consume a checkpoint; the model section must match it."""
    ckpt = load_checkpoint(args.checkpoint)
    base = dict(ckpt.config)
    if args.config:
        user = json.loads(Path(args.config).read_text())
        if "model" in user and config_from_dict({"model": user["model"]}).model != config_from_dict({"model": base["model"]}).model:
            raise CheckpointError(f"{args.checkpoint}: model config differs from the one in {args.config}")
        base.update({k: v for k, v in user.items() if k != "model"})
    ov = _overrides(args)
    bad = [k for k in ov if k.startswith("model.")]
    if bad:
        raise ConfigError(f"cannot change model settings of a trained checkpoint: {bad}")
    for key, value in ov.items():
        section, _, name = key.partition(".")
        base.setdefault(section, {})[name] = value
    cfg = config_from_dict(base)
    return ckpt, cfg


def _select(n: int, spec: str | None) -> np.ndarray:
    if spec is None:
        return np.arange(n)
    try:
        if ":" in spec:
            a, _, b = spec.partition(":")
            idx = np.arange(n)[slice(int(a) if a else None, int(b) if b else None)]
        else:
            idx = np.array([int(s) for s in spec.split(",")])
    except ValueError:
        raise UsageError(f"bad window selector {spec!r}") from None
    if len(idx) == 0 or idx.min() < 0 or idx.max() >= n:
        raise UsageError(f"window selector {spec!r} out of range for {n} windows")
    return idx


def cmd_forecast(args) -> int:
    ckpt, cfg = _checkpoint_config(args)
    seed = cfg.training.seed if args.seed is None else args.seed
    frame, reports, encoder = _load_data(cfg)
    model = ckpt.model()
    data = prepare_dataset(frame, reports, cfg.model.L_in, cfg.model.L_out, cfg.data.split_spec(), cfg.model.lookback)
    ws = getattr(data, args.split)
    idx = _select(len(ws), args.windows)
    sub = ws.subset(idx)
    out = _out_dir(args)
    _echo_config(cfg, out, {"name": "forecast", "checkpoint": str(args.checkpoint), "split": args.split,
                            "windows": args.windows, "seed": seed, "trace": args.trace})
    fc = forecast(model, Conditions.from_windows(sub, model.cfg.text_encoder(encoder)), cfg.diffusion, cfg.guidance, seed, idx, trace=args.trace)
    orig = denormalize(fc.values, data.stats)
    with (out / "forecast.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        names = frame.names
        head = ["window", "step", "timestamp"]
        head += names if args.denormalized else [*names, *(f"{n}_norm" for n in names)]
        w.writerow(head)
        for i, wid in enumerate(idx):
            for h in range(cfg.model.L_out):
                ts = format_timestamp(sub.dates[i][cfg.model.L_in + h])
                row = [int(wid), h + 1, ts, *(repr(float(v)) for v in orig[i, h])]
                if not args.denormalized:
                    row += [repr(float(v)) for v in fc.values[i, h]]
                w.writerow(row)
    if args.trace:
        write_trace(fc.trace, out / "trace.undf", {"windows": [int(i) for i in idx], "split": args.split})
    print(f"forecast {len(idx)} windows ({fc.passes} denoiser passes) to {out}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt, cfg = _checkpoint_config(args)
    seed = cfg.training.seed if args.seed is None else args.seed
    frame, reports, encoder = _load_data(cfg)
    data = prepare_dataset(frame, reports, cfg.model.L_in, cfg.model.L_out, cfg.data.split_spec(), cfg.model.lookback)
    out = _out_dir(args)
    _echo_config(cfg, out, {"name": "evaluate", "checkpoint": str(args.checkpoint), "seed": seed})
    s = evaluate(ckpt.model(), data, cfg, seed, encoder)
    rep = EvalReport("checkpoint", [seed], [HorizonResult(cfg.model.L_out, s["mse"], s["mae"], [s["mse"]], [s["mae"]],
                                                           s["mse_orig"], s["mae_orig"])])
    write_jsonl([rep], out / "results.jsonl")
    table = format_table([rep], args.denormalized)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_ablate(args) -> int:
    ov = _overrides(args)
    if args.variants:
        ov["eval.variants"] = [v.strip() for v in args.variants.split(",") if v.strip()]
    if args.seeds:
        ov["eval.seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.horizons:
        ov["eval.horizons"] = [int(s) for s in args.horizons.split(",")]
    if args.denormalized:
        ov["eval.denormalized"] = True
    cfg = load_config(args.config, ov)
    check_variants(cfg.eval.variants)
    frame, reports, encoder = _load_data(cfg)
    cfg = _check_text_dim(cfg, encoder)
    out = _out_dir(args)
    _echo_config(cfg, out)

    def progress(job_cfg, r):
        if job_cfg != "done":
            log.info("horizon %s seed %s: mse %.4f (%.0fs)", r["horizon"], r["seed"], r["mse"], r["wall"])

    reps = run_ablation(frame, reports, cfg, cfg.eval.variants, encoder=encoder, progress=progress)
    write_jsonl(reps, out / "results.jsonl")
    table = format_table(reps, cfg.eval.denormalized)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "forecast": cmd_forecast,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, InputError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MMDiffError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

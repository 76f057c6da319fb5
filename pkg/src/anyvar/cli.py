"""Command line front end.

Subcommands: syndata, pretrain, finetune, evaluate, metrics, bayes,
experiment. Every run that produces artifacts also writes a provenance block
next to them. Exit codes: 0 success, 1 runtime failure (diagnostic on
stderr), 2 usage errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import bayes
from . import dataset as ds
from . import syndata
from .checkpoint import load_checkpoint, save_checkpoint
from .experiments import (
    EXPERIMENT_TAGS,
    ExperimentConfig,
    run_experiment,
    tiny_model_config,
    tiny_train_config,
    write_report,
)
from .metrics import eval_probabilistic, score_forecast_files
from .model import ModelConfig
from .train import TrainConfig, finetune, pretrain


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return json.loads(p.read_text())


def _write_provenance(out_dir: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["package_version"] = __version__
    payload["written_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    blob = json.dumps(payload, sort_keys=True, default=str)
    payload["provenance_hash"] = hashlib.sha256(blob.encode()).hexdigest()
    (out_dir / "provenance.json").write_text(json.dumps(payload, indent=2, default=str))


def _cmd_syndata(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    if args.kind == "wavelet":
        samples = syndata.gen_mixed_corpus(args.n, 0.0, args.length, rng,
                                           wavelet_mode=args.wavelet_mode)
        records = syndata.samples_to_records(samples)
    elif args.kind == "garch":
        samples = syndata.gen_mixed_corpus(args.n, 1.0, args.length, rng)
        records = syndata.samples_to_records(samples)
    elif args.kind == "mixed":
        samples = syndata.gen_mixed_corpus(args.n, args.frac_garch, args.length, rng,
                                           wavelet_mode=args.wavelet_mode)
        records = syndata.samples_to_records(samples)
    else:  # multivariate
        records = [
            syndata.gen_multivariate_wavelet(args.variates, args.correlated, args.length,
                                             rng, record_id=f"mv-{i:06d}")
            for i in range(args.n)
        ]
    ds.write_jsonl(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _load_config_file(args.config)
    model_cfg = ModelConfig(**{**dataclasses.asdict(tiny_model_config()),
                               **cfg.get("model", {}),
                               "patch_size": cfg.get("model", {}).get("patch_size", args.patch_size)})
    train_overrides = dict(cfg.get("train", {}))
    if args.seed is not None:
        train_overrides["seed"] = args.seed
    train_overrides.setdefault("max_tokens", args.max_tokens)
    train_cfg = TrainConfig(**{**dataclasses.asdict(tiny_train_config()), **train_overrides})
    data_paths = cfg.get("data", args.data)
    if not data_paths:
        raise ValueError("no training data: pass --data or a config with a 'data' list")
    if isinstance(data_paths, str):
        data_paths = [data_paths]
    corpus = [ds.read_jsonl(p) for p in data_paths]
    weights = cfg.get("weights")
    ckpt, trace = pretrain(model_cfg, train_cfg, corpus, weights)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    trace_path = out.with_suffix(out.suffix + ".trace.csv")
    with open(trace_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=sorted({k for r in trace for k in r} or {"step"}))
        writer.writeheader()
        writer.writerows(trace)
    _write_provenance(out.parent, {
        "command": "pretrain", "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg), "data": list(data_paths),
        "checkpoint": str(out),
    })
    print(f"saved checkpoint to {out} ({len(trace)} trace rows)")
    return 0


def _cmd_finetune(args: argparse.Namespace) -> int:
    cfg = _load_config_file(args.config)
    ckpt = load_checkpoint(args.ckpt)
    train_overrides = dict(cfg.get("train", {}))
    train_overrides.setdefault("mask_mode", "task")
    train_overrides.setdefault("context", args.context)
    train_overrides.setdefault("horizon", args.horizon)
    if args.seed is not None:
        train_overrides["seed"] = args.seed
    base = dataclasses.asdict(tiny_train_config(total_steps=500, warmup_steps=25,
                                                peak_lr=3e-4))
    train_cfg = TrainConfig(**{**base, **train_overrides})
    train_split = ds.read_jsonl(args.data)
    val_split = ds.read_jsonl(args.val)
    best, trace = finetune(ckpt, train_split, val_split, train_cfg,
                           dropout=cfg.get("dropout"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, out)
    _write_provenance(out.parent, {
        "command": "finetune", "base_checkpoint": str(args.ckpt),
        "train": dataclasses.asdict(train_cfg), "data": str(args.data),
        "val": str(args.val), "checkpoint": str(out),
        "best_val_loss": min(r["val_loss"] for r in trace),
    })
    print(f"saved fine-tuned checkpoint to {out} "
          f"(best val {min(r['val_loss'] for r in trace):.6g})")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    records = ds.read_jsonl(args.data)
    report = eval_probabilistic(ckpt, records, horizons=args.horizon,
                                context=args.context, seasonal_period=args.seasonal_period)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    report.to_markdown(out / "report.md")
    _write_provenance(out, {"command": "evaluate", "checkpoint": str(args.ckpt),
                            "data": str(args.data), "horizons": args.horizon,
                            "context": args.context})
    print(f"wrote {len(report.rows)} evaluation rows to {out}/report.csv")
    return 0


def _cmd_metrics(args: argparse.Namespace) -> int:
    report = score_forecast_files(args.forecasts, args.truth,
                                  seasonal_period=args.seasonal_period)
    text = report.to_csv(args.out)
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).with_suffix(".md").write_text(report.to_markdown())
        print(f"wrote {len(report.rows)} metric rows to {args.out}")
    return 0


def _cmd_bayes(args: argparse.Namespace) -> int:
    records = ds.read_jsonl(args.data)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for record in records:
        series = record.variates[0].values
        series = series[np.isfinite(series)]
        context = series[:-args.horizon] if args.horizon else series
        chains = {}
        weighted = []
        if args.model in ("wavelet", "mixture"):
            chains["wavelet"] = bayes.posterior_chain(
                bayes.wavelet_prior(), context, args.steps, rng, series_len=series.size)
        if args.model in ("garch", "mixture"):
            chains["garch"] = bayes.posterior_chain(
                bayes.garch_prior(), context, args.steps, rng)
        if args.model == "mixture":
            w_w, w_g = bayes.mixture_posterior_weights(context, args.evidence_samples, rng,
                                                       series_len=series.size)
            weighted = [("wavelet", chains["wavelet"].burned(), w_w),
                        ("garch", chains["garch"].burned(), w_g)]
        else:
            weighted = [(args.model, chains[args.model].burned(), 1.0)]
        row = {"id": record.id,
               "evidence": bayes.model_evidence_prior_mc(
                   bayes.PriorSpec(args.model), context, args.evidence_samples, rng,
                   series_len=series.size)}
        for tag, chain in chains.items():
            path = out / f"chain_{record.id}_{tag}.csv"
            np.savetxt(path, np.column_stack([chain.draws, chain.log_probs]),
                       delimiter=",", header=f"draws...,log_prob (acceptance "
                       f"{chain.acceptance_rate:.3f})")
            row[f"acceptance_{tag}"] = chain.acceptance_rate
        if args.horizon:
            scores = bayes.posterior_predictive_eval(weighted, series, args.horizon,
                                                     series_len=series.size)
            row.update({"predictive_nll": scores["nll"], "predictive_mse": scores["mse"]})
        rows.append(row)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=sorted({k for r in rows for k in r}))
        writer.writeheader()
        writer.writerows(rows)
    _write_provenance(out, {"command": "bayes", "model": args.model, "data": str(args.data),
                            "steps": args.steps, "seed": args.seed,
                            "horizon": args.horizon})
    print(f"wrote {len(rows)} rows to {out}/report.csv")
    return 0


def _cmd_experiment(args: argparse.Namespace) -> int:
    overrides = _load_config_file(args.config)
    overrides["tag"] = args.tag
    if args.seeds is not None:
        overrides["seeds"] = tuple(range(args.seeds))
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg = ExperimentConfig(**overrides)
    report = run_experiment(cfg)
    out = write_report(report, cfg.out_dir)
    n_failed = sum(1 for row in report.rows if row["status"] != "ok")
    print(f"wrote report to {out} ({len(report.rows)} rows, {n_failed} failed)")
    return 0 if n_failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anyvar",
                                     description="Any-variate time-series toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("syndata", help="generate synthetic corpora as JSONL")
    p.add_argument("--kind", choices=["wavelet", "garch", "mixed", "multivariate"],
                   default="mixed")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--length", type=int, default=160)
    p.add_argument("--frac-garch", type=float, default=0.5, dest="frac_garch")
    p.add_argument("--wavelet-mode", choices=["discrete_pretrain", "continuous_prior"],
                   default="discrete_pretrain", dest="wavelet_mode")
    p.add_argument("--variates", type=int, default=4)
    p.add_argument("--correlated", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_syndata)

    p = sub.add_parser("pretrain", help="pretrain a model on JSONL corpora")
    p.add_argument("--config", help="JSON config with model/train/data sections")
    p.add_argument("--data", nargs="*", default=[], help="JSONL dataset paths")
    p.add_argument("--out", default="runs/pretrain/model.avck")
    p.add_argument("--patch-size", type=int, default=ds.DEFAULT_PATCH_SIZE, dest="patch_size")
    p.add_argument("--max-tokens", type=int, default=ds.DEFAULT_MAX_TOKENS, dest="max_tokens")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint with early stopping")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--config")
    p.add_argument("--context", type=int, default=96)
    p.add_argument("--horizon", type=int, default=32)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/finetune/model.avck")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("evaluate", help="rolling probabilistic evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, nargs="+", default=[32])
    p.add_argument("--context", type=int, default=96)
    p.add_argument("--seasonal-period", type=int, default=1, dest="seasonal_period")
    p.add_argument("--out", default="runs/evaluate")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("metrics", help="score a forecast-exchange file against truth")
    p.add_argument("--forecasts", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--seasonal-period", type=int, default=1, dest="seasonal_period")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("bayes", help="MCMC posterior fit and predictive scoring")
    p.add_argument("--model", choices=["wavelet", "garch", "mixture"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=8)
    p.add_argument("--evidence-samples", type=int, default=10_000, dest="evidence_samples")
    p.add_argument("--out", default="runs/bayes")
    p.set_defaults(func=_cmd_bayes)

    p = sub.add_parser("experiment", help="run a scripted study end to end")
    p.add_argument("--tag", choices=list(EXPERIMENT_TAGS), required=True)
    p.add_argument("--seeds", type=int, default=None, help="use seeds 0..n-1")
    p.add_argument("--config", help="JSON overrides for ExperimentConfig")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

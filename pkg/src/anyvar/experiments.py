"""Scripted studies over the synthetic corpora, with CSV/Markdown reports.

Five experiment tags:

- ``negative_transfer``: single-source vs mixed-corpus pretraining, zero-shot
  at two context lengths, then fine-tuning the mixed model on each source,
- ``ablation_context``: pretraining context length vs zero-shot and few-shot
  fine-tuning quality,
- ``ablation_masking``: maximum pretraining masking ratio vs fine-tuning
  quality across forecast lengths,
- ``ablation_variate``: univariate vs channel-mixing vs flattened-variate
  attention on correlated and uncorrelated multivariate rows,
- ``ablation_output_dist``: single Student-T head vs the mixture head on
  heavy-tailed data, traced over pretraining,
- ``bayes_study``: the MCMC posterior forecasting comparison.

Every cell is reproducible from (config hash, seed): cell RNGs are derived
from the seed plus a stable hash of the cell's name. Failed cells are
recorded as failed and never abort the grid. ``ANYVAR_WORKERS`` caps how many
seed units run as parallel processes (default 1, sequential).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import subprocess
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import __version__
from . import bayes
from . import dataset as ds
from . import syndata
from .checkpoint import Checkpoint, restore_model
from .model import ModelConfig
from .train import TrainConfig, evaluate_records, finetune, pretrain

EXPERIMENT_TAGS = (
    "negative_transfer",
    "ablation_context",
    "ablation_masking",
    "ablation_variate",
    "ablation_output_dist",
    "bayes_study",
)


def tiny_model_config(**overrides) -> ModelConfig:
    """Default architecture for the synthetic studies: 2 layers, width 64,
    4 heads, feed-forward 256, patch size 1, 4 mixture components."""
    base = dict(n_layers=2, d_model=64, n_heads=4, d_ff=256, patch_size=1,
                dropout=0.0, n_mixture_components=4)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(peak_lr=1e-3, floor_lr=1e-5, warmup_steps=50, total_steps=600,
                weight_decay=1e-5, batch_size=8, grad_clip=1.0, seed=0,
                eval_interval=50, max_tokens=512)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class ExperimentConfig:
    tag: str
    out_dir: str = "runs/experiment"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_train: int = 400
    n_eval: int = 96
    n_val: int = 48
    n_finetune: int = 100
    series_len: int = 160
    horizon: int = 32
    contexts: tuple[int, ...] = (32, 128)
    pretrain_contexts: tuple[int, ...] = (16, 32, 64, 128)
    finetune_sizes: tuple[int, ...] = (1, 10, 100, 1000)
    mask_ratios: tuple[float, ...] = (0.25, 0.5, 0.99)
    pred_lens: tuple[int, ...] = (32, 64, 96)
    n_variates: int = 4
    finetune_steps: int = 200
    finetune_lr: float = 3e-4
    patience: int = 4
    trace_interval: int = 100
    bayes_replications: int = 20
    bayes_mh_steps: int = 4000
    bayes_evidence_samples: int = 10_000
    model: ModelConfig = field(default_factory=tiny_model_config)
    train: TrainConfig = field(default_factory=tiny_train_config)

    def __post_init__(self) -> None:
        if self.tag not in EXPERIMENT_TAGS:
            raise ValueError(f"tag must be one of {EXPERIMENT_TAGS}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.n_train < 10 or self.n_eval < 10:
            raise ValueError("corpus sizes must be >= 10")
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.seeds = tuple(int(s) for s in self.seeds)

    def hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(payload).hexdigest()


@dataclass
class ExperimentReport:
    tag: str
    rows: list[dict]
    provenance: dict
    traces: dict[str, list[dict]] = field(default_factory=dict)

    def cell(self, **keys) -> dict | None:
        for row in self.rows:
            if all(row.get(k) == v for k, v in keys.items()):
                return row
        return None


def _cell_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _cell_seed(seed: int, name: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(name.encode())) % (2**31)


# ---------------------------------------------------------------------------
# Corpus builders


def _wavelet_records(rng, n, T, prefix="w"):
    records = []
    for i in range(n):
        params = syndata.sample_wavelet_params("discrete_pretrain", rng, length=T)
        sample = syndata.gen_wavelet(params, seed=int(rng.integers(0, 2**62)))
        records.append(ds.TimeSeriesRecord(
            id=f"{prefix}{i}", variates=[ds.VariateSeries("x", sample.values)]))
    return records


def _garch_records(rng, n, T, prefix="g"):
    records = []
    for i in range(n):
        params = syndata.sample_garch_params(rng)
        sample = syndata.gen_garch(params, T, seed=int(rng.integers(0, 2**62)))
        records.append(ds.TimeSeriesRecord(
            id=f"{prefix}{i}", variates=[ds.VariateSeries("x", sample.values)]))
    return records


def _multivariate_records(rng, n, T, n_variates, correlated, prefix="m"):
    records = []
    for i in range(n):
        rec = syndata.gen_multivariate_wavelet(n_variates, correlated, T, rng,
                                               record_id=f"{prefix}{i}")
        records.append(rec)
    return records


def _zero_shot_nll(ckpt: Checkpoint, records, context, horizon, channel_mixing=False) -> float:
    model = restore_model(ckpt)
    model.eval()
    return evaluate_records(model, records, context, horizon, metric="nll",
                            channel_mixing=channel_mixing)


# ---------------------------------------------------------------------------
# Per-seed units (one callable per seed; every condition is try/except'd)


def _finetune_cfg(cfg: ExperimentConfig, seed: int, name: str, context: int,
                  horizon: int, steps: int | None = None) -> TrainConfig:
    steps = cfg.finetune_steps if steps is None else steps
    return dataclasses.replace(
        cfg.train,
        peak_lr=cfg.finetune_lr,
        warmup_steps=min(20, max(1, steps // 10)),
        total_steps=steps,
        early_stop_patience=cfg.patience,
        eval_interval=cfg.train.eval_interval,
        seed=_cell_seed(seed, name),
        mask_mode="task",
        context=context,
        horizon=horizon,
    )


def _seed_negative_transfer(cfg: ExperimentConfig, seed: int) -> dict:
    torch.set_num_threads(1)
    h = cfg.horizon
    rng = _cell_rng(seed, "corpora")
    eval_len = max(cfg.contexts) + h
    train_w = _wavelet_records(rng, cfg.n_train, cfg.series_len)
    train_g = _garch_records(rng, cfg.n_train, cfg.series_len)
    mixed = train_g[: cfg.n_train // 2] + train_w[: cfg.n_train - cfg.n_train // 2]
    eval_w = _wavelet_records(rng, cfg.n_eval, eval_len, prefix="ew")
    eval_g = _garch_records(rng, cfg.n_eval, eval_len, prefix="eg")
    ft_w = _wavelet_records(rng, cfg.n_finetune, eval_len, prefix="fw")
    ft_g = _garch_records(rng, cfg.n_finetune, eval_len, prefix="fg")
    val_w = _wavelet_records(rng, cfg.n_val, eval_len, prefix="vw")
    val_g = _garch_records(rng, cfg.n_val, eval_len, prefix="vg")

    cells, traces = {}, {}
    ckpts = {}
    for name, corpus in (("G", train_g), ("W", train_w), ("M", mixed)):
        train_cfg = dataclasses.replace(cfg.train, seed=_cell_seed(seed, f"pre-{name}"))
        ckpts[name], traces[f"pretrain/{name}/seed{seed}"] = pretrain(
            cfg.model, train_cfg, [corpus], [1.0])

    eval_sets = {"wavelet": eval_w, "garch": eval_g}
    for model_name in ("G", "W", "M"):
        for source, records in eval_sets.items():
            if (model_name, source) in (("G", "wavelet"), ("W", "garch")):
                continue  # undefined cells in the study layout
            for context in cfg.contexts:
                key = f"zero_shot/{model_name}/{source}/ctx{context}"
                cells[key] = _zero_shot_nll(ckpts[model_name], records, context, h)

    ft_ctx = min(cfg.contexts)
    for source, (train_split, val_split, eval_split) in {
        "wavelet": (ft_w, val_w, eval_w), "garch": (ft_g, val_g, eval_g),
    }.items():
        key = f"finetune/M/{source}/ctx{ft_ctx}"
        ft_cfg = _finetune_cfg(cfg, seed, key, ft_ctx, h)
        ckpt_ft, traces[f"{key}/seed{seed}"] = finetune(
            ckpts["M"], train_split, val_split, ft_cfg)
        cells[key] = _zero_shot_nll(ckpt_ft, eval_split, ft_ctx, h)
    return {"cells": cells, "traces": traces}


def _seed_ablation_context(cfg: ExperimentConfig, seed: int) -> dict:
    torch.set_num_threads(1)
    h = cfg.horizon
    eval_ctx = 32
    rng = _cell_rng(seed, "corpora")
    eval_len = eval_ctx + h
    eval_recs = _wavelet_records(rng, cfg.n_eval, eval_len, prefix="e")
    val_recs = _wavelet_records(rng, cfg.n_val, eval_len, prefix="v")
    ft_pool = _wavelet_records(rng, max(cfg.finetune_sizes), eval_len, prefix="f")

    cells, traces = {}, {}
    for pre_ctx in cfg.pretrain_contexts:
        corpus = _wavelet_records(_cell_rng(seed, f"train{pre_ctx}"), cfg.n_train, pre_ctx)
        train_cfg = dataclasses.replace(cfg.train, seed=_cell_seed(seed, f"pre{pre_ctx}"))
        ckpt, traces[f"pretrain/ctx{pre_ctx}/seed{seed}"] = pretrain(
            cfg.model, train_cfg, [corpus], [1.0])
        cells[f"ctx{pre_ctx}/zero_shot"] = _zero_shot_nll(ckpt, eval_recs, eval_ctx, h)
        for n_ft in cfg.finetune_sizes:
            key = f"ctx{pre_ctx}/ft{n_ft}"
            ft_cfg = _finetune_cfg(cfg, seed, key, eval_ctx, h)
            ckpt_ft, _ = finetune(ckpt, ft_pool[:n_ft], val_recs, ft_cfg)
            cells[key] = _zero_shot_nll(ckpt_ft, eval_recs, eval_ctx, h)
    return {"cells": cells, "traces": traces}


def _uniform_ratio_sampler(max_ratio: float) -> Callable[[int, np.random.Generator], int]:
    def sampler(n_positions: int, rng: np.random.Generator) -> int:
        ratio = rng.uniform(0.0, max_ratio)
        return max(1, min(n_positions - 1, round(ratio * n_positions)))
    return sampler


def _seed_ablation_masking(cfg: ExperimentConfig, seed: int) -> dict:
    torch.set_num_threads(1)
    train_len = 128
    eval_ctx = 32
    rng = _cell_rng(seed, "corpora")
    eval_len = eval_ctx + max(cfg.pred_lens)
    eval_recs = _wavelet_records(rng, cfg.n_eval, eval_len, prefix="e")
    val_recs = _wavelet_records(rng, cfg.n_val, eval_len, prefix="v")
    ft_pool = _wavelet_records(rng, max(cfg.finetune_sizes), eval_len, prefix="f")

    cells, traces = {}, {}
    for ratio in cfg.mask_ratios:
        corpus = _wavelet_records(_cell_rng(seed, f"train{ratio}"), cfg.n_train, train_len)
        train_cfg = dataclasses.replace(cfg.train, seed=_cell_seed(seed, f"pre{ratio}"))
        ckpt, traces[f"pretrain/ratio{ratio}/seed{seed}"] = pretrain(
            cfg.model, train_cfg, [corpus], [1.0],
            ratio_sampler=_uniform_ratio_sampler(ratio))
        for pred_len in cfg.pred_lens:
            for n_ft in cfg.finetune_sizes:
                key = f"ratio{ratio}/pred{pred_len}/ft{n_ft}"
                ft_cfg = _finetune_cfg(cfg, seed, key, eval_ctx, pred_len)
                ckpt_ft, _ = finetune(ckpt, ft_pool[:n_ft], val_recs, ft_cfg)
                cells[key] = _zero_shot_nll(ckpt_ft, eval_recs, eval_ctx, pred_len)
    return {"cells": cells, "traces": traces}


def _split_rows(records):
    singles = []
    for rec in records:
        for v in rec.variates:
            singles.append(ds.TimeSeriesRecord(id=f"{rec.id}/{v.name}",
                                               variates=[dataclasses.replace(v)]))
    return singles


def _seed_ablation_variate(cfg: ExperimentConfig, seed: int) -> dict:
    torch.set_num_threads(1)
    h = cfg.horizon
    eval_ctx = 32
    T = eval_ctx + h
    cells, traces = {}, {}
    for regime, correlated in (("corr", True), ("uncorr", False)):
        rng = _cell_rng(seed, f"corpora-{regime}")
        train = _multivariate_records(rng, cfg.n_train, T, cfg.n_variates, correlated)
        eval_recs = _multivariate_records(rng, cfg.n_eval, T, cfg.n_variates, correlated, "e")
        val_recs = _multivariate_records(rng, cfg.n_val, T, cfg.n_variates, correlated, "v")
        ft_pool = _multivariate_records(rng, max(cfg.finetune_sizes), T, cfg.n_variates,
                                        correlated, "f")
        methods = {
            "univariate": dict(model=cfg.model, mix=False,
                               data=(_split_rows(train), _split_rows(eval_recs),
                                     _split_rows(val_recs), _split_rows(ft_pool))),
            "channel_mixing": dict(
                model=dataclasses.replace(cfg.model, channels_per_token=cfg.n_variates),
                mix=True, data=(train, eval_recs, val_recs, ft_pool)),
            "any_variate": dict(model=cfg.model, mix=False,
                                data=(train, eval_recs, val_recs, ft_pool)),
        }
        for method, spec in methods.items():
            train_recs, ev, val, pool = spec["data"]
            mix = spec["mix"]
            train_cfg = dataclasses.replace(cfg.train, seed=_cell_seed(seed, f"{regime}-{method}"))
            ckpt, traces[f"pretrain/{regime}/{method}/seed{seed}"] = pretrain(
                spec["model"], train_cfg, [train_recs], [1.0], channel_mixing=mix)
            key = f"{regime}/{method}/zero_shot"
            cells[key] = _zero_shot_nll(ckpt, ev, eval_ctx, h, channel_mixing=mix)
            for n_ft in cfg.finetune_sizes:
                key = f"{regime}/{method}/ft{n_ft}"
                n_pool = n_ft * cfg.n_variates if method == "univariate" else n_ft
                ft_cfg = _finetune_cfg(cfg, seed, key, eval_ctx, h)
                ckpt_ft, _ = finetune(ckpt, pool[:n_pool], val, ft_cfg, channel_mixing=mix)
                cells[key] = _zero_shot_nll(ckpt_ft, ev, eval_ctx, h, channel_mixing=mix)
    return {"cells": cells, "traces": traces}


def _seed_ablation_output_dist(cfg: ExperimentConfig, seed: int) -> dict:
    torch.set_num_threads(1)
    h = cfg.horizon
    eval_ctx = 64
    series_len = eval_ctx + h
    rng = _cell_rng(seed, "corpora")
    train = _garch_records(rng, cfg.n_train, series_len)
    eval_recs = _garch_records(rng, cfg.n_eval, series_len, prefix="e")

    cells, traces = {}, {}
    for head in ("single_t", "mixture_t"):
        model_cfg = dataclasses.replace(
            cfg.model, head_mode=head,
            n_mixture_components=1 if head == "single_t" else cfg.model.n_mixture_components)
        train_cfg = dataclasses.replace(
            cfg.train, seed=_cell_seed(seed, f"pre-{head}"),
            eval_interval=cfg.trace_interval)

        def eval_hook(model, step):
            return evaluate_records(model, eval_recs, eval_ctx, h, metric="nll")

        ckpt, trace = pretrain(model_cfg, train_cfg, [train], [1.0], eval_fn=eval_hook)
        traces[f"trace/{head}/seed{seed}"] = trace
        cells[f"{head}/final_nll"] = trace[-1]["eval"]
    return {"cells": cells, "traces": traces}


def _seed_bayes_study(cfg: ExperimentConfig, seed: int) -> dict:
    rows = bayes.mcmc_transfer_study(
        n_replications=cfg.bayes_replications,
        rng=_cell_rng(seed, "bayes"),
        n_mh_steps=cfg.bayes_mh_steps,
        n_evidence=cfg.bayes_evidence_samples,
    )
    cells = {
        "wavelet_mcmc/nll": float(np.mean([r["wavelet_nll"] for r in rows])),
        "mixture_mcmc/nll": float(np.mean([r["mixture_nll"] for r in rows])),
        "wavelet_mcmc/mse": float(np.mean([r["wavelet_mse"] for r in rows])),
        "mixture_mcmc/mse": float(np.mean([r["mixture_mse"] for r in rows])),
        "wavelet_wins": float(np.mean(
            [r["wavelet_nll"] <= r["mixture_nll"] for r in rows])),
    }
    return {"cells": cells, "traces": {f"replications/seed{seed}": rows}}


_SEED_UNITS = {
    "negative_transfer": _seed_negative_transfer,
    "ablation_context": _seed_ablation_context,
    "ablation_masking": _seed_ablation_masking,
    "ablation_variate": _seed_ablation_variate,
    "ablation_output_dist": _seed_ablation_output_dist,
    "bayes_study": _seed_bayes_study,
}


def _run_seed_unit(args: tuple) -> tuple[int, dict | None, str | None]:
    cfg, seed = args
    try:
        return seed, _SEED_UNITS[cfg.tag](cfg, seed), None
    except Exception as exc:  # isolate the cell, never abort the grid
        return seed, None, f"{type(exc).__name__}: {exc}"


def _provenance(cfg: ExperimentConfig) -> dict:
    commit = None
    try:
        commit = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                                text=True, timeout=5, cwd=Path(__file__).parent).stdout.strip() or None
    except Exception:
        pass
    return {
        "tag": cfg.tag,
        "config": dataclasses.asdict(cfg),
        "config_hash": cfg.hash(),
        "seeds": list(cfg.seeds),
        "package_version": __version__,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "git_commit": commit,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Run every seed unit of an experiment and aggregate per-cell statistics."""
    workers = int(os.environ.get("ANYVAR_WORKERS", "1"))
    provenance = _provenance(cfg)
    jobs = [(cfg, seed) for seed in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed_unit, jobs))
    else:
        results = [_run_seed_unit(job) for job in jobs]

    per_seed: dict[int, dict] = {}
    failures: dict[int, str] = {}
    traces: dict[str, list[dict]] = {}
    for seed, unit, error in results:
        if error is not None:
            failures[seed] = error
            continue
        per_seed[seed] = unit["cells"]
        traces.update(unit["traces"])

    all_cells = sorted({name for cells in per_seed.values() for name in cells})
    rows = []
    for name in all_cells:
        values = {seed: cells[name] for seed, cells in per_seed.items() if name in cells}
        vals = np.array(list(values.values()), dtype=np.float64)
        rows.append({
            "cell": name,
            "metric": "nll" if "mse" not in name else "mse",
            "mean": float(vals.mean()),
            "std": float(vals.std()),
            "n_seeds": int(vals.size),
            "per_seed": {str(s): float(v) for s, v in sorted(values.items())},
            "status": "ok",
        })
    for seed, error in sorted(failures.items()):
        rows.append({"cell": f"seed{seed}", "metric": "", "mean": float("nan"),
                     "std": float("nan"), "n_seeds": 0, "per_seed": {},
                     "status": f"failed: {error}"})
    provenance["failed_seeds"] = {str(k): v for k, v in failures.items()}
    return ExperimentReport(tag=cfg.tag, rows=rows, provenance=provenance, traces=traces)


def write_report(report: ExperimentReport, out_dir: str | Path) -> Path:
    """Emit report.csv, report.md, provenance.json, and per-cell trace CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "metric", "mean", "std", "n_seeds", "per_seed", "status"])
        for row in report.rows:
            writer.writerow([row["cell"], row["metric"], f"{row['mean']:.6g}",
                             f"{row['std']:.6g}", row["n_seeds"],
                             json.dumps(row["per_seed"]), row["status"]])
    lines = [f"# {report.tag}", "",
             "| cell | mean | std | seeds | status |", "|---|---|---|---|---|"]
    for row in report.rows:
        lines.append(f"| {row['cell']} | {row['mean']:.4f} | {row['std']:.4f} "
                     f"| {row['n_seeds']} | {row['status']} |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    (out / "provenance.json").write_text(json.dumps(report.provenance, indent=2))
    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)
    for name, rows in report.traces.items():
        if not rows:
            continue
        path = trace_dir / (name.replace("/", "_") + ".csv")
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=sorted({k for r in rows for k in r}))
            writer.writeheader()
            writer.writerows(rows)
    return out


def run_negative_transfer(cfg: ExperimentConfig) -> ExperimentReport:
    return run_experiment(dataclasses.replace(cfg, tag="negative_transfer"))


def run_ablation_context(cfg: ExperimentConfig) -> ExperimentReport:
    return run_experiment(dataclasses.replace(cfg, tag="ablation_context"))


def run_ablation_masking(cfg: ExperimentConfig) -> ExperimentReport:
    return run_experiment(dataclasses.replace(cfg, tag="ablation_masking"))


def run_ablation_variate(cfg: ExperimentConfig) -> ExperimentReport:
    return run_experiment(dataclasses.replace(cfg, tag="ablation_variate"))


def run_ablation_output_dist(cfg: ExperimentConfig) -> ExperimentReport:
    return run_experiment(dataclasses.replace(cfg, tag="ablation_output_dist"))


def run_bayes_study(cfg: ExperimentConfig) -> ExperimentReport:
    return run_experiment(dataclasses.replace(cfg, tag="bayes_study"))

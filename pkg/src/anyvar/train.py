"""Optimization loops: LR schedule, pretraining, fine-tuning, grid search.

All randomness in a run derives from ``TrainConfig.seed`` (one numpy generator
for data sampling, the global torch generator for init and dropout), so a
single-threaded rerun with the same seed reproduces the loss trace bit for
bit.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import dataset as ds
from .checkpoint import Checkpoint, checkpoint_from_model, restore_model
from .mixture import mixture_logpdf, mixture_nll
from .model import AnyVariateEncoder, ModelConfig

OBJECTIVES = ("nll", "mae", "mse")


@dataclass
class TrainConfig:
    peak_lr: float = 1e-4
    floor_lr: float = 1e-5
    warmup_steps: int = 5000
    total_steps: int = 100_000
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.98
    batch_size: int = 64
    grad_clip: float | None = 1.0
    early_stop_patience: int = 5
    seed: int = 0
    eval_interval: int = 50
    max_tokens: int = ds.DEFAULT_MAX_TOKENS
    objective: str = "nll"      # fine-tune objective: nll, mae, or mse of the mean
    mask_mode: str = "random"   # "random" pre-text masking or fixed "task" masking
    context: int | None = None  # task-mode context length
    horizon: int | None = None  # task-mode forecast length

    def __post_init__(self) -> None:
        if not 0 < self.floor_lr <= self.peak_lr:
            raise ValueError("need 0 < floor_lr <= peak_lr")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.mask_mode not in ("random", "task"):
            raise ValueError("mask_mode must be 'random' or 'task'")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then cosine annealing down to floor_lr.

    Continuous at the junction (both pieces equal peak_lr at warmup_steps);
    steps past total_steps clamp to floor_lr.
    """
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return cfg.floor_lr
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1.0 + math.cos(math.pi * frac))


def make_optimizer(model: AnyVariateEncoder, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.peak_lr,
        betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
    )


def _batch_loss(model: AnyVariateEncoder, batch: ds.PatchedBatch, objective: str,
                train_mode: bool) -> torch.Tensor:
    mp = model(batch, train_mode=train_mode)
    targets, eval_mask = model.masked_targets(batch)
    if objective == "nll":
        return mixture_nll(mp, targets, eval_mask)
    n = int(eval_mask.sum())
    if n == 0:
        raise ValueError("no forecast targets: eval mask is empty")
    pred_mean = (mp.log_weights.exp() * mp.locs).sum(dim=-1)
    err = (pred_mean - targets) * eval_mask
    if objective == "mae":
        return err.abs().sum() / n
    return err.square().sum() / n


def _optim_step(model: AnyVariateEncoder, optimizer: torch.optim.Optimizer,
                loss: torch.Tensor, lr: float, grad_clip: float | None) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()


@torch.no_grad()
def evaluate_records(
    model: AnyVariateEncoder,
    records: Sequence[ds.TimeSeriesRecord],
    context: int,
    horizon: int,
    metric: str = "nll",
    batch_size: int = 64,
    raw_space: bool = True,
    channel_mixing: bool = False,
    window: str = "tail",
) -> float:
    """Fixed-task evaluation: mean metric over every forecast position.

    NLL is reported in the raw data space by default: the per-position change
    of variables adds log(std + eps) to the normalized-space log density.
    """
    patch = model.config.patch_size
    total, count = 0.0, 0
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        batch, _ = ds.make_eval_batch(chunk, context, horizon, patch, channel_mixing, window)
        mp = model(batch, train_mode=False)
        targets, eval_mask = model.masked_targets(batch)
        mask = eval_mask.bool()
        n = int(mask.sum())
        if n == 0:
            continue
        std_eps = torch.from_numpy(batch.norm_std).to(model.dtype) + ds.NORM_EPS
        if metric == "nll":
            logp = mixture_logpdf(mp, targets)
            if raw_space:
                logp = logp - torch.log(std_eps)
            total += float(-(logp * mask).sum())
        elif metric in ("mae", "mse"):
            pred = (mp.log_weights.exp() * mp.locs).sum(dim=-1)
            if raw_space:
                mean = torch.from_numpy(batch.norm_mean).to(model.dtype)
                pred = pred * std_eps + mean
                truth = targets * std_eps + mean
            else:
                truth = targets
            err = (pred - truth) * mask
            total += float(err.abs().sum() if metric == "mae" else err.square().sum())
        else:
            raise ValueError(f"unknown metric {metric!r}")
        count += n
    if count == 0:
        raise ValueError("no forecast targets in the evaluation set")
    return total / count


def pretrain(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: Sequence[Sequence[ds.TimeSeriesRecord]],
    weights: Sequence[float] | None = None,
    sampler_cfg: ds.SamplerConfig | None = None,
    ratio_sampler: Callable[[int, np.random.Generator], int] | None = None,
    eval_fn: Callable[[AnyVariateEncoder, int], float] | None = None,
    channel_mixing: bool = False,
    dtype: torch.dtype = torch.float32,
) -> tuple[Checkpoint, list[dict]]:
    """Train from scratch on a weighted corpus; returns (checkpoint, trace).

    The trace has one row per eval interval with the mean training NLL since
    the previous row, plus ``eval_fn(model, step)`` when a hook is given.
    With total_steps == 0 the checkpoint holds the untouched initialization.
    """
    if not corpus or all(len(d) == 0 for d in corpus):
        raise ValueError("pretraining corpus is empty")
    sampler_cfg = sampler_cfg or ds.SamplerConfig()
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model = AnyVariateEncoder(model_cfg, dtype=dtype)
    optimizer = make_optimizer(model, train_cfg)

    trace: list[dict] = []
    window: list[float] = []
    for step in range(1, train_cfg.total_steps + 1):
        batch = ds.make_training_batch(
            corpus, weights, sampler_cfg, train_cfg.batch_size, rng,
            max_tokens=train_cfg.max_tokens, patch_size=model_cfg.patch_size,
            ratio_sampler=ratio_sampler, channel_mixing=channel_mixing,
        )
        loss = _batch_loss(model, batch, "nll", train_mode=True)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite training loss at step {step} (batch records: {batch.record_ids})"
            )
        _optim_step(model, optimizer, loss, lr_schedule(step, train_cfg), train_cfg.grad_clip)
        window.append(float(loss.detach()))
        if step % train_cfg.eval_interval == 0 or step == train_cfg.total_steps:
            row = {"step": step, "train_nll": float(np.mean(window))}
            if eval_fn is not None:
                model.eval()
                row["eval"] = float(eval_fn(model, step))
            trace.append(row)
            window = []
    ckpt = checkpoint_from_model(model, optimizer, step=train_cfg.total_steps, np_rng=rng)
    return ckpt, trace


def restore_for_finetune(ckpt: Checkpoint, dropout: float | None = None,
                         dtype: torch.dtype = torch.float32) -> AnyVariateEncoder:
    """Rebuild the model, optionally overriding dropout (a shape-free knob)."""
    model = restore_model(ckpt, dtype=dtype)
    if dropout is not None:
        model.config.dropout = dropout
        for layer in model.layers:
            layer.p_drop = dropout
    return model


def finetune(
    ckpt: Checkpoint,
    train_split: Sequence[ds.TimeSeriesRecord],
    val_split: Sequence[ds.TimeSeriesRecord],
    train_cfg: TrainConfig,
    sampler_cfg: ds.SamplerConfig | None = None,
    dropout: float | None = None,
    channel_mixing: bool = False,
    dtype: torch.dtype = torch.float32,
) -> tuple[Checkpoint, list[dict]]:
    """Gradient updates with early stopping on the validation objective.

    Stops once the count of consecutive non-improving validation evaluations
    reaches ``early_stop_patience`` (patience 0 therefore stops right after
    the first evaluation) and returns the best-validation checkpoint. In
    ``mask_mode="task"`` training batches mask exactly the configured horizon
    behind the configured context; "random" keeps the pretraining masking.
    """
    if not val_split:
        raise ValueError("validation split must be non-empty")
    if not train_split:
        raise ValueError("training split must be non-empty")
    if train_cfg.mask_mode == "task" and (train_cfg.context is None or train_cfg.horizon is None):
        raise ValueError("task-mode fine-tuning needs context and horizon")
    if train_cfg.context is None or train_cfg.horizon is None:
        raise ValueError("fine-tuning needs context and horizon for validation")

    sampler_cfg = sampler_cfg or ds.SamplerConfig()
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model = restore_for_finetune(ckpt, dropout=dropout, dtype=dtype)
    optimizer = make_optimizer(model, train_cfg)
    corpus = [list(train_split)]

    def validate() -> float:
        model.eval()
        return evaluate_records(
            model, val_split, train_cfg.context, train_cfg.horizon,
            metric=train_cfg.objective, batch_size=train_cfg.batch_size,
            channel_mixing=channel_mixing,
        )

    best_state: dict | None = None
    best_val = math.inf
    bad_evals = 0
    trace: list[dict] = []
    for step in range(1, train_cfg.total_steps + 1):
        if train_cfg.mask_mode == "task":
            idx = rng.integers(len(train_split), size=min(train_cfg.batch_size, len(train_split)))
            chunk = [train_split[i] for i in idx]
            window = train_cfg.context + train_cfg.horizon
            trimmed = []
            for rec in chunk:
                variates = [
                    ds.VariateSeries(v.name, v.values[-window:], v.freq) for v in rec.variates
                ]
                trimmed.append(ds.TimeSeriesRecord(rec.id, variates))
            samples = []
            for rec in trimmed:
                masks = ds.build_masks(rec, horizons=[train_cfg.horizon] * rec.n_variates)
                s = ds.prepare_sample(rec, masks, model.config.patch_size,
                                      channel_mixing=channel_mixing)
                if s is not None:
                    samples.append(s)
            if not samples:
                raise ValueError("all fine-tuning records were filtered out")
            batch = ds.collate(samples, model.config.patch_size)
        else:
            batch = ds.make_training_batch(
                corpus, [1.0], sampler_cfg, train_cfg.batch_size, rng,
                max_tokens=train_cfg.max_tokens, patch_size=model.config.patch_size,
                channel_mixing=channel_mixing,
            )
        model.train()
        loss = _batch_loss(model, batch, train_cfg.objective, train_mode=True)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite fine-tuning loss at step {step} (batch records: {batch.record_ids})"
            )
        _optim_step(model, optimizer, loss, lr_schedule(step, train_cfg), train_cfg.grad_clip)

        if step % train_cfg.eval_interval == 0 or step == train_cfg.total_steps:
            val = validate()
            trace.append({"step": step, "train_loss": float(loss.detach()), "val_loss": val})
            if val < best_val:
                best_val = val
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                bad_evals = 0
            else:
                bad_evals += 1
            if bad_evals >= train_cfg.early_stop_patience:
                break

    if best_state is None:  # total_steps == 0: no evaluation happened
        val = validate()
        trace.append({"step": 0, "train_loss": math.nan, "val_loss": val})
        best_val = val
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    ckpt_out = checkpoint_from_model(model, optimizer, step=ckpt.step, np_rng=rng)
    return ckpt_out, trace


def grid_search(
    ckpt: Checkpoint,
    train_split: Sequence[ds.TimeSeriesRecord],
    val_split: Sequence[ds.TimeSeriesRecord],
    base_cfg: TrainConfig,
    grid: dict[str, Sequence],
    channel_mixing: bool = False,
) -> tuple[dict, list[dict]]:
    """Exhaustive product over hyperparameter values; lowest validation wins.

    Grid keys are TrainConfig field names plus "dropout" (applied to the
    restored model). Returns (best cell, report); the report has one row per
    cell with its parameters and best validation loss.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must map at least one hyperparameter to non-empty values")
    cfg_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in grid:
        if key != "dropout" and key not in cfg_fields:
            raise ValueError(f"unknown grid key {key!r}")
    report: list[dict] = []
    keys = sorted(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, combo))
        overrides = {k: v for k, v in cell.items() if k != "dropout"}
        cfg = dataclasses.replace(base_cfg, **overrides)
        _, trace = finetune(
            ckpt, train_split, val_split, cfg,
            dropout=cell.get("dropout"), channel_mixing=channel_mixing,
        )
        score = min(row["val_loss"] for row in trace)
        report.append({**cell, "val_loss": float(score)})
    best = min(report, key=lambda row: row["val_loss"])
    return best, report

"""Record model, JSONL on-disk format, and the batch construction pipeline.

A training batch is built in four stages:

1. mask: choose forecast targets (trailing positions per variate) and read
   missing positions off the data,
2. normalize: per-variate standardization from observed positions only,
3. flatten + patch: concatenate variates along one token axis, split each
   variate into fixed-size patches, right-pad the final partial patch,
4. collate: stack samples, right-padding the token axis across the batch.

Missing values are represented as NaN in memory and ``null`` on disk. Tail
padding inside a partial final patch is flagged both in ``pad_mask`` and in
``missing_mask`` so that the embedding sees it as unobserved rather than as a
literal zero; ``pad_mask`` alone distinguishes padding from genuine gaps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DEFAULT_PATCH_SIZE = 32
DEFAULT_MAX_TOKENS = 512
NORM_EPS = 1e-5
MIN_OBSERVATIONS = 5


class JsonlFormatError(ValueError):
    """Raised when a dataset file violates the JSONL record schema."""


@dataclass
class VariateSeries:
    """One named series; NaN entries mark missing observations."""

    name: str
    values: np.ndarray
    freq: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size < 1:
            raise ValueError(f"variate {self.name!r} must be a non-empty 1-d series")

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def missing(self) -> np.ndarray:
        return ~np.isfinite(self.values)


@dataclass
class TimeSeriesRecord:
    id: str
    variates: list[VariateSeries]

    def __post_init__(self) -> None:
        if not self.variates:
            raise ValueError(f"record {self.id!r} has no variates")
        names = [v.name for v in self.variates]
        if len(set(names)) != len(names):
            raise ValueError(f"record {self.id!r} has duplicate variate names")

    @property
    def n_variates(self) -> int:
        return len(self.variates)


@dataclass
class SamplerConfig:
    """Hyperparameters of the stochastic batch shaping."""

    mask_alpha: float = 5.0
    mask_beta: float = 10.0
    variate_alpha: float = 2.0
    variate_beta: float = 5.0
    max_variates: int = 128
    weight_floor: float = 0.001

    def __post_init__(self) -> None:
        for name in ("mask_alpha", "mask_beta", "variate_alpha", "variate_beta",
                     "max_variates", "weight_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_floor >= 1:
            raise ValueError("weight_floor must be < 1")


# ---------------------------------------------------------------------------
# JSONL round trip


def _record_to_obj(record: TimeSeriesRecord) -> dict:
    return {
        "id": record.id,
        "variates": [
            {
                "name": v.name,
                "freq": v.freq,
                "values": [None if not math.isfinite(x) else float(x) for x in v.values],
            }
            for v in record.variates
        ],
    }


def _obj_to_record(obj: dict, lineno: int) -> TimeSeriesRecord:
    if not isinstance(obj, dict) or "id" not in obj:
        raise JsonlFormatError(f"line {lineno}: record object missing 'id' field")
    if "variates" not in obj or not isinstance(obj["variates"], list) or not obj["variates"]:
        raise JsonlFormatError(f"line {lineno}: record {obj.get('id')!r} needs a non-empty 'variates' list")
    variates = []
    for vobj in obj["variates"]:
        if "name" not in vobj or "values" not in vobj:
            raise JsonlFormatError(f"line {lineno}: variate entry missing 'name' or 'values'")
        values = np.array(
            [np.nan if x is None else float(x) for x in vobj["values"]], dtype=np.float64
        )
        variates.append(VariateSeries(name=str(vobj["name"]), values=values, freq=str(vobj.get("freq", ""))))
    try:
        return TimeSeriesRecord(id=str(obj["id"]), variates=variates)
    except ValueError as exc:
        raise JsonlFormatError(f"line {lineno}: {exc}") from exc


def read_jsonl(path: str | Path) -> list[TimeSeriesRecord]:
    """Parse one record per line; errors name the offending line number."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            records.append(_obj_to_record(obj, lineno))
    return records


def write_jsonl(records: Sequence[TimeSeriesRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(_record_to_obj(record)) + "\n")


# ---------------------------------------------------------------------------
# Normalization


def instance_normalize(
    values: np.ndarray, observed_mask: np.ndarray, min_observations: int = MIN_OBSERVATIONS
) -> tuple[np.ndarray, float, float] | None:
    """Standardize a series using only observed positions.

    Returns (normalized, mean, std) with normalized = (x - mean) / (std + eps),
    std the population standard deviation (denominator n). Series with fewer
    than ``min_observations`` observed values or zero variance are not an
    error: they return None and the caller drops them.
    """
    values = np.asarray(values, dtype=np.float64)
    observed_mask = np.asarray(observed_mask, dtype=bool)
    obs = values[observed_mask]
    if obs.size < min_observations:
        return None
    mean = float(obs.mean())
    std = float(obs.std())  # population convention
    if std == 0.0:
        return None
    normalized = (values - mean) / (std + NORM_EPS)
    return normalized, mean, std


def denormalize(normalized: np.ndarray, mean: float, std: float) -> np.ndarray:
    return np.asarray(normalized) * (std + NORM_EPS) + mean


# ---------------------------------------------------------------------------
# Masking


def sample_masking_ratio(cfg: SamplerConfig, n_positions: int, rng: np.random.Generator) -> int:
    """Two-stage draw: p ~ Beta(alpha, beta), then k ~ Binomial(n_positions, p)."""
    if n_positions <= 0:
        return 0
    p = rng.beta(cfg.mask_alpha, cfg.mask_beta)
    return int(rng.binomial(n_positions, p))


@dataclass
class RecordMasks:
    """Per-variate forecast and missing masks in raw position space."""

    forecast: list[np.ndarray]
    missing: list[np.ndarray]


def build_masks(
    record: TimeSeriesRecord,
    horizons: Sequence[int] | None = None,
    cfg: SamplerConfig | None = None,
    rng: np.random.Generator | None = None,
    ratio_sampler: Callable[[int, np.random.Generator], int] | None = None,
    anywhere: bool = False,
) -> RecordMasks:
    """Mark forecast targets and missing positions for one record.

    Evaluation mode (``horizons`` given): variate j gets exactly its trailing
    ``horizons[j]`` positions as targets. Training mode: the masked count per
    variate comes from ``ratio_sampler`` (default: the beta-binomial draw of
    ``sample_masking_ratio``), each variate independently. ``anywhere=True``
    scatters the masked positions uniformly instead of masking the tail
    (imputation-style pre-text task, off by default).

    Missing positions are never forecast targets.
    """
    forecast, missing = [], []
    if horizons is not None and len(horizons) != record.n_variates:
        raise ValueError(
            f"got {len(horizons)} horizons for {record.n_variates} variates in record {record.id!r}"
        )
    for j, variate in enumerate(record.variates):
        T = len(variate)
        miss = variate.missing
        if horizons is not None:
            k = int(horizons[j])
            if k < 0 or k >= T:
                raise ValueError(
                    f"horizon {k} out of range for variate {variate.name!r} of length {T}"
                )
        else:
            if rng is None:
                raise ValueError("training-mode masking needs an rng")
            if ratio_sampler is not None:
                k = int(ratio_sampler(T, rng))
            else:
                k = sample_masking_ratio(cfg or SamplerConfig(), T, rng)
            k = min(k, T - 1)  # keep at least one context position
        fmask = np.zeros(T, dtype=bool)
        if k > 0:
            if anywhere:
                idx = rng.choice(T, size=k, replace=False)
                fmask[idx] = True
            else:
                fmask[T - k:] = True
        fmask &= ~miss
        forecast.append(fmask)
        missing.append(miss.copy())
    return RecordMasks(forecast=forecast, missing=missing)


# ---------------------------------------------------------------------------
# Flatten + patch


@dataclass
class SamplePatches:
    """One record, flattened and patched (no batch axis yet)."""

    tokens: np.ndarray        # (N, P)
    variate_ids: np.ndarray   # (N,)
    time_indices: np.ndarray  # (N,) patch index within the token's variate
    forecast_mask: np.ndarray  # (N, P)
    missing_mask: np.ndarray   # (N, P)
    pad_mask: np.ndarray       # (N, P)
    norm_mean: np.ndarray      # (N, P) per-position copy of the variate mean
    norm_std: np.ndarray       # (N, P)
    record_id: str = ""


@dataclass
class PatchedBatch:
    """Model-ready batch. All positional arrays share the (B, N, P) layout.

    ``pad_mask`` is position level; a token is excluded from attention when
    every one of its positions is padding (``token_pad_mask``). Loss-evaluated
    positions are ``eval_mask`` = forecast and not missing and not pad.
    """

    tokens: np.ndarray
    variate_ids: np.ndarray   # (B, N), -1 on all-pad tokens
    time_indices: np.ndarray  # (B, N)
    forecast_mask: np.ndarray
    missing_mask: np.ndarray
    pad_mask: np.ndarray
    norm_mean: np.ndarray     # (B, N, P)
    norm_std: np.ndarray      # (B, N, P)
    record_ids: list[str] = field(default_factory=list)
    patch_size: int = DEFAULT_PATCH_SIZE

    @property
    def token_pad_mask(self) -> np.ndarray:
        return self.pad_mask.all(axis=-1)

    @property
    def eval_mask(self) -> np.ndarray:
        return self.forecast_mask & ~self.missing_mask & ~self.pad_mask

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[1])


def normalize_record(
    record: TimeSeriesRecord, masks: RecordMasks
) -> tuple[TimeSeriesRecord, RecordMasks, list[tuple[float, float]]] | None:
    """Standardize each variate from its observed (non-target, non-missing) span.

    Variates failing the validity filter (fewer than five observations or zero
    variance after masking) are dropped together with their masks; None means
    the whole record was filtered out.
    """
    kept_variates, kept_forecast, kept_missing, stats = [], [], [], []
    for variate, fmask, miss in zip(record.variates, masks.forecast, masks.missing):
        observed = ~fmask & ~miss
        result = instance_normalize(variate.values, observed)
        if result is None:
            continue
        normalized, mean, std = result
        kept_variates.append(VariateSeries(name=variate.name, values=normalized, freq=variate.freq))
        kept_forecast.append(fmask)
        kept_missing.append(miss)
        stats.append((mean, std))
    if not kept_variates:
        return None
    return (
        TimeSeriesRecord(id=record.id, variates=kept_variates),
        RecordMasks(forecast=kept_forecast, missing=kept_missing),
        stats,
    )


def flatten_and_patch(
    record: TimeSeriesRecord,
    masks: RecordMasks,
    patch_size: int = DEFAULT_PATCH_SIZE,
    norm_stats: list[tuple[float, float]] | None = None,
) -> SamplePatches:
    """Concatenate variates along the token axis and split each into patches.

    Expects an already-normalized record. Each variate becomes ceil(T / P)
    tokens; the final partial patch is right-padded, with pad positions at
    strictly larger time offsets than every data position. Pad positions carry
    value 0 and are flagged in both pad_mask and missing_mask. Token time
    indices restart at 0 for each variate.
    """
    if norm_stats is None:
        norm_stats = [(0.0, 1.0)] * record.n_variates
    tok_rows, vid_rows, tix_rows = [], [], []
    f_rows, m_rows, p_rows, mean_rows, std_rows = [], [], [], [], []
    for j, (variate, fmask, miss) in enumerate(
        zip(record.variates, masks.forecast, masks.missing)
    ):
        T = len(variate)
        n_patches = -(-T // patch_size)
        padded_len = n_patches * patch_size
        n_pad = padded_len - T

        vals = np.zeros(padded_len, dtype=np.float64)
        vals[:T] = np.nan_to_num(variate.values, nan=0.0)
        f = np.zeros(padded_len, dtype=bool)
        f[:T] = fmask
        m = np.zeros(padded_len, dtype=bool)
        m[:T] = miss
        p = np.zeros(padded_len, dtype=bool)
        if n_pad:
            p[T:] = True
            m[T:] = True  # padding is unobserved as far as the embedding goes

        tok_rows.append(vals.reshape(n_patches, patch_size))
        f_rows.append(f.reshape(n_patches, patch_size))
        m_rows.append(m.reshape(n_patches, patch_size))
        p_rows.append(p.reshape(n_patches, patch_size))
        vid_rows.append(np.full(n_patches, j, dtype=np.int64))
        tix_rows.append(np.arange(n_patches, dtype=np.int64))
        mean, std = norm_stats[j]
        mean_rows.append(np.full((n_patches, patch_size), mean, dtype=np.float64))
        std_rows.append(np.full((n_patches, patch_size), std, dtype=np.float64))

    return SamplePatches(
        tokens=np.concatenate(tok_rows),
        variate_ids=np.concatenate(vid_rows),
        time_indices=np.concatenate(tix_rows),
        forecast_mask=np.concatenate(f_rows),
        missing_mask=np.concatenate(m_rows),
        pad_mask=np.concatenate(p_rows),
        norm_mean=np.concatenate(mean_rows),
        norm_std=np.concatenate(std_rows),
        record_id=record.id,
    )


def collate(samples: Sequence[SamplePatches], patch_size: int = DEFAULT_PATCH_SIZE) -> PatchedBatch:
    """Stack samples, right-padding the token axis to the longest sample."""
    if not samples:
        raise ValueError("cannot collate an empty sample list")
    B = len(samples)
    N = max(s.tokens.shape[0] for s in samples)
    P = samples[0].tokens.shape[1]
    tokens = np.zeros((B, N, P), dtype=np.float64)
    forecast = np.zeros((B, N, P), dtype=bool)
    missing = np.zeros((B, N, P), dtype=bool)
    pad = np.ones((B, N, P), dtype=bool)
    vids = np.full((B, N), -1, dtype=np.int64)
    tix = np.zeros((B, N), dtype=np.int64)
    mean = np.zeros((B, N, P), dtype=np.float64)
    std = np.ones((B, N, P), dtype=np.float64)
    for i, s in enumerate(samples):
        n = s.tokens.shape[0]
        tokens[i, :n] = s.tokens
        forecast[i, :n] = s.forecast_mask
        missing[i, :n] = s.missing_mask
        pad[i, :n] = s.pad_mask
        vids[i, :n] = s.variate_ids
        tix[i, :n] = s.time_indices
        mean[i, :n] = s.norm_mean
        std[i, :n] = s.norm_std
    return PatchedBatch(
        tokens=tokens, variate_ids=vids, time_indices=tix,
        forecast_mask=forecast, missing_mask=missing, pad_mask=pad,
        norm_mean=mean, norm_std=std,
        record_ids=[s.record_id for s in samples], patch_size=P,
    )


def pack_channel_mixing(
    record: TimeSeriesRecord,
    masks: RecordMasks,
    patch_size: int = DEFAULT_PATCH_SIZE,
    norm_stats: list[tuple[float, float]] | None = None,
) -> SamplePatches:
    """Channel-mixing layout: all variates of a time patch share one token.

    Variates must be equal length. Token t carries the concatenation of every
    variate's t-th patch, so the model's per-token slot count is
    patch_size * n_variates and there is a single variate id.
    """
    lengths = {len(v) for v in record.variates}
    if len(lengths) != 1:
        raise ValueError("channel mixing needs equal-length variates")
    per_variate = [
        flatten_and_patch(
            TimeSeriesRecord(id=record.id, variates=[v]),
            RecordMasks(forecast=[f], missing=[m]),
            patch_size,
            None if norm_stats is None else [norm_stats[j]],
        )
        for j, (v, f, m) in enumerate(zip(record.variates, masks.forecast, masks.missing))
    ]
    n = per_variate[0].tokens.shape[0]
    return SamplePatches(
        tokens=np.concatenate([s.tokens for s in per_variate], axis=1),
        variate_ids=np.zeros(n, dtype=np.int64),
        time_indices=np.arange(n, dtype=np.int64),
        forecast_mask=np.concatenate([s.forecast_mask for s in per_variate], axis=1),
        missing_mask=np.concatenate([s.missing_mask for s in per_variate], axis=1),
        pad_mask=np.concatenate([s.pad_mask for s in per_variate], axis=1),
        norm_mean=np.concatenate([s.norm_mean for s in per_variate], axis=1),
        norm_std=np.concatenate([s.norm_std for s in per_variate], axis=1),
        record_id=record.id,
    )


# ---------------------------------------------------------------------------
# Corpus-level samplers


def compute_dataset_weights(sizes: Sequence[float], floor: float = 0.001) -> np.ndarray:
    """Observation-count weights with a two-stage floor.

    Normalize sizes to probabilities, lift every entry to at least ``floor``,
    then renormalize. After the second normalization an entry may sit slightly
    below the floor; every entry is >= floor / (1 + n * floor).
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or sizes.sum() <= 0 or (sizes < 0).any():
        raise ValueError("sizes must be non-empty, nonnegative, and not all zero")
    w = sizes / sizes.sum()
    w = np.maximum(w, floor)
    return w / w.sum()


def sample_num_variates(cfg: SamplerConfig, rng: np.random.Generator) -> int:
    """Beta-binomial draw of a variate count, clamped to [1, max_variates]."""
    p = rng.beta(cfg.variate_alpha, cfg.variate_beta)
    k = int(rng.binomial(cfg.max_variates, p))
    return max(1, k)


def _truncate_recent(
    record: TimeSeriesRecord, masks: RecordMasks, max_tokens: int, patch_size: int
) -> tuple[TimeSeriesRecord, RecordMasks]:
    """Cap the total token count of a sample, keeping the most recent steps."""
    n_var = record.n_variates
    if n_var > max_tokens:
        record = TimeSeriesRecord(id=record.id, variates=record.variates[:max_tokens])
        masks = RecordMasks(forecast=masks.forecast[:max_tokens], missing=masks.missing[:max_tokens])
        n_var = max_tokens
    budget = (max_tokens // n_var) * patch_size
    variates, fm, mm = [], [], []
    for v, f, m in zip(record.variates, masks.forecast, masks.missing):
        if len(v) > budget:
            variates.append(VariateSeries(name=v.name, values=v.values[-budget:], freq=v.freq))
            fm.append(f[-budget:])
            mm.append(m[-budget:])
        else:
            variates.append(v)
            fm.append(f)
            mm.append(m)
    return TimeSeriesRecord(id=record.id, variates=variates), RecordMasks(forecast=fm, missing=mm)


def prepare_sample(
    record: TimeSeriesRecord,
    masks: RecordMasks,
    patch_size: int = DEFAULT_PATCH_SIZE,
    max_tokens: int | None = None,
    channel_mixing: bool = False,
) -> SamplePatches | None:
    """Truncate, normalize, filter, and patch one masked record."""
    if max_tokens is not None:
        record, masks = _truncate_recent(record, masks, max_tokens, patch_size)
    result = normalize_record(record, masks)
    if result is None:
        return None
    record, masks, stats = result
    packer = pack_channel_mixing if channel_mixing else flatten_and_patch
    return packer(record, masks, patch_size, stats)


def make_training_batch(
    corpus: Sequence[Sequence[TimeSeriesRecord]],
    weights: Sequence[float] | None,
    cfg: SamplerConfig,
    batch_size: int,
    rng: np.random.Generator,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    patch_size: int = DEFAULT_PATCH_SIZE,
    ratio_sampler: Callable[[int, np.random.Generator], int] | None = None,
    channel_mixing: bool = False,
) -> PatchedBatch:
    """Sample, mask, normalize, and patch a batch from a weighted corpus.

    ``corpus`` is a list of datasets (each a list of records); datasets are
    sampled by ``weights`` and records uniformly within a dataset. Records with
    more variates than the sampled variate count are subsampled. Records fully
    rejected by the validity filter are resampled.
    """
    if not corpus or all(len(ds) == 0 for ds in corpus):
        raise ValueError("corpus must contain at least one record")
    if weights is None:
        weights = compute_dataset_weights([sum(len(v) for r in ds for v in r.variates) for ds in corpus],
                                          floor=cfg.weight_floor)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != len(corpus):
        raise ValueError("one weight per dataset required")
    weights = weights / weights.sum()

    samples: list[SamplePatches] = []
    attempts = 0
    while len(samples) < batch_size:
        attempts += 1
        if attempts > 1000 * batch_size:
            raise ValueError("could not assemble a batch: all sampled records were filtered out")
        ds = corpus[int(rng.choice(len(corpus), p=weights))]
        if not ds:
            continue
        record = ds[int(rng.integers(len(ds)))]
        if record.n_variates > 1:
            k = min(record.n_variates, sample_num_variates(cfg, rng))
            if k < record.n_variates:
                keep = sorted(rng.choice(record.n_variates, size=k, replace=False).tolist())
                record = TimeSeriesRecord(id=record.id, variates=[record.variates[j] for j in keep])
        masks = build_masks(record, cfg=cfg, rng=rng, ratio_sampler=ratio_sampler)
        sample = prepare_sample(record, masks, patch_size, max_tokens, channel_mixing)
        if sample is not None:
            samples.append(sample)
    return collate(samples, patch_size)


def make_eval_batch(
    records: Sequence[TimeSeriesRecord],
    context: int,
    horizon: int,
    patch_size: int = DEFAULT_PATCH_SIZE,
    channel_mixing: bool = False,
    window: str = "tail",
) -> tuple[PatchedBatch, list[str]]:
    """Fixed-task batch: ``horizon`` trailing positions of a context+horizon
    window are the targets. ``window="tail"`` takes each record's most recent
    steps (the usual forecast task); ``window="head"`` takes its first steps,
    which matches how tail-masked training tasks are anchored.

    Returns the batch plus the ids of records that survived the validity
    filter, in batch order.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if window not in ("tail", "head"):
        raise ValueError("window must be 'tail' or 'head'")
    samples, kept = [], []
    for record in records:
        span = context + horizon
        variates = []
        for v in record.variates:
            if len(v) < span:
                raise ValueError(
                    f"record {record.id!r} variate {v.name!r} shorter than context+horizon={span}"
                )
            sliced = v.values[-span:] if window == "tail" else v.values[:span]
            variates.append(VariateSeries(name=v.name, values=sliced, freq=v.freq))
        trimmed = TimeSeriesRecord(id=record.id, variates=variates)
        masks = build_masks(trimmed, horizons=[horizon] * trimmed.n_variates)
        sample = prepare_sample(trimmed, masks, patch_size, None, channel_mixing)
        if sample is not None:
            samples.append(sample)
            kept.append(record.id)
    if not samples:
        raise ValueError("no records survived the validity filter")
    return collate(samples, patch_size), kept

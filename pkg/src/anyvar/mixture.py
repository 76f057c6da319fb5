"""Mixture-of-Student-T output distribution.

The head emits 4K raw numbers per forecast slot; ``MixtureParams.from_raw``
maps them onto the constrained space: weights on the simplex via softmax,
scales positive via softplus, and degrees of freedom above 2 via
2 + softplus so every component has a finite variance.

The negative log likelihood stays in torch (it is the training objective);
quantiles, moments, and sampling are inference-time utilities and run in
numpy / scipy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats

SCALE_FLOOR = 1e-9
# keeps df strictly above 2 even when softplus(raw) underflows below ulp(2)
DF_FLOOR = 1e-6


@dataclass
class MixtureParams:
    """Component parameters with shared leading shape (..., K)."""

    log_weights: torch.Tensor  # normalized log simplex weights
    locs: torch.Tensor
    scales: torch.Tensor       # > 0
    dfs: torch.Tensor          # > 2

    @classmethod
    def from_raw(cls, raw: torch.Tensor, n_components: int) -> "MixtureParams":
        """Split a (..., 4K) raw tensor into constrained parameter blocks."""
        K = n_components
        if raw.shape[-1] != 4 * K:
            raise ValueError(f"raw head output must have last dim {4 * K}, got {raw.shape[-1]}")
        logits, locs, raw_scale, raw_df = torch.split(raw, K, dim=-1)
        return cls(
            log_weights=torch.log_softmax(logits, dim=-1),
            locs=locs,
            scales=torch.nn.functional.softplus(raw_scale) + SCALE_FLOOR,
            dfs=2.0 + DF_FLOOR + torch.nn.functional.softplus(raw_df),
        )

    @property
    def n_components(self) -> int:
        return int(self.log_weights.shape[-1])

    def numpy(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(weights, locs, scales, dfs) as float64 arrays, weights exponentiated."""
        return (
            self.log_weights.detach().double().exp().numpy(),
            self.locs.detach().double().numpy(),
            self.scales.detach().double().numpy(),
            self.dfs.detach().double().numpy(),
        )

    def denormalized(self, mean: torch.Tensor, std_plus_eps: torch.Tensor) -> "MixtureParams":
        """Location-scale transform back to the raw data space."""
        return MixtureParams(
            log_weights=self.log_weights,
            locs=self.locs * std_plus_eps + mean,
            scales=self.scales * std_plus_eps,
            dfs=self.dfs,
        )


def student_t_logpdf(x: torch.Tensor, loc: torch.Tensor, scale: torch.Tensor,
                     df: torch.Tensor) -> torch.Tensor:
    z = (x - loc) / scale
    half = (df + 1.0) / 2.0
    return (
        torch.lgamma(half)
        - torch.lgamma(df / 2.0)
        - 0.5 * torch.log(df * math.pi)
        - torch.log(scale)
        - half * torch.log1p(z * z / df)
    )


def mixture_logpdf(mp: MixtureParams, x: torch.Tensor) -> torch.Tensor:
    """Log density of the mixture at x, broadcast over the component axis."""
    comp = student_t_logpdf(x.unsqueeze(-1), mp.locs, mp.scales, mp.dfs)
    return torch.logsumexp(mp.log_weights + comp, dim=-1)


def mixture_nll(mp: MixtureParams, targets: torch.Tensor, eval_mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log likelihood over the eval-masked positions.

    ``eval_mask`` must already be forecast & not-missing & not-pad; an empty
    mask has no defined loss and is rejected.
    """
    mask = eval_mask.bool()
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no forecast targets: eval mask is empty")
    logp = mixture_logpdf(mp, targets)
    return -(logp * mask).sum() / n


def mixture_moments(mp: MixtureParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance per position; dfs > 2 guarantees both exist."""
    w, locs, scales, dfs = mp.numpy()
    mean = (w * locs).sum(axis=-1)
    second = (w * (scales**2 * dfs / (dfs - 2.0) + locs**2)).sum(axis=-1)
    return mean, second - mean**2


def mixture_cdf(mp: MixtureParams, x: np.ndarray) -> np.ndarray:
    """Mixture CDF evaluated elementwise at x (same leading shape as mp)."""
    w, locs, scales, dfs = mp.numpy()
    x = np.asarray(x, dtype=np.float64)[..., None]
    return (w * stats.t.cdf((x - locs) / scales, dfs)).sum(axis=-1)


def mixture_quantile(mp: MixtureParams, alpha: float, tol: float = 1e-6) -> np.ndarray:
    """Invert the mixture CDF by bisection to absolute tolerance ``tol``.

    The bracket comes from the component quantiles: the mixture quantile is
    pinched between the smallest and largest per-component alpha-quantile.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    w, locs, scales, dfs = mp.numpy()
    comp_q = locs + scales * stats.t.ppf(alpha, dfs)
    lo = comp_q.min(axis=-1)
    hi = comp_q.max(axis=-1)
    if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
        raise FloatingPointError("quantile bracket is not finite")
    # ~60 halvings take any bracket below 1e-6 absolute width.
    n_iter = max(1, int(np.ceil(np.log2(max((hi - lo).max() / tol, 1.0)))) + 2)
    x = np.asarray(locs[..., 0], dtype=np.float64).copy()
    for _ in range(n_iter):
        x = 0.5 * (lo + hi)
        below = (w * stats.t.cdf((x[..., None] - locs) / scales, dfs)).sum(axis=-1) < alpha
        lo = np.where(below, x, lo)
        hi = np.where(below, hi, x)
    return 0.5 * (lo + hi)


def mixture_sample(mp: MixtureParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """n draws per position, returned with shape (n, *leading)."""
    w, locs, scales, dfs = mp.numpy()
    lead = w.shape[:-1]
    K = w.shape[-1]
    flat_w = w.reshape(-1, K)
    flat_loc = locs.reshape(-1, K)
    flat_scale = scales.reshape(-1, K)
    flat_df = dfs.reshape(-1, K)
    out = np.empty((n, flat_w.shape[0]), dtype=np.float64)
    for i in range(flat_w.shape[0]):
        comp = rng.choice(K, size=n, p=flat_w[i] / flat_w[i].sum())
        t = rng.standard_t(flat_df[i][comp])
        out[:, i] = flat_loc[i][comp] + flat_scale[i][comp] * t
    return out.reshape((n, *lead))

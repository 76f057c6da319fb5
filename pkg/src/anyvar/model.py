"""Flattened-variate transformer encoder with a Student-T mixture head.

Attention runs over the single flattened token axis (all variates of a sample
concatenated). Two ingredients make the layout order-free:

- rotary position rotations driven by per-variate patch indices, so scores
  depend on time only through index differences, and
- learnable per-head scalar biases added to every score, one value when query
  and key share a variate and another when they do not. Swapping whole
  variates permutes the outputs accordingly (equivariance).

Pre-normalization everywhere, SiLU-gated feed-forward, and a dense head that
predicts per-timestep mixture parameters for every slot of a patch.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .dataset import PatchedBatch
from .mixture import MixtureParams

HEAD_MODES = ("single_t", "mixture_t")


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    patch_size: int = 32
    dropout: float = 0.0
    n_mixture_components: int = 4
    head_mode: str = "mixture_t"
    max_variates: int = 128
    channels_per_token: int = 1  # >1 packs several variates into one token (channel mixing)
    rotary_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if self.head_mode == "single_t":
            self.n_mixture_components = 1
        if self.n_mixture_components < 1:
            raise ValueError("n_mixture_components must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary rotations")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def slots_per_token(self) -> int:
        return self.patch_size * self.channels_per_token

    def hash(self) -> str:
        return config_hash(self)


def config_hash(config: ModelConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def _init_linear(linear: nn.Linear) -> None:
    nn.init.trunc_normal_(linear.weight, std=0.02, a=-0.04, b=0.04)
    if linear.bias is not None:
        nn.init.zeros_(linear.bias)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.scale = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        rms = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * rms * self.scale


def rotary_angles(positions: torch.Tensor, head_dim: int, base: float,
                  dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape (B, 1, N, head_dim) from integer positions (B, N)."""
    half = head_dim // 2
    inv_freq = base ** (-torch.arange(half, dtype=dtype) / half)
    ang = positions.to(dtype)[:, :, None] * inv_freq  # (B, N, half)
    ang = torch.cat([ang, ang], dim=-1)
    return ang.cos()[:, None], ang.sin()[:, None]


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    x1, x2 = x.chunk(2, dim=-1)
    return torch.cat([-x2, x1], dim=-1)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    return x * cos + _rotate_half(x) * sin


class AnyVariateAttention(nn.Module):
    """Multi-head attention with rotary relative positions and variate biases."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)
        # scalar score offsets per head: same-variate vs cross-variate pairs
        self.bias_same = nn.Parameter(torch.zeros(n_heads))
        self.bias_cross = nn.Parameter(torch.zeros(n_heads))
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.o_proj):
            _init_linear(lin)

    def scores(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor,
               same_variate: torch.Tensor, key_pad: torch.Tensor) -> torch.Tensor:
        B, N, _ = x.shape
        H, D = self.n_heads, self.head_dim
        q = self.q_proj(x).view(B, N, H, D).transpose(1, 2)
        k = self.k_proj(x).view(B, N, H, D).transpose(1, 2)
        q = apply_rotary(q, cos, sin)
        k = apply_rotary(k, cos, sin)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D)  # (B, H, N, N)
        u1 = self.bias_same.view(1, -1, 1, 1).to(scores.dtype)
        u2 = self.bias_cross.view(1, -1, 1, 1).to(scores.dtype)
        scores = scores + torch.where(same_variate[:, None], u1, u2)
        return scores.masked_fill(key_pad[:, None, None, :], float("-inf"))

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor,
                same_variate: torch.Tensor, key_pad: torch.Tensor) -> torch.Tensor:
        B, N, _ = x.shape
        H, D = self.n_heads, self.head_dim
        attn = torch.softmax(self.scores(x, cos, sin, same_variate, key_pad), dim=-1)
        v = self.v_proj(x).view(B, N, H, D).transpose(1, 2)
        out = (attn @ v).transpose(1, 2).reshape(B, N, H * D)
        return self.o_proj(out)


class GatedFeedForward(nn.Module):
    """SiLU-gated linear unit replacing the plain two-layer FFN."""

    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.gate = nn.Linear(d_model, d_ff)
        self.up = nn.Linear(d_model, d_ff)
        self.down = nn.Linear(d_ff, d_model)
        for lin in (self.gate, self.up, self.down):
            _init_linear(lin)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(nn.functional.silu(self.gate(x)) * self.up(x))


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm_attn = RMSNorm(config.d_model)
        self.attn = AnyVariateAttention(config.d_model, config.n_heads)
        self.norm_ffn = RMSNorm(config.d_model)
        self.ffn = GatedFeedForward(config.d_model, config.d_ff)
        self.p_drop = config.dropout

    def forward(self, x, cos, sin, same_variate, key_pad, train_mode: bool):
        h = self.attn(self.norm_attn(x), cos, sin, same_variate, key_pad)
        x = x + nn.functional.dropout(h, self.p_drop, training=train_mode)
        h = self.ffn(self.norm_ffn(x))
        return x + nn.functional.dropout(h, self.p_drop, training=train_mode)


class AnyVariateEncoder(nn.Module):
    """Patch embedding -> pre-norm encoder stack -> per-slot mixture head."""

    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        slots = config.slots_per_token
        self.patch_embed = nn.Linear(3 * slots, config.d_model)
        _init_linear(self.patch_embed)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))
        self.final_norm = RMSNorm(config.d_model)
        self.head = nn.Linear(config.d_model, slots * 4 * config.n_mixture_components)
        _init_linear(self.head)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    def embed_patches(self, batch: PatchedBatch) -> torch.Tensor:
        """Token inputs: zero-filled values plus forecast and missing bit planes.

        Values at forecast-masked, missing, or pad positions are forced to
        zero before the projection, so perturbing them cannot reach the model.
        """
        dt = self.dtype
        tokens = torch.from_numpy(np.ascontiguousarray(batch.tokens)).to(dt)
        forecast = torch.from_numpy(np.ascontiguousarray(batch.forecast_mask))
        missing = torch.from_numpy(np.ascontiguousarray(batch.missing_mask))
        pad = torch.from_numpy(np.ascontiguousarray(batch.pad_mask))
        keep = ~(forecast | missing | pad)
        channels = torch.cat([tokens * keep.to(dt), forecast.to(dt), missing.to(dt)], dim=-1)
        if channels.shape[-1] != self.patch_embed.in_features:
            raise ValueError(
                f"batch has {channels.shape[-1] // 3} slots per token, "
                f"model expects {self.patch_embed.in_features // 3}"
            )
        return self.patch_embed(channels)

    def forward(self, batch: PatchedBatch, train_mode: bool = False) -> MixtureParams:
        x = self.embed_patches(batch)
        positions = torch.from_numpy(np.ascontiguousarray(batch.time_indices))
        cos, sin = rotary_angles(positions, self.config.d_model // self.config.n_heads,
                                 self.config.rotary_base, self.dtype)
        vids = torch.from_numpy(np.ascontiguousarray(batch.variate_ids))
        same_variate = vids[:, :, None] == vids[:, None, :]
        key_pad = torch.from_numpy(np.ascontiguousarray(batch.token_pad_mask))
        for i, layer in enumerate(self.layers):
            x = layer(x, cos, sin, same_variate, key_pad, train_mode)
            if not torch.isfinite(x[~key_pad]).all():
                raise FloatingPointError(f"non-finite activation leaving encoder layer {i}")
        x = self.final_norm(x)
        B, N, _ = x.shape
        raw = self.head(x).view(B, N, self.config.slots_per_token, 4 * self.config.n_mixture_components)
        return MixtureParams.from_raw(raw, self.config.n_mixture_components)

    def masked_targets(self, batch: PatchedBatch) -> tuple[torch.Tensor, torch.Tensor]:
        """(targets, eval_mask) tensors in model dtype for the NLL objective."""
        targets = torch.from_numpy(np.ascontiguousarray(batch.tokens)).to(self.dtype)
        eval_mask = torch.from_numpy(np.ascontiguousarray(batch.eval_mask))
        return targets, eval_mask


def encoder_forward(model: AnyVariateEncoder, batch: PatchedBatch,
                    train_mode: bool = False) -> MixtureParams:
    """Functional alias for the module call (dropout only when train_mode)."""
    return model(batch, train_mode=train_mode)

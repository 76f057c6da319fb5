"""Seedable synthetic series generators: amplitude-modulated sinusoids and GARCH.

Every generator is a pure function of (params, seed): calling it twice with the
same arguments yields bit-identical output. All randomness flows through
``numpy.random.Generator`` instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import TimeSeriesRecord, VariateSeries

# Recursion variants for the conditional-variance update. "standard" feeds the
# previous conditional variance back in; "residual" feeds the previous squared
# innovation instead (the two coincide when mu = 0 and b = 0).
GARCH_RECURSIONS = ("standard", "residual")

WAVELET_NOISE_STD = 0.2

# Discrete pretraining grids for the wavelet parameters.
_WAVELET_A_SET = (0.1, 0.2, 0.6, 0.8)
_WAVELET_B_SET = (0.0, 5.0, 10.0)
_WAVELET_C_SET = (0.0, 0.3, 0.6, 0.9)
_WAVELET_D_SET = (0.5, 0.9)


@dataclass(frozen=True)
class WaveletParams:
    """Parameters of x_t = (d*t/T - c) * sin(a*t + b) + eps_t, eps_t ~ N(0, noise_std)."""

    a: float  # angular frequency, radians per step
    b: float  # phase, radians
    c: float  # envelope offset
    d: float  # envelope slope
    noise_std: float = WAVELET_NOISE_STD
    T: int = 32

    def __post_init__(self) -> None:
        for name in ("a", "b", "c", "d", "noise_std"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite wavelet parameter {name!r}")
        if self.T < 1:
            raise ValueError(f"series length must be >= 1, got {self.T}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass(frozen=True)
class GarchParams:
    """GARCH(1,1)-style parameters; stationarity a + b < 1 is the samplers' job."""

    mu: float = 0.0
    omega: float = 0.1
    a: float = 0.1
    b: float = 0.8
    sigma0: float = 0.3  # initial conditional standard deviation
    recursion_mode: str = "standard"

    def __post_init__(self) -> None:
        for name in ("mu", "omega", "a", "b", "sigma0"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite GARCH parameter {name!r}")
        if self.omega < 0 or self.a < 0 or self.b < 0:
            raise ValueError("omega, a, b must all be >= 0")
        if self.sigma0 <= 0:
            raise ValueError(f"sigma0 must be > 0, got {self.sigma0}")
        if self.recursion_mode not in GARCH_RECURSIONS:
            raise ValueError(
                f"recursion_mode must be one of {GARCH_RECURSIONS}, got {self.recursion_mode!r}"
            )


@dataclass
class SeriesSample:
    """One generated series plus everything needed to regenerate it."""

    values: np.ndarray
    generator_tag: str  # "wavelet" or "garch"
    params: WaveletParams | GarchParams
    seed: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("series values must be finite")


def gen_wavelet(params: WaveletParams, seed: int) -> SeriesSample:
    """Generate one wavelet series of length params.T, time index t = 0..T-1."""
    rng = np.random.default_rng(seed)
    t = np.arange(params.T, dtype=np.float64)
    clean = (params.d * t / params.T - params.c) * np.sin(params.a * t + params.b)
    noise = rng.normal(0.0, params.noise_std, size=params.T) if params.noise_std > 0 else 0.0
    return SeriesSample(clean + noise, "wavelet", params, seed)


def wavelet_mean(params: WaveletParams, t: np.ndarray) -> np.ndarray:
    """Noiseless wavelet value at (possibly fractional) time indices t."""
    t = np.asarray(t, dtype=np.float64)
    return (params.d * t / params.T - params.c) * np.sin(params.a * t + params.b)


def sample_wavelet_params(
    mode: str,
    rng: np.random.Generator,
    length: int | None = None,
    noise_std: float = WAVELET_NOISE_STD,
) -> WaveletParams:
    """Draw wavelet parameters.

    mode="discrete_pretrain" draws each of a, b, c, d uniformly from its
    finite grid; mode="continuous_prior" draws all four from Uniform(0, 1)
    (default length 32 in that mode).
    """
    if mode == "discrete_pretrain":
        return WaveletParams(
            a=float(rng.choice(_WAVELET_A_SET)),
            b=float(rng.choice(_WAVELET_B_SET)),
            c=float(rng.choice(_WAVELET_C_SET)),
            d=float(rng.choice(_WAVELET_D_SET)),
            noise_std=noise_std,
            T=128 if length is None else length,
        )
    if mode == "continuous_prior":
        a, b, c, d = rng.uniform(0.0, 1.0, size=4)
        return WaveletParams(
            a=float(a), b=float(b), c=float(c), d=float(d),
            noise_std=noise_std,
            T=32 if length is None else length,
        )
    raise ValueError(f"unknown wavelet sampling mode {mode!r}")


def gen_garch(params: GarchParams, T: int, seed: int) -> SeriesSample:
    """Generate one GARCH series of length T.

    x_t = mu + eps_t with eps_t ~ N(0, sigma_t), sigma_t a standard deviation.
    Variance recursion, with sig2 = sigma_t^2 and sig2_0 = sigma0^2:

    - standard: sig2_t = omega + a * x_{t-1}^2 + b * sig2_{t-1}
    - residual: sig2_t = omega + a * x_{t-1}^2 + b * eps_{t-1}^2
    """
    if T < 1:
        raise ValueError(f"series length must be >= 1, got {T}")
    rng = np.random.default_rng(seed)
    shocks = rng.standard_normal(T)
    x = np.empty(T, dtype=np.float64)
    sig2 = params.sigma0 ** 2
    eps_prev = 0.0
    for t in range(T):
        if t > 0:
            carry = sig2 if params.recursion_mode == "standard" else eps_prev ** 2
            sig2 = params.omega + params.a * x[t - 1] ** 2 + params.b * carry
        if sig2 <= 0 or not math.isfinite(sig2):
            raise FloatingPointError(f"conditional variance {sig2} <= 0 at step {t}")
        eps_prev = math.sqrt(sig2) * shocks[t]
        x[t] = params.mu + eps_prev
    return SeriesSample(x, "garch", params, seed)


def sample_garch_params(rng: np.random.Generator) -> GarchParams:
    """Draw GARCH parameters: mu=0, sigma0^2 = omega ~ U(0,1), a ~ U(0,1), b ~ U(0, 1-a)."""
    omega = float(rng.uniform(0.0, 1.0))
    a = float(rng.uniform(0.0, 1.0))
    b = float(rng.uniform(0.0, 1.0 - a))
    return GarchParams(mu=0.0, omega=omega, a=a, b=b, sigma0=math.sqrt(omega) if omega > 0 else 1e-6)


def gen_multivariate_wavelet(
    n_variates: int,
    correlated: bool,
    T: int,
    rng: np.random.Generator,
    noise_std: float = WAVELET_NOISE_STD,
    mode: str = "discrete_pretrain",
    base_params: WaveletParams | None = None,
    record_id: str = "mv",
) -> TimeSeriesRecord:
    """Build one multivariate record of wavelet rows.

    correlated=True: all rows share a single parameter draw and differ only by
    their additive noise. correlated=False: each row gets its own draw.
    """
    if n_variates < 2:
        raise ValueError(f"n_variates must be >= 2, got {n_variates}")
    variates = []
    shared = base_params
    if correlated and shared is None:
        shared = sample_wavelet_params(mode, rng, length=T, noise_std=noise_std)
    for j in range(n_variates):
        params = shared if correlated else sample_wavelet_params(mode, rng, length=T, noise_std=noise_std)
        sample = gen_wavelet(params, seed=int(rng.integers(0, 2**63 - 1)))
        variates.append(VariateSeries(name=f"v{j}", values=sample.values))
    return TimeSeriesRecord(id=record_id, variates=variates)


def gen_mixed_corpus(
    n_samples: int,
    frac_garch: float,
    T: int,
    rng: np.random.Generator,
    wavelet_mode: str = "discrete_pretrain",
) -> list[SeriesSample]:
    """Corpus with round(n_samples * frac_garch) GARCH series, the rest wavelet."""
    if not 0.0 <= frac_garch <= 1.0:
        raise ValueError(f"frac_garch must be in [0, 1], got {frac_garch}")
    n_garch = round(n_samples * frac_garch)
    samples = []
    for i in range(n_samples):
        seed = int(rng.integers(0, 2**63 - 1))
        if i < n_garch:
            samples.append(gen_garch(sample_garch_params(rng), T, seed))
        else:
            params = sample_wavelet_params(wavelet_mode, rng, length=T)
            samples.append(gen_wavelet(params, seed))
    return samples


def samples_to_records(samples: list[SeriesSample], id_prefix: str = "") -> list[TimeSeriesRecord]:
    """Wrap raw samples as single-variate records for the JSONL pipeline."""
    records = []
    for i, s in enumerate(samples):
        records.append(
            TimeSeriesRecord(
                id=f"{id_prefix}{s.generator_tag}-{i:06d}",
                variates=[VariateSeries(name="x", values=s.values)],
            )
        )
    return records

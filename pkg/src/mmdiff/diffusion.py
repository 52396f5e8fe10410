"""Noise schedule, forward noising, and DDPM/DDIM reverse steps.

Steps are 1-based: ``k`` runs over ``1..K`` and ``alpha_bar(0) == 1`` so the
posterior mean and the DDIM update are defined at the clean endpoint. All
functions here operate on plain numpy arrays; the denoiser is the only
differentiable piece and lives in :mod:`mmdiff.model`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .errors import ConfigError, ContractError, NonFiniteError, ShapeError
from .guidance import GuidanceWeights, combine


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step quantities, stored 0-based (index ``k-1`` holds step ``k``)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigma2: np.ndarray

    @property
    def K(self) -> int:
        return len(self.alphas)

    def alpha_bar(self, k: int) -> float:
        if k == 0:
            return 1.0
        if not 1 <= k <= self.K:
            raise ContractError(f"diffusion step {k} outside 0..{self.K}")
        return float(self.alpha_bars[k - 1])

    def sigma(self, k: int) -> float:
        return float(np.sqrt(self.sigma2[k - 1]))

    @classmethod
    def from_alpha_bars(cls, alpha_bars) -> "NoiseSchedule":
        """Build a schedule from explicit cumulative products (testing, custom schedules)."""
        ab = np.asarray(alpha_bars, dtype=np.float64)
        prev = np.concatenate([[1.0], ab[:-1]])
        alphas = ab / prev
        betas = 1.0 - alphas
        sigma2 = _posterior_variance(betas, ab)
        return cls(betas=betas, alphas=alphas, alpha_bars=ab, sigma2=sigma2)


def _posterior_variance(betas: np.ndarray, alpha_bars: np.ndarray) -> np.ndarray:
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    with np.errstate(divide="ignore", invalid="ignore"):
        s2 = betas * (1.0 - prev) / (1.0 - alpha_bars)
    s2 = np.where(np.isfinite(s2), s2, 0.0)
    s2[0] = 0.0  # noiseless final reverse step
    return s2


def make_quadratic_schedule(K: int, beta_start: float = 1e-4, beta_end: float = 0.1) -> NoiseSchedule:
    """Betas are the square of a linear ramp between the square-rooted endpoints."""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if K == 1:
        ramp = np.array([np.sqrt(beta_start)])
    else:
        frac = np.arange(K, dtype=np.float64) / (K - 1)
        ramp = np.sqrt(beta_start) + frac * (np.sqrt(beta_end) - np.sqrt(beta_start))
    betas = ramp**2
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars, sigma2=_posterior_variance(betas, alpha_bars))


def _bcast(coef, like: np.ndarray) -> np.ndarray:
    """Reshape a scalar or per-sample coefficient to broadcast against ``like``."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))


def forward_noise(y: np.ndarray, k, schedule: NoiseSchedule, eps: np.ndarray) -> np.ndarray:
    """Sample ``y_k = sqrt(ab_k) y + sqrt(1 - ab_k) eps``.

    ``k`` is an int or a per-sample integer array matching ``y``'s leading axis.
    """
    y = np.asarray(y, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if y.shape != eps.shape:
        raise ShapeError(f"forward_noise: y {y.shape} and eps {eps.shape} differ")
    ks = np.asarray(k)
    if np.any(ks < 1) or np.any(ks > schedule.K):
        raise ContractError(f"diffusion step outside 1..{schedule.K}")
    ab = _bcast(schedule.alpha_bars[ks - 1], y)
    return np.sqrt(ab) * y + np.sqrt(1.0 - ab) * eps


def posterior_mean(y_k: np.ndarray, y_hat: np.ndarray, k: int, schedule: NoiseSchedule) -> np.ndarray:
    if np.shape(y_k) != np.shape(y_hat):
        raise ShapeError(f"posterior_mean: {np.shape(y_k)} vs {np.shape(y_hat)}")
    if not 1 <= k <= schedule.K:
        raise ContractError(f"diffusion step {k} outside 1..{schedule.K}")
    ab = schedule.alpha_bar(k)
    ab_prev = schedule.alpha_bar(k - 1)
    denom = np.sqrt(ab_prev) * (1.0 - ab)
    c_state = np.sqrt(ab) * (1.0 - ab_prev) / denom
    c_pred = (ab_prev - ab) / denom
    return c_state * np.asarray(y_k) + c_pred * np.asarray(y_hat)


def standard_normal(rng, shape) -> np.ndarray:
    """Draw from one generator, or row-by-row from a list of per-sample generators."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    if len(rng) != shape[0]:
        raise ShapeError(f"{len(rng)} generators for {shape[0]} rows")
    return np.stack([g.standard_normal(shape[1:]) for g in rng]) if len(rng) else np.zeros(shape)


def ddpm_step(y_k: np.ndarray, y_hat: np.ndarray, k: int, schedule: NoiseSchedule, rng) -> np.ndarray:
    mu = posterior_mean(y_k, y_hat, k, schedule)
    sigma = schedule.sigma(k)
    if sigma == 0.0:
        return mu
    return mu + sigma * standard_normal(rng, mu.shape)


def ddim_step(y_k: np.ndarray, y_hat: np.ndarray, k: int, k_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) jump from step ``k`` to ``k_prev``."""
    if not k_prev < k:
        raise ContractError(f"ddim_step needs k_prev < k, got {k_prev} >= {k}")
    ab = schedule.alpha_bar(k)
    ab_prev = schedule.alpha_bar(k_prev)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    # at a (numerically) clean step there is no noise left to carry over
    eps_hat = np.zeros_like(y_hat) if ab >= 1.0 - _CLEAN_TOL else ddim_eps(y_k, y_hat, k, schedule)
    return np.sqrt(ab_prev) * y_hat + np.sqrt(1.0 - ab_prev) * eps_hat


_CLEAN_TOL = 1e-12


def ddim_eps(y_k, y_hat, k: int, schedule: NoiseSchedule) -> np.ndarray:
    """Noise implied by a clean-target prediction: ``(y_k - sqrt(ab) y_hat) / sqrt(1 - ab)``."""
    ab = schedule.alpha_bar(k)
    if ab >= 1.0 - _CLEAN_TOL:
        raise ContractError(f"cannot infer noise at step {k}: alpha_bar={ab} is numerically 1")
    return (np.asarray(y_k) - np.sqrt(ab) * np.asarray(y_hat)) / np.sqrt(1.0 - ab)


@dataclass(frozen=True)
class SamplerConfig:
    kind: Literal["ddpm", "ddim"] = "ddim"
    num_inference_steps: int = 50
    seed: int = 0

    def timesteps(self, K: int) -> list[int]:
        """Descending list of steps visited, ending at step 1 (DDPM) or the smallest kept step (DDIM)."""
        if self.kind == "ddpm":
            return list(range(K, 0, -1))
        if self.kind != "ddim":
            raise ConfigError(f"unknown sampler kind {self.kind!r}")
        return ddim_timesteps(K, self.num_inference_steps)[::-1]


def ddim_timesteps(K: int, n: int) -> list[int]:
    """Evenly spaced, strictly increasing subsequence of ``1..K`` of length ``n`` ending at ``K``."""
    if not 1 <= n <= K:
        raise ConfigError(f"num_inference_steps must be in 1..{K}, got {n}")
    steps = [int(round(K * i / n)) for i in range(1, n + 1)]
    return steps


# A denoiser maps (y_k, k, drop_t, drop_d) to the predicted clean target.
Denoiser = Callable[[np.ndarray, int, bool, bool], np.ndarray]


def guided_prediction(denoise: Denoiser, y_k: np.ndarray, k: int, guidance: GuidanceWeights) -> np.ndarray:
    """Run 1 + [w_t != 0] + [w_d != 0] denoiser passes and combine them."""
    full = denoise(y_k, k, False, False)
    if guidance.w_t == 0.0 and guidance.w_d == 0.0:
        return full
    no_t = denoise(y_k, k, True, False) if guidance.w_t != 0.0 else full
    no_d = denoise(y_k, k, False, True) if guidance.w_d != 0.0 else full
    return combine(full, no_t, no_d, guidance)


def sample(
    denoise: Denoiser,
    shape: tuple[int, ...],
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    guidance: GuidanceWeights,
    rng=None,
) -> np.ndarray:
    """Reverse diffusion from seeded Gaussian noise to a clean forecast.

    ``rng`` is a generator or a list of per-row generators (so a window's
    forecast does not depend on what else is in the batch). The result is on
    the model's (normalized) scale; denormalizing is the caller's job.
    """
    if rng is None:
        rng = np.random.default_rng(sampler.seed)
    y = standard_normal(rng, shape)
    steps = sampler.timesteps(schedule.K)
    for i, k in enumerate(steps):
        y_hat = guided_prediction(denoise, y, k, guidance)
        if sampler.kind == "ddpm":
            y = ddpm_step(y, y_hat, k, schedule, rng)
        else:
            k_prev = steps[i + 1] if i + 1 < len(steps) else 0
            y = ddim_step(y, y_hat, k, k_prev, schedule)
        if not np.all(np.isfinite(y)):
            raise NonFiniteError(f"non-finite sample state at diffusion step {k}")
    return y


@dataclass(frozen=True)
class DiffusionConfig:
    K: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.1
    sampler: str = "ddim"
    inference_steps: int = 50

    def __post_init__(self):
        make_quadratic_schedule(self.K, self.beta_start, self.beta_end)
        SamplerConfig(self.sampler, self.inference_steps).timesteps(self.K)

    def schedule(self) -> NoiseSchedule:
        return make_quadratic_schedule(self.K, self.beta_start, self.beta_end)

    def sampler_config(self, seed: int = 0) -> SamplerConfig:
        return SamplerConfig(self.sampler, self.inference_steps, seed)

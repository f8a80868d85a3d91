"""Measurement-initialized latent denoising.

The forward chain is the standard one (single-step factor sqrt(alpha_t)); a
measured latent X_i is identified with the chain state at step i, re-noised
up to step T', and denoised back down to i. The reverse transition
conditioned on both X_t and X_i is a Gaussian bridge whose mean/std are in
posterior_params. The denoiser is trained to make delta = eps - eps_theta(.)
have zero mean and std sqrt(2) (delta ~ N(0, 2I) when eps_theta outputs an
independent standard normal).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, NumericError, TrainingDivergedError, ValidationError

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule. Arrays are indexed 1..T; alpha_bar[0] = 1."""

    t_total: int  # T
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_reverse: int = 100  # T', where the reverse pass starts
    i_range: tuple[int, int] = (27, 32)
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError("require 0 < beta_start <= beta_end < 1")
        if not (1 <= self.i_range[0] <= self.i_range[1] <= self.t_reverse <= self.t_total):
            raise ConfigError("require 1 <= i_lo <= i_hi <= T' <= T")
        betas = np.zeros(self.t_total + 1)
        betas[1:] = np.linspace(self.beta_start, self.beta_end, self.t_total)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        alpha_bars[0] = 1.0
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def gamma_prime(self, i: int) -> float:
        """Assumed measurement signal fraction: gamma' = alpha_bar_i."""
        return float(self.alpha_bars[i])


def build_schedule(
    t_total: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    t_reverse: int = 100,
    i_range: tuple[int, int] = (27, 32),
) -> NoiseSchedule:
    return NoiseSchedule(t_total, beta_start, beta_end, t_reverse, i_range)


def perturb(x_i, i: int, t: int, eps, schedule: NoiseSchedule):
    """Re-noise a step-i latent up to step t:
    X_t = sqrt(ab_t/ab_i) X_i + sqrt(1 - ab_t/ab_i) eps. Requires i <= t."""
    if t < i:
        raise ValidationError(f"perturb requires t >= i, got t={t}, i={i}")
    ratio = schedule.alpha_bars[t] / schedule.alpha_bars[i]
    return math.sqrt(ratio) * x_i + math.sqrt(1.0 - ratio) * eps


def posterior_params(x_t, x_i, t: int, i: int, schedule: NoiseSchedule):
    """Mean and std of the bridge transition q(X_{t-1} | X_t, X_i).

    mean = beta_hat_t (ab_i - ab_{t-1}) / (ab_i - ab_t)
           * (sqrt(a_t)/beta_hat_t * X_t + sqrt(ab_i ab_{t-1})/(ab_i - ab_{t-1}) * X_i)
    std  = sqrt(beta_hat_t (ab_i - ab_{t-1}) / (ab_i - ab_t))
    Coefficients are computed in cancelled form so t-1 = i (std = 0) is exact.
    """
    if t <= i:
        raise ValidationError(f"posterior requires t > i, got t={t}, i={i}")
    ab = schedule.alpha_bars
    a_t = schedule.alphas[t]
    beta_hat = 1.0 - a_t
    denom = ab[i] - ab[t]
    coef_t = math.sqrt(a_t) * (ab[i] - ab[t - 1]) / denom
    coef_i = beta_hat * math.sqrt(ab[i] * ab[t - 1]) / denom
    var = beta_hat * (ab[i] - ab[t - 1]) / denom
    return coef_t * x_t + coef_i * x_i, math.sqrt(max(var, 0.0))


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
        )
        ang = t.float()[:, None] * freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.time_proj = nn.Linear(width, width)
        self.net = nn.Sequential(
            nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width)
        )
        self.norm = nn.LayerNorm(width)

    def forward(self, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        return h + self.net(self.norm(h) + self.time_proj(temb))


class Denoiser(nn.Module):
    """eps_theta: residual MLP over the flattened latent with sinusoidal
    timestep embeddings added per block."""

    def __init__(self, latent_dim: int, width: int = 256, blocks: int = 4):
        super().__init__()
        self.latent_dim = latent_dim
        self.time_embed = SinusoidalTimeEmbedding(width)
        self.input_proj = nn.Linear(latent_dim, width)
        self.blocks = nn.ModuleList(ResidualBlock(width) for _ in range(blocks))
        self.output_proj = nn.Linear(width, latent_dim)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if isinstance(t, int):
            t = torch.full((x.shape[0],), t)
        temb = self.time_embed(t).to(x.dtype)
        h = self.input_proj(x)
        for block in self.blocks:
            h = block(h, temb)
        return self.output_proj(h)


@dataclass(frozen=True)
class LatentWhitener:
    """Frozen per-channel statistics fit on stage-1 training latents."""

    mean: np.ndarray
    std: np.ndarray

    @staticmethod
    def fit(latents: np.ndarray) -> "LatentWhitener":
        flat = latents.reshape(-1, latents.shape[-1])
        return LatentWhitener(flat.mean(axis=0), flat.std(axis=0) + 1e-8)

    def whiten(self, x):
        if isinstance(x, torch.Tensor):
            mean = torch.from_numpy(self.mean).to(x.dtype)
            std = torch.from_numpy(self.std).to(x.dtype)
            return (x - mean) / std
        return (x - self.mean) / self.std

    def unwhiten(self, x):
        if isinstance(x, torch.Tensor):
            mean = torch.from_numpy(self.mean).to(x.dtype)
            std = torch.from_numpy(self.std).to(x.dtype)
            return x * std + mean
        return x * self.std + self.mean


def denoiser_loss(
    x_i: torch.Tensor,
    schedule: NoiseSchedule,
    model: Denoiser,
    rng: torch.Generator,
) -> torch.Tensor:
    """Moment-matching denoiser objective, averaged over the batch.

    Per item: i ~ U{i_lo..i_hi}, t ~ U{i..T}, eps ~ N(0, I);
    delta = eps - eps_theta(perturb(X_i, i, t, eps), t);
    loss = (mean delta)^2 + (std delta - sqrt(2))^2,
    with the mean/std taken over the item's elements (scale-normalized form
    of || sum delta ||^2).
    """
    b = x_i.shape[0]
    i_lo, i_hi = schedule.i_range
    i = torch.randint(i_lo, i_hi + 1, (b,), generator=rng)
    t = torch.stack(
        [torch.randint(int(iv), schedule.t_total + 1, (1,), generator=rng)[0] for iv in i]
    )
    eps = torch.randn(x_i.shape, generator=rng, dtype=x_i.dtype)
    ab = torch.from_numpy(schedule.alpha_bars).to(x_i.dtype)
    ratio = (ab[t] / ab[i])[:, None]
    x_t = torch.sqrt(ratio) * x_i + torch.sqrt(1.0 - ratio) * eps
    delta = eps - model(x_t, t)
    term1 = delta.mean(dim=-1) ** 2
    term2 = (delta.std(dim=-1, unbiased=False) - SQRT2) ** 2
    loss = (term1 + term2).mean()
    if not torch.isfinite(loss):
        raise NumericError("non-finite denoiser loss")
    return loss


def delta_moment_loss(delta: torch.Tensor) -> torch.Tensor:
    """The loss evaluated on a precomputed delta (single item). Exposed for
    the closed-form checks: delta = 0 gives 2; mean 0 / std sqrt(2) gives 0."""
    return delta.mean() ** 2 + (delta.std(unbiased=False) - SQRT2) ** 2


def initialize_reverse(x_i: torch.Tensor, i, schedule: NoiseSchedule, eps: torch.Tensor):
    """Algorithm start: X_{T'} = sqrt(ab_{T'}/ab_i) X_i + sqrt(1-ab_{T'}/ab_i) eps."""
    ab = schedule.alpha_bars
    if isinstance(i, int):
        ratio = ab[schedule.t_reverse] / ab[i]
        return math.sqrt(ratio) * x_i + math.sqrt(1.0 - ratio) * eps
    ratio = torch.from_numpy(ab[schedule.t_reverse] / ab[np.asarray(i)]).to(x_i.dtype)
    while ratio.dim() < x_i.dim():
        ratio = ratio[..., None]
    return torch.sqrt(ratio) * x_i + torch.sqrt(1.0 - ratio) * eps


def reverse_sample(
    x_i: torch.Tensor,
    i: int,
    schedule: NoiseSchedule,
    model: Denoiser,
    rng: torch.Generator,
    n_samples: int,
    model_fn=None,
) -> torch.Tensor:
    """Draw n_samples reconstructions of the measured latent (whitened space).

    Re-noises X_i up to T' and runs the bridge reverse loop t = T', ..., i+1;
    the final transition (t-1 = i) has sigma_t = 0 so its noise term vanishes.
    `model_fn(x, t)` overrides the denoiser (used by the oracle tests).
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    fn = model_fn if model_fn is not None else model
    ab = schedule.alpha_bars
    x = x_i.detach()[None].expand(n_samples, *x_i.shape).reshape(n_samples, -1).clone()
    eps = torch.randn(x.shape, generator=rng, dtype=x.dtype)
    x = initialize_reverse(x, i, schedule, eps)
    for t in range(schedule.t_reverse, i, -1):
        a_t = schedule.alphas[t]
        coef = (1.0 - a_t) * math.sqrt(ab[i]) / math.sqrt(ab[i] - ab[t])
        sigma = math.sqrt(
            max((1.0 - a_t) * (ab[i] - ab[t - 1]) / (ab[i] - ab[t]), 0.0)
        )
        eps_hat = fn(x, torch.full((n_samples,), t))
        x = (x - coef * eps_hat) / math.sqrt(a_t)
        if t > i + 1:  # last transition pins to X_i deterministically
            x = x + sigma * torch.randn(x.shape, generator=rng, dtype=x.dtype)
        if not torch.all(torch.isfinite(x)):
            raise NumericError(f"non-finite reverse sample at step t={t}")
    return x.reshape(n_samples, *x_i.shape)


def train_denoiser(
    latents: torch.Tensor,
    schedule: NoiseSchedule,
    settings,
    width: int = 256,
    blocks: int = 4,
) -> tuple[Denoiser, list[dict]]:
    """Fit eps_theta on a set of whitened latents (N, latent_dim)."""
    torch.manual_seed(settings.seed)
    model = Denoiser(latents.shape[-1], width=width, blocks=blocks)
    opt = torch.optim.AdamW(
        model.parameters(), lr=settings.lr, weight_decay=settings.weight_decay
    )
    gen = torch.Generator().manual_seed(settings.seed)
    n = latents.shape[0]
    log = []
    for epoch in range(settings.epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for s in range(0, n, settings.batch_size):
            idx = perm[s : s + settings.batch_size]
            loss = denoiser_loss(latents[idx], schedule, model, gen)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    "denoiser loss diverged", {"epoch": epoch, "loss": loss.detach().item()}
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.detach().item() * len(idx)
        log.append({"epoch": epoch, "loss": total / n})
    model.eval()
    return model, log

"""DDPM beta schedules plus the forward-noising / reverse-denoising arithmetic.

The schedule tables are built once in float64 and cast down only where they
meet the data, so float32 pipelines still see full-precision coefficients.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, DomainError

SCHEDULE_KINDS = ("squaredcos_cap_v2", "linear")

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
COSINE_BETA_CAP = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed diffusion tables. Immutable; safe to share across threads."""

    kind: str
    num_timesteps: int
    betas: torch.Tensor        # float64, shape [T]
    alphas: torch.Tensor       # float64, 1 - betas
    alpha_bars: torch.Tensor   # float64, cumulative products of alphas
    clip_sample: bool = True

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars"):
            t = getattr(self, name)
            if t.shape != (self.num_timesteps,) or t.dtype != torch.float64:
                raise ConfigurationError(f"schedule table {name} must be float64[{self.num_timesteps}]")

    def check_timestep(self, t) -> None:
        t = torch.as_tensor(t)
        if t.numel() == 0 or (t < 0).any() or (t >= self.num_timesteps).any():
            raise DomainError(f"timestep out of range [0, {self.num_timesteps})")


def _cosine_f(u: float) -> float:
    return math.cos((u + 0.008) / 1.008 * math.pi / 2) ** 2


def build_schedule(
    kind: str,
    num_timesteps: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    clip_sample: bool = True,
) -> NoiseSchedule:
    """Build a noise schedule.

    ``linear`` interpolates betas from ``beta_start`` to ``beta_end``.
    ``squaredcos_cap_v2`` derives betas from the squared-cosine signal curve,
    capped at 0.999; beta_start/beta_end are accepted but ignored for that
    kind (a warning is emitted when they differ from the defaults).
    """
    if kind not in SCHEDULE_KINDS:
        raise ConfigurationError(f"unknown schedule kind: {kind!r} (expected one of {SCHEDULE_KINDS})")
    if num_timesteps < 1:
        raise DomainError("num_timesteps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DomainError("need 0 < beta_start <= beta_end < 1")

    if kind == "linear":
        if num_timesteps == 1:
            # Degenerate single-step schedule: the lone beta is beta_start.
            betas = torch.tensor([beta_start], dtype=torch.float64)
        else:
            betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
    else:
        if beta_start != DEFAULT_BETA_START or beta_end != DEFAULT_BETA_END:
            warnings.warn(
                "beta_start/beta_end are ignored by the squaredcos_cap_v2 schedule",
                stacklevel=2,
            )
        vals = []
        for i in range(num_timesteps):
            vals.append(min(1.0 - _cosine_f((i + 1) / num_timesteps) / _cosine_f(i / num_timesteps), COSINE_BETA_CAP))
        betas = torch.tensor(vals, dtype=torch.float64)

    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(
        kind=kind,
        num_timesteps=num_timesteps,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        clip_sample=clip_sample,
    )


def _gather(table: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
    """Pick table[t] and shape it to broadcast over ``like``.

    ``t`` may be a python int or an integer tensor whose shape matches the
    leading (batch) dimension of ``like``.
    """
    t = torch.as_tensor(t, dtype=torch.long)
    coef = table[t].to(like.dtype)
    if coef.ndim == 0:
        return coef
    return coef.reshape(-1, *([1] * (like.ndim - 1)))


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Forward process: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    if x0.shape != eps.shape:
        raise DomainError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    sched.check_timestep(t)
    abar = _gather(sched.alpha_bars, t, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def reconstruct_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process for a given noise estimate (no clipping)."""
    if x_t.shape != eps_hat.shape:
        raise DomainError(f"x_t shape {tuple(x_t.shape)} != eps_hat shape {tuple(eps_hat.shape)}")
    sched.check_timestep(t)
    abar = _gather(sched.alpha_bars, t, x_t)
    return (x_t - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)


def denoise_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    rng: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One reverse step t -> t-1 with the fixed-small posterior variance.

    Reconstructs x0_hat (clamped to [-1, 1] when the schedule clips samples),
    forms the posterior mean, and adds Gaussian noise with variance
    beta_t * (1 - abar_{t-1}) / (1 - abar_t); the t=0 step is deterministic
    (abar_{-1} is defined as 1). Callers may pass pre-drawn unit ``noise``
    (e.g. stacked per-episode draws) instead of an RNG.
    """
    if not isinstance(t, int):
        t = int(t)
    sched.check_timestep(t)

    x0_hat = reconstruct_x0(x_t, eps_hat, t, sched)
    if sched.clip_sample:
        x0_hat = x0_hat.clamp(-1.0, 1.0)

    abar_t = float(sched.alpha_bars[t])
    abar_prev = float(sched.alpha_bars[t - 1]) if t > 0 else 1.0
    beta_t = float(sched.betas[t])
    alpha_t = float(sched.alphas[t])

    # DDPM posterior q(x_{t-1} | x_t, x0).
    coef_x0 = math.sqrt(abar_prev) * beta_t / (1.0 - abar_t)
    coef_xt = math.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t)
    mean = coef_x0 * x0_hat + coef_xt * x_t

    if t == 0:
        return mean
    var = beta_t * (1.0 - abar_prev) / (1.0 - abar_t)
    if noise is None:
        noise = torch.empty_like(x_t).normal_(generator=rng)
    return mean + math.sqrt(var) * noise

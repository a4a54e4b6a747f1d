"""FiLM-conditioned temporal 1-D U-Net used as the action denoiser.

The network maps (noisy action trajectory, diffusion timestep, global
observation embedding) to a noise estimate of the same shape as the
trajectory. Parameters live in the module's ``state_dict``; the dotted
module path of each tensor is the canonical parameter name used by
checkpoints and weight archives.

Structure (for ``down_dims = [c0, c1, c2]``, horizon H):

    in [B, Da, H]
      down level 0: res(Da->c0), res(c0->c0)        -> skip0, stride-2 conv
      down level 1: res(c0->c1), res(c1->c1)        -> skip1, stride-2 conv
      down level 2: res(c1->c2), res(c2->c2)
      mid:          res(c2->c2), res(c2->c2)
      up   level 1: nearest x2 + conv, cat skip1, res(c2+c1->c1), res(c1->c1)
      up   level 0: nearest x2 + conv, cat skip0, res(c1+c0->c0), res(c0->c0)
      head:         conv block(c0->c0), 1x1 conv(c0->Da), zero-initialised

Every residual block applies FiLM driven by concat(timestep features,
global conditioning). There is no dropout and no batch statistics, so the
forward pass is a pure function of (params, inputs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, DomainError

STEP_MLP_WIDTH_FACTOR = 4  # 64 -> 256 -> 256 for the default embed dim


def sinusoidal_embed(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal position embedding: half sines then half cosines.

    Frequencies are geometrically spaced from 1 down to 1/10000. ``t`` may be
    a scalar or a 1-D tensor; the output appends a trailing ``dim`` axis.
    """
    if dim % 2 != 0:
        raise ConfigurationError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t)
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=t.dtype)
    else:
        exponent = -math.log(10000.0) / (half - 1)
        freqs = torch.exp(exponent * torch.arange(half, dtype=t.dtype))
    args = t.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def film_modulate(features: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Per-channel affine modulation: out[c, :] = scale[c] * features[c, :] + bias[c].

    Accepts [C, L] features with [C] parameters or [B, C, L] with [B, C].
    """
    if scale.shape != bias.shape:
        raise DomainError(f"scale shape {tuple(scale.shape)} != bias shape {tuple(bias.shape)}")
    if features.ndim not in (2, 3) or features.shape[:-1] != scale.shape:
        raise DomainError(
            f"features {tuple(features.shape)} incompatible with modulation {tuple(scale.shape)}"
        )
    return scale.unsqueeze(-1) * features + bias.unsqueeze(-1)


@dataclass(frozen=True)
class DenoiserConfig:
    """Shape plan for the denoiser. Parameter count is a pure function of this."""

    action_dim: int
    cond_dim: int = 0               # width of the global observation embedding (0 = unconditional)
    horizon: int = 16
    down_dims: tuple[int, ...] = (128, 256, 512)
    kernel_size: int = 5
    n_groups: int = 8
    step_embed_dim: int = 64
    cond_predict_scale: bool = True

    def __post_init__(self):
        if self.action_dim < 1:
            raise ConfigurationError("action_dim must be >= 1")
        if self.cond_dim < 0:
            raise ConfigurationError("cond_dim must be >= 0")
        if len(self.down_dims) < 1:
            raise ConfigurationError("down_dims must be non-empty")
        for d in self.down_dims:
            if d % self.n_groups != 0:
                raise ConfigurationError(f"down dim {d} not divisible by n_groups={self.n_groups}")
        if self.kernel_size % 2 != 1:
            raise ConfigurationError("kernel_size must be odd for symmetric same-padding")
        if self.step_embed_dim % 2 != 0:
            raise ConfigurationError("step_embed_dim must be even")
        stride = 2 ** (len(self.down_dims) - 1)
        if self.horizon % stride != 0:
            raise ConfigurationError(f"horizon {self.horizon} not divisible by {stride}")

    @property
    def step_feature_dim(self) -> int:
        return STEP_MLP_WIDTH_FACTOR * self.step_embed_dim

    @property
    def film_cond_dim(self) -> int:
        return self.step_feature_dim + self.cond_dim


class Conv1dBlock(nn.Module):
    """Conv1d (same padding) -> GroupNorm -> Mish."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, n_groups: int):
        super().__init__()
        self.conv = nn.Conv1d(in_ch, out_ch, kernel_size, padding=kernel_size // 2)
        self.norm = nn.GroupNorm(n_groups, out_ch)
        self.act = nn.Mish()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class FiLMResBlock(nn.Module):
    """Two conv blocks with one FiLM modulation between them plus a residual path."""

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, kernel_size: int,
                 n_groups: int, cond_predict_scale: bool):
        super().__init__()
        self.cond_predict_scale = cond_predict_scale
        self.out_channels = out_ch
        self.block1 = Conv1dBlock(in_ch, out_ch, kernel_size, n_groups)
        self.block2 = Conv1dBlock(out_ch, out_ch, kernel_size, n_groups)
        n_cond_out = 2 * out_ch if cond_predict_scale else out_ch
        self.cond_proj = nn.Sequential(nn.Mish(), nn.Linear(cond_dim, n_cond_out))
        self.residual = nn.Conv1d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, cond):
        h = self.block1(x)
        params = self.cond_proj(cond)
        if self.cond_predict_scale:
            scale, bias = params.chunk(2, dim=-1)
        else:
            scale, bias = torch.ones_like(params), params
        h = film_modulate(h, scale, bias)
        h = self.block2(h)
        return h + self.residual(x)


class Downsample1d(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv1d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample1d(nn.Module):
    """Nearest-neighbour x2 followed by a smoothing conv; deterministic on CPU."""

    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv1d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(torch.repeat_interleave(x, 2, dim=-1))


class ConditionalUnet1d(nn.Module):
    """The denoiser network. See module docstring for the block layout."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        dims = cfg.down_dims
        cd = cfg.film_cond_dim
        mk = lambda i, o: FiLMResBlock(i, o, cd, cfg.kernel_size, cfg.n_groups, cfg.cond_predict_scale)

        self.step_mlp = nn.Sequential(
            nn.Linear(cfg.step_embed_dim, cfg.step_feature_dim),
            nn.Mish(),
            nn.Linear(cfg.step_feature_dim, cfg.step_feature_dim),
        )

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        in_ch = cfg.action_dim
        for level, out_ch in enumerate(dims):
            self.down_blocks.append(nn.ModuleList([mk(in_ch, out_ch), mk(out_ch, out_ch)]))
            if level < len(dims) - 1:
                self.downsamples.append(Downsample1d(out_ch))
            in_ch = out_ch

        self.mid_blocks = nn.ModuleList([mk(dims[-1], dims[-1]), mk(dims[-1], dims[-1])])

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(len(dims) - 1)):
            skip_ch, up_ch = dims[level], dims[level + 1]
            self.upsamples.append(Upsample1d(up_ch))
            self.up_blocks.append(nn.ModuleList([mk(up_ch + skip_ch, skip_ch), mk(skip_ch, skip_ch)]))

        self.head_block = Conv1dBlock(dims[0], dims[0], cfg.kernel_size, cfg.n_groups)
        self.head_proj = nn.Conv1d(dims[0], cfg.action_dim, 1)
        # Zero head: a freshly built denoiser predicts zero noise, which keeps
        # the first training steps well-scaled.
        nn.init.zeros_(self.head_proj.weight)
        nn.init.zeros_(self.head_proj.bias)

    def forward(self, noisy_actions: torch.Tensor, t, global_cond: torch.Tensor | None = None) -> torch.Tensor:
        cfg = self.cfg
        if noisy_actions.ndim != 3 or noisy_actions.shape[1:] != (cfg.horizon, cfg.action_dim):
            raise DomainError(
                f"expected actions [B, {cfg.horizon}, {cfg.action_dim}], got {tuple(noisy_actions.shape)}"
            )
        if not torch.isfinite(noisy_actions).all():
            raise DomainError("non-finite values in noisy_actions")
        batch = noisy_actions.shape[0]

        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(batch)
        if t.shape != (batch,):
            raise DomainError(f"timestep batch shape {tuple(t.shape)} != ({batch},)")
        step_feat = self.step_mlp(sinusoidal_embed(t.to(noisy_actions.dtype), cfg.step_embed_dim))

        if cfg.cond_dim == 0:
            cond = step_feat
            if global_cond is not None and global_cond.numel() > 0:
                raise DomainError("model is unconditional but global_cond was given")
        else:
            if global_cond is None or global_cond.shape != (batch, cfg.cond_dim):
                got = None if global_cond is None else tuple(global_cond.shape)
                raise DomainError(f"expected global_cond [{batch}, {cfg.cond_dim}], got {got}")
            if not torch.isfinite(global_cond).all():
                raise DomainError("non-finite values in global_cond")
            cond = torch.cat([step_feat, global_cond], dim=-1)

        x = noisy_actions.transpose(1, 2)  # [B, Da, H]
        skips = []
        for level, (res1, res2) in enumerate(self.down_blocks):
            x = res2(res1(x, cond), cond)
            if level < len(self.down_blocks) - 1:
                skips.append(x)
                x = self.downsamples[level](x)
        for res in self.mid_blocks:
            x = res(x, cond)
        for i, (res1, res2) in enumerate(self.up_blocks):
            x = self.upsamples[i](x)
            x = torch.cat([x, skips.pop()], dim=1)
            x = res2(res1(x, cond), cond)
        x = self.head_proj(self.head_block(x))
        return x.transpose(1, 2)


def unet_forward(noisy_actions, t, global_cond, params: dict, cfg: DenoiserConfig) -> torch.Tensor:
    """Functional entry point: run the denoiser under an explicit parameter set."""
    model = ConditionalUnet1d(cfg)
    model.load_state_dict(params)
    return model(noisy_actions, t, global_cond)


def param_count(cfg: DenoiserConfig) -> int:
    """Total scalar parameter count implied by a config."""
    return sum(p.numel() for p in ConditionalUnet1d(cfg).parameters())

"""Observation encoding: frame preprocessing, encoder families, training regimes.

Each camera stream gets its own encoder (no weight sharing). Encoders contain
no batch statistics anywhere: the CNN family normalizes with GroupNorm and the
ViT family with LayerNorm, so parameter averaging (EMA) stays well-behaved.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .archive import load_archive, save_archive
from .errors import ArchiveError, ConfigurationError, DomainError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

ENCODER_FAMILIES = ("resnet_style_cnn", "vit_patch16")
REGIMES = ("scratch", "frozen", "finetune")

WEIGHTS_FORMAT_VERSION = "ckpt-v1"


@dataclass
class ObservationWindow:
    """The last n_obs_steps of raw observations for one environment.

    frames: float tensor [n_obs, n_cameras, 3, H, W] with values in [0, 1]
    lowdim: float tensor [n_obs, Dl]
    """

    frames: torch.Tensor
    lowdim: torch.Tensor

    def __post_init__(self):
        if self.frames.ndim != 5 or self.frames.shape[2] != 3:
            raise DomainError(f"frames must be [n_obs, n_cam, 3, H, W], got {tuple(self.frames.shape)}")
        if self.lowdim.ndim != 2 or self.lowdim.shape[0] != self.frames.shape[0]:
            raise DomainError("lowdim must be [n_obs, Dl] with the same n_obs as frames")
        if float(self.frames.min()) < 0.0 or float(self.frames.max()) > 1.0:
            raise DomainError("frame values must lie in [0, 1]")

    @property
    def n_obs_steps(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class EncoderRegime:
    """How encoder weights participate in training."""

    kind: str
    source: str | None = None  # weight archive for frozen/finetune

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.kind!r} (expected one of {REGIMES})")
        if self.kind == "scratch" and self.source is not None:
            raise ConfigurationError("scratch regime must not name a pretrained source")
        if self.kind in ("frozen", "finetune") and self.source is None:
            raise ConfigurationError(f"{self.kind} regime requires a pretrained source archive")


def preprocess_frames(frames: torch.Tensor, mode: str, rng: torch.Generator | None = None,
                      crop_size: int = 76, imagenet_norm: bool = True) -> torch.Tensor:
    """Crop to ``crop_size`` and standardize channels.

    ``train`` mode takes an independent uniform random crop per frame (driven
    by ``rng``); ``eval`` mode takes the deterministic center crop. Input is
    [..., 3, H, W] in [0, 1].
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown preprocessing mode {mode!r}")
    if frames.ndim < 3 or frames.shape[-3] != 3:
        raise DomainError(f"expected [..., 3, H, W] frames, got {tuple(frames.shape)}")
    h, w = frames.shape[-2], frames.shape[-1]
    if h < crop_size or w < crop_size:
        raise DomainError(f"input {h}x{w} smaller than crop {crop_size}x{crop_size}")

    lead = frames.shape[:-3]
    flat = frames.reshape(-1, 3, h, w)
    n = flat.shape[0]
    if mode == "eval":
        oy0, ox0 = (h - crop_size) // 2, (w - crop_size) // 2
        out = flat[:, :, oy0: oy0 + crop_size, ox0: ox0 + crop_size].clone()
    else:
        oy = torch.randint(0, h - crop_size + 1, (n,), generator=rng)
        ox = torch.randint(0, w - crop_size + 1, (n,), generator=rng)
        out = torch.empty((n, 3, crop_size, crop_size), dtype=flat.dtype)
        for i in range(n):
            out[i] = flat[i, :, oy[i]: oy[i] + crop_size, ox[i]: ox[i] + crop_size]

    if imagenet_norm:
        mean = torch.tensor(IMAGENET_MEAN, dtype=out.dtype).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD, dtype=out.dtype).view(1, 3, 1, 1)
        out = (out - mean) / std
    return out.reshape(*lead, 3, crop_size, crop_size)


def _gn(channels: int, ch_per_group: int = 16) -> nn.GroupNorm:
    return nn.GroupNorm(max(1, channels // ch_per_group), channels)


class _ResBlock2d(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1, ch_per_group=16):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = _gn(out_ch, ch_per_group)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _gn(out_ch, ch_per_group)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.skip(x))


class ResNetStyleCnn(nn.Module):
    """Residual CNN over cropped frames; GroupNorm throughout, no batch stats.

    The default is a small 8-block net (two blocks per stage); ResNet-18-like
    capacity is reachable by widening ``stage_channels``.
    """

    family = "resnet_style_cnn"

    def __init__(self, feature_dim: int = 64, stage_channels=(16, 32, 64, 128),
                 blocks_per_stage=(2, 2, 2, 2), ch_per_group: int = 16):
        super().__init__()
        if len(stage_channels) != len(blocks_per_stage):
            raise ConfigurationError("stage_channels and blocks_per_stage must have equal length")
        self.feature_dim = feature_dim
        self.stem = nn.Sequential(
            nn.Conv2d(3, stage_channels[0], 5, stride=2, padding=2),
            _gn(stage_channels[0], ch_per_group),
            nn.ReLU(),
        )
        stages = []
        in_ch = stage_channels[0]
        for si, (ch, nblocks) in enumerate(zip(stage_channels, blocks_per_stage)):
            for bi in range(nblocks):
                stride = 2 if (si > 0 and bi == 0) else 1
                stages.append(_ResBlock2d(in_ch, ch, stride=stride, ch_per_group=ch_per_group))
                in_ch = ch
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(in_ch, feature_dim)

    def forward(self, x):
        h = self.stages(self.stem(x))
        h = h.mean(dim=(-2, -1))
        return self.head(h)


class _TransformerBlock(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class VitPatch16(nn.Module):
    """Patch-16 transformer encoder with CLS pooling.

    Inputs whose spatial size differs from ``input_size`` are resized first
    (cropped 76x76 frames are not patch-divisible, so they go through 80x80).
    """

    family = "vit_patch16"

    def __init__(self, feature_dim: int = 64, width: int = 128, depth: int = 4,
                 heads: int = 4, patch_size: int = 16, input_size: int = 80):
        super().__init__()
        if input_size % patch_size != 0:
            raise ConfigurationError(f"input_size {input_size} not divisible by patch {patch_size}")
        self.feature_dim = feature_dim
        self.input_size = input_size
        n_patches = (input_size // patch_size) ** 2
        self.patch_embed = nn.Conv2d(3, width, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, width))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, width))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.Sequential(*[_TransformerBlock(width, heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, feature_dim)

    def forward(self, x):
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            x = F.interpolate(x, size=(self.input_size, self.input_size),
                              mode="bilinear", align_corners=False)
        h = self.patch_embed(x).flatten(2).transpose(1, 2)  # [B, P, W]
        cls = self.cls_token.expand(h.shape[0], -1, -1)
        h = torch.cat([cls, h], dim=1) + self.pos_embed
        h = self.norm(self.blocks(h))
        return self.head(h[:, 0])


def build_encoder(family: str, feature_dim: int, **kwargs) -> nn.Module:
    if family == "resnet_style_cnn":
        return ResNetStyleCnn(feature_dim=feature_dim, **kwargs)
    if family == "vit_patch16":
        return VitPatch16(feature_dim=feature_dim, **kwargs)
    raise ConfigurationError(f"unknown encoder family {family!r} (expected one of {ENCODER_FAMILIES})")


class ObservationEncoder(nn.Module):
    """Per-camera encoders plus lowdim passthrough, flattened over n_obs_steps.

    The conditioning layout per timestep is [cam_0 features, ..., cam_{K-1}
    features, lowdim], and timesteps are concatenated oldest-first.
    """

    def __init__(self, family: str, feature_dim: int, n_cameras: int,
                 lowdim_dim: int, n_obs_steps: int, encoder_kwargs: dict | None = None):
        super().__init__()
        self.family = family
        self.feature_dim = feature_dim
        self.n_cameras = n_cameras
        self.lowdim_dim = lowdim_dim
        self.n_obs_steps = n_obs_steps
        kwargs = encoder_kwargs or {}
        self.cameras = nn.ModuleList(
            [build_encoder(family, feature_dim, **kwargs) for _ in range(n_cameras)]
        )

    @property
    def cond_dim(self) -> int:
        return self.n_obs_steps * (self.n_cameras * self.feature_dim + self.lowdim_dim)

    def forward(self, frames: torch.Tensor, lowdim: torch.Tensor) -> torch.Tensor:
        """frames: preprocessed [B, n_obs, n_cam, 3, h, w]; lowdim: [B, n_obs, Dl]."""
        if frames.ndim != 6 or frames.shape[1] != self.n_obs_steps or frames.shape[2] != self.n_cameras:
            raise ConfigurationError(
                f"expected frames [B, {self.n_obs_steps}, {self.n_cameras}, 3, h, w], got {tuple(frames.shape)}"
            )
        if lowdim.shape != (frames.shape[0], self.n_obs_steps, self.lowdim_dim):
            raise DomainError(f"lowdim shape {tuple(lowdim.shape)} inconsistent with frames")
        b, t = frames.shape[0], self.n_obs_steps
        feats = []
        for ci, enc in enumerate(self.cameras):
            flat = frames[:, :, ci].reshape(b * t, *frames.shape[3:])
            feats.append(enc(flat).reshape(b, t, self.feature_dim))
        per_step = torch.cat(feats + [lowdim], dim=-1)  # [B, T, n_cam*F + Dl]
        return per_step.reshape(b, -1)


def encode_window(window: ObservationWindow, encoder: ObservationEncoder,
                  mode: str = "eval", rng: torch.Generator | None = None,
                  crop_size: int = 76, imagenet_norm: bool = True) -> torch.Tensor:
    """Encode a single observation window into the global conditioning vector."""
    frames = preprocess_frames(window.frames.unsqueeze(0), mode, rng,
                               crop_size=crop_size, imagenet_norm=imagenet_norm)
    return encoder(frames, window.lowdim.unsqueeze(0)).squeeze(0)


def apply_regime(encoder: nn.Module, regime: EncoderRegime) -> dict:
    """Set encoder-tensor trainability for a regime; returns the name->trainable mask."""
    trainable = regime.kind != "frozen"
    mask = {}
    for name, p in encoder.named_parameters():
        p.requires_grad_(trainable)
        mask[name] = trainable
    return mask


def save_encoder_weights(encoder: nn.Module, path, meta: dict | None = None) -> None:
    save_archive(path, dict(encoder.state_dict()), meta=dict(meta or {}),
                 format_version=WEIGHTS_FORMAT_VERSION)


def load_pretrained(encoder: nn.Module, path) -> list[str]:
    """Load an encoder weight archive by name.

    Archive names must cover every encoder tensor; surplus names (e.g. a
    pretext decoder head) are ignored with a warning. Returns the surplus
    name list.
    """
    tensors, _meta, _version = load_archive(path, expected_version=WEIGHTS_FORMAT_VERSION)
    state = encoder.state_dict()
    missing = sorted(set(state) - set(tensors))
    if missing:
        raise ArchiveError(f"weight archive {path} is missing tensors: {', '.join(missing)}")
    for name, target in state.items():
        src = tensors[name]
        if tuple(src.shape) != tuple(target.shape):
            raise ArchiveError(
                f"weight archive {path}: tensor {name!r} has shape {tuple(src.shape)}, "
                f"expected {tuple(target.shape)}"
            )
    encoder.load_state_dict({k: tensors[k].to(state[k].dtype) for k in state})
    surplus = sorted(set(tensors) - set(state))
    if surplus:
        warnings.warn(f"weight archive {path} has {len(surplus)} unused tensors", stacklevel=2)
    return surplus


class _PretextDecoder(nn.Module):
    """Small upsampling decoder used only to pretrain encoders by autoencoding."""

    def __init__(self, feature_dim: int, out_size: int, base_ch: int = 32):
        super().__init__()
        self.base = out_size // 4
        self.base_ch = base_ch
        self.out_size = out_size
        self.fc = nn.Linear(feature_dim, base_ch * self.base * self.base)
        self.conv1 = nn.Conv2d(base_ch, base_ch, 3, padding=1)
        self.norm1 = _gn(base_ch)
        self.conv2 = nn.Conv2d(base_ch, base_ch, 3, padding=1)
        self.norm2 = _gn(base_ch)
        self.out = nn.Conv2d(base_ch, 3, 3, padding=1)

    def forward(self, z):
        h = self.fc(z).reshape(-1, self.base_ch, self.base, self.base)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(self.norm1(self.conv1(h)))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(self.norm2(self.conv2(h)))
        return self.out(h)


def pretext_input_size(encoder: nn.Module, crop_size: int = 76) -> int:
    return encoder.input_size if isinstance(encoder, VitPatch16) else crop_size


def train_pretext_autoencoder(encoder: nn.Module, frames: torch.Tensor, steps: int,
                              batch_size: int = 32, lr: float = 1e-3,
                              seed: int = 0) -> float:
    """Fit the encoder by reconstructing environment frames; returns final loss.

    ``frames`` are raw [N, 3, H, W] images in [0, 1]; training uses the same
    crop/normalization path as the policy so the learned features transfer.
    """
    rng = torch.Generator().manual_seed(seed)
    size = pretext_input_size(encoder)
    decoder = _PretextDecoder(encoder.feature_dim, size)
    opt = torch.optim.AdamW(list(encoder.parameters()) + list(decoder.parameters()), lr=lr)
    loss_val = float("nan")
    for _ in range(steps):
        idx = torch.randint(0, frames.shape[0], (batch_size,), generator=rng)
        x = preprocess_frames(frames[idx], "train", rng)
        if isinstance(encoder, VitPatch16):
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        recon = decoder(encoder(x))
        loss = F.mse_loss(recon, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_val = float(loss.detach())
    return loss_val

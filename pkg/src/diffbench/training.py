"""Optimization loop: AdamW, warmup+cosine LR, gradient accumulation, EMA, checkpoints.

Checkpoints (format "ckpt-v1") are named-tensor archives holding live
parameters, EMA shadows, optimizer moments, normalizer statistics and the
training RNG state, so a resumed run replays the uninterrupted trajectory
bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .archive import load_archive, save_archive
from .errors import ArchiveError, ConfigurationError
from .policy import DiffusionPolicy

CHECKPOINT_FORMAT_VERSION = "ckpt-v1"


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    betas: tuple[float, float] = (0.95, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-6
    warmup_steps: int = 500
    grad_accumulate: int = 2
    num_epochs: int = 100
    batch_size: int = 16
    seed: int = 42
    checkpoint_every: int = 20   # epochs
    rollout_every: int = 20      # epochs
    val_every: int = 1
    use_ema: bool = True
    max_train_steps: int | None = None  # optional per-epoch cap on optimizer steps

    def __post_init__(self):
        if self.grad_accumulate < 1:
            raise ConfigurationError("grad_accumulate must be >= 1")


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to base_lr over warmup_steps, then cosine decay to 0."""
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            frac = 1.0
        else:
            frac = step / cfg.warmup_steps
        return cfg.base_lr * frac
    span = max(total_steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class EmaConfig:
    inv_gamma: float = 1.0
    power: float = 0.75
    min_value: float = 0.0
    max_value: float = 0.9999
    update_after_step: int = 0


def ema_decay(step: int, cfg: EmaConfig) -> float:
    """clamp(1 - (1 + step/inv_gamma)^(-power), min_value, max_value)."""
    value = 1.0 - (1.0 + step / cfg.inv_gamma) ** (-cfg.power)
    return min(max(value, cfg.min_value), cfg.max_value)


class EmaTracker:
    """Shadow copy of the live parameters, updated after each optimizer step."""

    def __init__(self, named_tensors: dict, cfg: EmaConfig | None = None):
        self.cfg = cfg or EmaConfig()
        self.step = 0
        self.shadow = {n: t.detach().clone() for n, t in named_tensors.items()}

    def update(self, named_tensors: dict) -> float:
        if set(named_tensors) != set(self.shadow):
            raise ConfigurationError("EMA shadow and live parameter name sets differ")
        decay = ema_decay(self.step, self.cfg)
        with torch.no_grad():
            for n, live in named_tensors.items():
                self.shadow[n].mul_(decay).add_(live.detach(), alpha=1.0 - decay)
        self.step += 1
        return decay


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, batch_indices):
        super().__init__(f"non-finite loss at optimizer step {step}, window indices {batch_indices}")
        self.step = step
        self.batch_indices = batch_indices


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Stateless per-epoch shuffle so a resumed run sees the same order."""
    return np.random.default_rng((seed, epoch)).permutation(n)


class Trainer:
    """Single-writer training loop around a DiffusionPolicy."""

    def __init__(self, policy: DiffusionPolicy, cfg: TrainConfig, total_steps: int,
                 ema_cfg: EmaConfig | None = None, config_echo: dict | None = None):
        self.policy = policy
        self.cfg = cfg
        self.total_steps = total_steps
        self.config_echo = config_echo or {}
        params = [p for _, p in policy.named_parameters() if p.requires_grad]
        if not params:
            raise ConfigurationError("no trainable parameters")
        self.optimizer = torch.optim.AdamW(
            params, lr=cfg.base_lr, betas=cfg.betas, eps=cfg.eps,
            weight_decay=cfg.weight_decay)
        self.ema = EmaTracker(dict(policy.named_parameters()), ema_cfg) if cfg.use_ema else None
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.epoch = 0
        self.global_step = 0

    # -- core loop -----------------------------------------------------------

    def train_epoch(self, dataset, val_dataset=None) -> dict:
        cfg = self.cfg
        n = len(dataset)
        if n == 0:
            raise ConfigurationError("training dataset is empty")
        perm = epoch_permutation(cfg.seed, self.epoch, n)
        micro = [perm[i: i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        losses = []
        steps_this_epoch = 0
        for g in range(0, len(micro), cfg.grad_accumulate):
            group = micro[g: g + cfg.grad_accumulate]
            if cfg.max_train_steps is not None and steps_this_epoch >= cfg.max_train_steps:
                break
            self.optimizer.zero_grad(set_to_none=True)
            group_loss = 0.0
            for idx in group:
                batch = dataset.collate(idx)
                batch["actions"] = self._normalize_actions(batch["actions"])
                loss = self.policy.compute_loss(batch, self.rng) / len(group)
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(self.global_step, [int(i) for i in idx])
                loss.backward()
                group_loss += float(loss.detach())
            lr = lr_at(self.global_step, cfg, self.total_steps)
            for pg in self.optimizer.param_groups:
                pg["lr"] = lr
            self.optimizer.step()
            self.global_step += 1
            steps_this_epoch += 1
            if self.ema is not None:
                self.ema.update(dict(self.policy.named_parameters()))
            losses.append(group_loss)
        self.epoch += 1
        metrics = {"train_loss": float(np.mean(losses)) if losses else float("nan"),
                   "epoch": self.epoch, "global_step": self.global_step}
        if val_dataset is not None and len(val_dataset) > 0 and cfg.val_every > 0 \
                and self.epoch % cfg.val_every == 0:
            metrics["val_loss"] = self.validation_loss(val_dataset)
        return metrics

    def _normalize_actions(self, actions: torch.Tensor) -> torch.Tensor:
        norm = self.policy.action_normalizer
        if norm is None:
            return actions
        return torch.clamp(norm.normalize(actions), -1.0, 1.0)

    def validation_loss(self, dataset) -> float:
        # dedicated generator per epoch: comparable numbers across epochs
        vg = torch.Generator().manual_seed((self.cfg.seed * 1_000_003 + self.epoch) % 2**63)
        losses = []
        with torch.no_grad():
            for i in range(0, len(dataset), self.cfg.batch_size):
                idx = list(range(i, min(i + self.cfg.batch_size, len(dataset))))
                batch = dataset.collate(idx)
                batch["actions"] = self._normalize_actions(batch["actions"])
                losses.append(float(self.policy.compute_loss(batch, vg)))
        return float(np.mean(losses))

    # -- checkpointing ---------------------------------------------------------

    def checkpoint_tensors(self) -> dict:
        tensors = {("model/" + n): t for n, t in self.policy.state_tensors().items()}
        if self.ema is not None:
            tensors.update({("ema/" + n): t for n, t in self.ema.shadow.items()})
        opt_state = self.optimizer.state_dict()["state"]
        trainable = [n for n, p in self.policy.named_parameters() if p.requires_grad]
        for pi, name in enumerate(trainable):
            st = opt_state.get(pi)
            if st is None:
                continue
            tensors[f"opt/{name}/exp_avg"] = st["exp_avg"]
            tensors[f"opt/{name}/exp_avg_sq"] = st["exp_avg_sq"]
            tensors[f"opt/{name}/step"] = torch.as_tensor(st["step"], dtype=torch.float32)
        for prefix, norm in (("action", self.policy.action_normalizer),
                             ("lowdim", self.policy.lowdim_normalizer)):
            if norm is not None:
                tensors[f"norm/{prefix}/mins"] = torch.from_numpy(norm.mins)
                tensors[f"norm/{prefix}/maxs"] = torch.from_numpy(norm.maxs)
        tensors["rng/torch"] = self.rng.get_state()
        return tensors

    def save_checkpoint(self, path) -> None:
        meta = {
            "kind": "checkpoint",
            "config": self.config_echo,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "ema_step": self.ema.step if self.ema is not None else None,
            "total_steps": self.total_steps,
        }
        save_archive(path, self.checkpoint_tensors(), meta=meta,
                     format_version=CHECKPOINT_FORMAT_VERSION)

    def restore(self, tensors: dict, meta: dict) -> None:
        model = {n[len("model/"):]: t for n, t in tensors.items() if n.startswith("model/")}
        own = self.policy.state_tensors()
        for name, t in model.items():
            if name not in own:
                raise ArchiveError(f"checkpoint has unknown tensor {name!r}")
            if tuple(t.shape) != tuple(own[name].shape):
                raise ArchiveError(
                    f"checkpoint tensor {name!r} has shape {tuple(t.shape)}, "
                    f"expected {tuple(own[name].shape)} (config mismatch?)")
        missing = sorted(set(own) - set(model))
        if missing:
            raise ArchiveError(f"checkpoint is missing tensors: {', '.join(missing)}")
        self.policy.install_params(model, "live")

        if self.ema is not None:
            for n in self.ema.shadow:
                key = "ema/" + n
                if key not in tensors:
                    raise ArchiveError(f"checkpoint is missing EMA tensor {key!r}")
                self.ema.shadow[n] = tensors[key].clone()
            self.ema.step = int(meta["ema_step"])

        trainable = [n for n, p in self.policy.named_parameters() if p.requires_grad]
        opt_state = {}
        for pi, name in enumerate(trainable):
            if f"opt/{name}/exp_avg" in tensors:
                opt_state[pi] = {
                    "step": torch.as_tensor(float(tensors[f"opt/{name}/step"])),
                    "exp_avg": tensors[f"opt/{name}/exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"opt/{name}/exp_avg_sq"].clone(),
                }
        sd = self.optimizer.state_dict()
        sd["state"] = opt_state
        self.optimizer.load_state_dict(sd)

        self.rng.set_state(tensors["rng/torch"])
        self.epoch = int(meta["epoch"])
        self.global_step = int(meta["global_step"])
        self.total_steps = int(meta["total_steps"])


def load_checkpoint_tensors(path) -> tuple[dict, dict]:
    tensors, meta, _ = load_archive(path, expected_version=CHECKPOINT_FORMAT_VERSION)
    if meta.get("kind") != "checkpoint":
        raise ArchiveError(f"{path} is not a training checkpoint")
    return tensors, meta


def planned_total_steps(n_windows: int, cfg: TrainConfig) -> int:
    """Cosine horizon: optimizer steps over the whole run, computed up front."""
    micro_per_epoch = math.ceil(n_windows / cfg.batch_size)
    steps = math.ceil(micro_per_epoch / cfg.grad_accumulate)
    if cfg.max_train_steps is not None:
        steps = min(steps, cfg.max_train_steps)
    return steps * cfg.num_epochs

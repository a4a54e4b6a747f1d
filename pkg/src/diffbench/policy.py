"""The diffusion policy: training loss, iterative action sampling, execution slicing.

Actions live in normalized [-1, 1] space everywhere inside the policy;
conversion to environment units happens only at the rollout boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import scheduler as sched_mod
from .data import Normalizer
from .errors import ConfigurationError, DomainError
from .scheduler import NoiseSchedule
from .unet import ConditionalUnet1d
from .vision import ObservationEncoder, ObservationWindow, preprocess_frames


@dataclass(frozen=True)
class ExecutionConfig:
    """Receding-horizon execution parameters."""

    n_obs_steps: int = 2
    n_action_steps: int = 8
    num_inference_steps: int = 100

    def validate(self, horizon: int, schedule_t: int) -> None:
        if self.num_inference_steps > schedule_t:
            raise ConfigurationError(
                f"num_inference_steps {self.num_inference_steps} exceeds schedule length {schedule_t}"
            )
        if self.n_obs_steps + self.n_action_steps > horizon + 1:
            raise ConfigurationError(
                f"n_obs_steps + n_action_steps = {self.n_obs_steps + self.n_action_steps} "
                f"exceeds horizon + 1 = {horizon + 1}"
            )


def select_executed_slice(traj: torch.Tensor, n_obs_steps: int, n_action_steps: int) -> torch.Tensor:
    """Rows [n_obs_steps - 1, n_obs_steps - 1 + n_action_steps) of the trajectory.

    Row n_obs_steps - 1 is aligned with the current control step, so these are
    the actions to execute before re-planning.
    """
    horizon = traj.shape[-2]
    start = n_obs_steps - 1
    if start < 0 or start + n_action_steps > horizon:
        raise ConfigurationError(
            f"slice [{start}, {start + n_action_steps}) out of range for horizon {horizon}"
        )
    return traj[..., start: start + n_action_steps, :]


@dataclass
class PreprocessConfig:
    crop_size: int = 76
    random_crop: bool = True
    imagenet_norm: bool = True


class DiffusionPolicy:
    """Bundles the denoiser, observation encoder, normalizers and schedule.

    ``params_source`` records which parameter set is installed ("live" during
    training, "ema" after shadow weights are loaded for evaluation); rollout
    code asserts on it. ``predict_calls`` counts sampler invocations so the
    re-planning cadence is checkable.
    """

    def __init__(self, unet: ConditionalUnet1d, obs_encoder: ObservationEncoder | None,
                 schedule: NoiseSchedule, exec_cfg: ExecutionConfig,
                 action_normalizer: Normalizer | None = None,
                 lowdim_normalizer: Normalizer | None = None,
                 preprocess: PreprocessConfig | None = None):
        exec_cfg.validate(unet.cfg.horizon, schedule.num_timesteps)
        if obs_encoder is not None and obs_encoder.cond_dim != unet.cfg.cond_dim:
            raise ConfigurationError(
                f"encoder cond_dim {obs_encoder.cond_dim} != denoiser cond_dim {unet.cfg.cond_dim}"
            )
        self.unet = unet
        self.obs_encoder = obs_encoder
        self.schedule = schedule
        self.exec_cfg = exec_cfg
        self.action_normalizer = action_normalizer
        self.lowdim_normalizer = lowdim_normalizer
        self.preprocess = preprocess or PreprocessConfig()
        self.params_source = "live"
        self.predict_calls = 0

    # -- parameter plumbing ------------------------------------------------

    @property
    def horizon(self) -> int:
        return self.unet.cfg.horizon

    @property
    def action_dim(self) -> int:
        return self.unet.cfg.action_dim

    def named_parameters(self):
        yield from (("unet." + n, p) for n, p in self.unet.named_parameters())
        if self.obs_encoder is not None:
            yield from (("encoder." + n, p) for n, p in self.obs_encoder.named_parameters())

    def state_tensors(self) -> dict:
        out = {("unet." + n): t for n, t in self.unet.state_dict().items()}
        if self.obs_encoder is not None:
            out.update({("encoder." + n): t for n, t in self.obs_encoder.state_dict().items()})
        return out

    def install_params(self, tensors: dict, source: str) -> None:
        """Load a named tensor set (e.g. EMA shadow weights) into the modules."""
        unet_state = {n[len("unet."):]: t for n, t in tensors.items() if n.startswith("unet.")}
        self.unet.load_state_dict(unet_state)
        if self.obs_encoder is not None:
            enc_state = {n[len("encoder."):]: t for n, t in tensors.items() if n.startswith("encoder.")}
            self.obs_encoder.load_state_dict(enc_state)
        self.params_source = source

    def eval_mode(self):
        self.unet.eval()
        if self.obs_encoder is not None:
            self.obs_encoder.eval()
        return self

    # -- conditioning --------------------------------------------------------

    def encode_observations(self, frames: torch.Tensor, lowdim: torch.Tensor,
                            mode: str, rng: torch.Generator | None = None) -> torch.Tensor | None:
        """frames [B, n_obs, n_cam, 3, H, W] in [0,1]; lowdim [B, n_obs, Dl] env units."""
        if self.obs_encoder is None:
            return None
        pp = self.preprocess
        crop_mode = "train" if (mode == "train" and pp.random_crop) else "eval"
        frames = preprocess_frames(frames, crop_mode, rng, crop_size=pp.crop_size,
                                   imagenet_norm=pp.imagenet_norm)
        if self.lowdim_normalizer is not None:
            lowdim = self.lowdim_normalizer.normalize(lowdim)
        return self.obs_encoder(frames, lowdim)

    # -- training loss -------------------------------------------------------

    def compute_loss(self, batch: dict, rng: torch.Generator,
                     t: torch.Tensor | None = None,
                     eps: torch.Tensor | None = None) -> torch.Tensor:
        """Epsilon-prediction MSE on a batch of windows.

        batch["actions"] must already be normalized to [-1, 1]; frames/lowdim
        are raw and get the train-time preprocessing. ``t``/``eps`` default to
        fresh draws from ``rng``; passing them pins the noising (tests).
        """
        actions = batch["actions"]
        if actions.ndim != 3 or actions.shape[1:] != (self.horizon, self.action_dim):
            raise DomainError(f"expected actions [B, {self.horizon}, {self.action_dim}], "
                              f"got {tuple(actions.shape)}")
        if float(actions.abs().max()) > 1.0 + 1e-6:
            raise DomainError("actions are not normalized to [-1, 1]")
        b = actions.shape[0]
        cond = None
        if self.obs_encoder is not None:
            cond = self.encode_observations(batch["frames"], batch["lowdim"], "train", rng)
        if t is None:
            t = torch.randint(0, self.schedule.num_timesteps, (b,), generator=rng)
        if eps is None:
            eps = torch.empty_like(actions).normal_(generator=rng)
        noisy = sched_mod.add_noise(actions, eps, t, self.schedule)
        pred = self.unet(noisy, t, cond)
        return torch.mean((pred - eps) ** 2)

    # -- sampling --------------------------------------------------------------

    @torch.no_grad()
    def sample_trajectories(self, cond: torch.Tensor | None, batch: int,
                            rngs: list[torch.Generator]) -> torch.Tensor:
        """Reverse-diffuse a batch of normalized trajectories.

        One RNG per batch element keeps episode noise streams independent of
        how rollouts are batched.
        """
        if len(rngs) != batch:
            raise DomainError(f"need {batch} generators, got {len(rngs)}")
        shape = (self.horizon, self.action_dim)
        x = torch.stack([torch.empty(shape).normal_(generator=g) for g in rngs])
        for t in range(self.exec_cfg.num_inference_steps - 1, -1, -1):
            eps_hat = self.unet(x, torch.full((batch,), t, dtype=torch.long), cond)
            noise = None
            if t > 0:
                noise = torch.stack([torch.empty(shape).normal_(generator=g) for g in rngs])
            x = sched_mod.denoise_step(x, eps_hat, t, self.schedule, noise=noise)
        self.predict_calls += 1
        return x

    def predict_action(self, window: ObservationWindow, rng: torch.Generator,
                       denormalize: bool = False) -> torch.Tensor:
        """Sample one normalized action trajectory for a single observation window."""
        cond = None
        if self.obs_encoder is not None:
            cond = self.encode_observations(window.frames.unsqueeze(0),
                                            window.lowdim.unsqueeze(0), "eval")
        traj = self.sample_trajectories(cond, 1, [rng])[0]
        if denormalize and self.action_normalizer is not None:
            traj = self.action_normalizer.denormalize(traj)
        return traj

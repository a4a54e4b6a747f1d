"""Build pipeline objects (env, encoder, policy, trainer) from a validated config."""

from __future__ import annotations

import warnings

import torch

from .config import task_shape_meta
from .data import EpisodeRecord, Normalizer, WindowDataset, fit_normalizer, split_train_val
from .envs import make_env
from .errors import ConfigurationError
from .policy import DiffusionPolicy, ExecutionConfig, PreprocessConfig
from .scheduler import build_schedule
from .training import EmaConfig, TrainConfig, Trainer, planned_total_steps
from .unet import ConditionalUnet1d, DenoiserConfig
from .vision import EncoderRegime, ObservationEncoder, apply_regime, load_pretrained

DESK_FEATURE_DIM = 64


def build_env_from_config(cfg: dict):
    task = cfg["task_name"]
    overrides = {}
    max_steps = cfg["task"]["env_runner"]["max_steps"]
    if max_steps:
        overrides["max_steps"] = max_steps
    return make_env(task, **overrides)


def regime_from_config(cfg: dict) -> EncoderRegime:
    rgb = cfg["policy"]["obs_encoder"]["rgb_model"]
    frozen = cfg["training"]["freeze_encoder"]
    if frozen:
        kind = "frozen"
    elif rgb["pretrained"]:
        kind = "finetune"
    else:
        kind = "scratch"
    source = rgb["weights"] if kind != "scratch" else None
    if kind != "scratch" and source is None:
        raise ConfigurationError(
            f"{kind} regime needs policy.obs_encoder.rgb_model.weights to name an archive")
    return EncoderRegime(kind, source)


def shape_info(cfg: dict) -> dict:
    meta = cfg["shape_meta"] if cfg["task_name"] not in ("pusht2d", "reach2d") \
        else task_shape_meta(cfg["task_name"])
    n_cameras = sum(1 for v in meta["obs"].values() if v.get("type") == "rgb")
    lowdim = sum(v["shape"][0] for v in meta["obs"].values() if v.get("type") != "rgb")
    return {
        "action_dim": meta["action"]["shape"][0],
        "n_cameras": n_cameras,
        "lowdim_dim": lowdim,
    }


def build_obs_encoder(cfg: dict, info: dict) -> ObservationEncoder:
    rgb = cfg["policy"]["obs_encoder"]["rgb_model"]
    feature_dim = rgb["feature_dim"] or DESK_FEATURE_DIM
    return ObservationEncoder(
        family=rgb["name"],
        feature_dim=feature_dim,
        n_cameras=info["n_cameras"],
        lowdim_dim=info["lowdim_dim"],
        n_obs_steps=cfg["n_obs_steps"],
    )


def build_policy_from_config(cfg: dict, action_normalizer: Normalizer | None = None,
                             lowdim_normalizer: Normalizer | None = None,
                             seed: int | None = None) -> DiffusionPolicy:
    """Assemble an untrained policy; ``seed`` fixes the parameter init."""
    if seed is not None:
        torch.manual_seed(seed)
    info = shape_info(cfg)
    encoder = build_obs_encoder(cfg, info)
    regime = regime_from_config(cfg)
    if regime.kind != "scratch":
        for cam in encoder.cameras:
            load_pretrained(cam, regime.source)
    apply_regime(encoder, regime)

    pol = cfg["policy"]
    dn_cfg = DenoiserConfig(
        action_dim=info["action_dim"],
        cond_dim=encoder.cond_dim,
        horizon=cfg["horizon"],
        down_dims=tuple(pol["down_dims"]),
        kernel_size=pol["kernel_size"],
        n_groups=pol["n_groups"],
        step_embed_dim=pol["diffusion_step_embed_dim"],
        cond_predict_scale=pol["cond_predict_scale"],
    )
    unet = ConditionalUnet1d(dn_cfg)
    ns = pol["noise_scheduler"]
    schedule = build_schedule(ns["beta_schedule"], ns["num_train_timesteps"],
                              ns["beta_start"], ns["beta_end"], clip_sample=ns["clip_sample"])
    exec_cfg = ExecutionConfig(
        n_obs_steps=cfg["n_obs_steps"],
        n_action_steps=cfg["n_action_steps"],
        num_inference_steps=pol["num_inference_steps"],
    )
    enc_cfg = pol["obs_encoder"]
    preprocess = PreprocessConfig(
        crop_size=enc_cfg["crop_shape"][0],
        random_crop=enc_cfg["random_crop"],
        imagenet_norm=enc_cfg["imagenet_norm"],
    )
    return DiffusionPolicy(unet, encoder, schedule, exec_cfg,
                           action_normalizer=action_normalizer,
                           lowdim_normalizer=lowdim_normalizer,
                           preprocess=preprocess)


def device_from_config(cfg: dict) -> torch.device:
    want = cfg["training"]["device"]
    if want.startswith("cuda") and not torch.cuda.is_available():
        warnings.warn(f"device {want!r} unavailable, falling back to cpu")
        return torch.device("cpu")
    return torch.device(want)


def train_config_from(cfg: dict) -> TrainConfig:
    tr = cfg["training"]
    opt = cfg["optimizer"]
    return TrainConfig(
        base_lr=opt["lr"],
        betas=tuple(opt["betas"]),
        eps=opt["eps"],
        weight_decay=opt["weight_decay"],
        warmup_steps=tr["lr_warmup_steps"],
        grad_accumulate=tr["gradient_accumulate_every"],
        num_epochs=tr["num_epochs"],
        batch_size=cfg["dataloader"]["batch_size"],
        seed=tr["seed"],
        checkpoint_every=tr["checkpoint_every"],
        rollout_every=tr["rollout_every"],
        val_every=tr["val_every"],
        use_ema=tr["use_ema"],
        max_train_steps=tr["max_train_steps"],
    )


def ema_config_from(cfg: dict) -> EmaConfig:
    e = cfg["ema"]
    return EmaConfig(inv_gamma=e["inv_gamma"], power=e["power"],
                     min_value=e["min_value"], max_value=e["max_value"],
                     update_after_step=e["update_after_step"])


def build_training_stack(cfg: dict, episodes: list[EpisodeRecord]):
    """Datasets, normalizers, policy and trainer for one training run."""
    ds_cfg = cfg["task"]["dataset"]
    train_eps, val_eps = split_train_val(episodes, ds_cfg["val_ratio"], ds_cfg["seed"])
    action_norm = fit_normalizer([ep.actions for ep in train_eps])
    lowdim_norm = fit_normalizer([ep.lowdim for ep in train_eps])

    train_ds = WindowDataset(train_eps, cfg["horizon"], cfg["dataset_obs_steps"],
                             ds_cfg["pad_before"], ds_cfg["pad_after"])
    val_ds = WindowDataset(val_eps, cfg["horizon"], cfg["dataset_obs_steps"],
                           ds_cfg["pad_before"], ds_cfg["pad_after"]) if val_eps else None

    policy = build_policy_from_config(cfg, action_norm, lowdim_norm,
                                      seed=cfg["training"]["seed"])
    tr_cfg = train_config_from(cfg)
    total = planned_total_steps(len(train_ds), tr_cfg)
    trainer = Trainer(policy, tr_cfg, total, ema_cfg=ema_config_from(cfg), config_echo=cfg)
    return train_ds, val_ds, policy, trainer

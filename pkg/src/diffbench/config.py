"""Benchmark configuration: strict schema, defaults, file loading, overrides.

The default document mirrors the training configuration keys this pipeline
is built around (horizon/scheduler/optimizer/EMA/runner blocks); harness
extensions live under dedicated blocks (``demos``, ``pretrain``, ``matrix``,
``run``). Validation is strict: unknown keys and type mismatches are
rejected with the offending dotted path.
"""

from __future__ import annotations

import copy

import yaml

from .errors import ConfigurationError

# Keys whose default is None, mapped to the type they accept when set.
_NULLABLE = {
    "task.dataset.dataset_path": str,
    "task.dataset_path": str,
    "task.env_runner.dataset_path": str,
    "task.env_runner.n_envs": int,
    "policy.obs_encoder.rgb_model.weights": str,
    "policy.obs_encoder.rgb_model.feature_dim": int,
    "policy.obs_encoder.resize_shape": list,
    "training.max_train_steps": int,
    "training.max_val_steps": int,
    "run.out_dir": str,
    "run.dataset_dir": str,
    "run.results_file": str,
    "run.checkpoint": str,
}

DEFAULT_CONFIG = {
    "task_name": "lift",
    "exp_name": "default",
    "horizon": 16,
    "n_obs_steps": 2,
    "n_action_steps": 8,
    "n_latency_steps": 0,
    "dataset_obs_steps": 2,
    "past_action_visible": False,
    "keypoint_visible_rate": 1.0,
    "obs_as_global_cond": True,
    "name": "train_diffusion_unet_hybrid",
    "abs_action": True,
    "shape_meta": {
        "action": {"shape": [10]},
        "obs": {
            "agentview_image": {"shape": [3, 84, 84], "type": "rgb"},
            "robot0_eef_pos": {"shape": [3], "type": "low_dim"},
            "robot0_eef_quat": {"shape": [4], "type": "low_dim"},
            "robot0_eye_in_hand_image": {"shape": [3, 84, 84], "type": "rgb"},
            "robot0_gripper_qpos": {"shape": [2], "type": "low_dim"},
        },
    },
    "task": {
        "abs_action": True,
        "name": "lift_image",
        "task_name": "lift",
        "dataset_path": None,
        "dataset": {
            "abs_action": True,
            "dataset_path": None,
            "horizon": 16,
            "n_obs_steps": 2,
            "pad_after": 7,
            "pad_before": 1,
            "rotation_rep": "rotation_6d",
            "seed": 42,
            "use_cache": False,
            "val_ratio": 0.01,
        },
        "env_runner": {
            "abs_action": True,
            "crf": 22,
            "dataset_path": None,
            "fps": 10,
            "max_steps": 400,
            "n_action_steps": 8,
            "n_envs": None,
            "n_obs_steps": 2,
            "n_test": 10,
            "n_test_vis": 2,
            "n_train": 6,
            "n_train_vis": 2,
            "past_action": False,
            "render_obs_key": "agentview_image",
            "test_start_seed": 100000,
            "tqdm_interval_sec": 1.0,
            "train_start_idx": 0,
        },
    },
    "ema": {
        "update_after_step": 0,
        "inv_gamma": 1.0,
        "power": 0.75,
        "min_value": 0.0,
        "max_value": 0.9999,
    },
    "dataloader": {
        "batch_size": 16,
        "num_workers": 4,
        "persistent_workers": False,
        "pin_memory": True,
        "shuffle": True,
    },
    "val_dataloader": {
        "batch_size": 16,
        "num_workers": 4,
        "persistent_workers": False,
        "pin_memory": True,
        "shuffle": False,
    },
    "policy": {
        "cond_predict_scale": True,
        "diffusion_step_embed_dim": 64,
        "down_dims": [128, 256, 512],
        "horizon": 16,
        "kernel_size": 5,
        "n_action_steps": 8,
        "n_groups": 8,
        "n_obs_steps": 2,
        "num_inference_steps": 100,
        "obs_as_global_cond": True,
        "noise_scheduler": {
            "beta_end": 0.02,
            "beta_schedule": "squaredcos_cap_v2",
            "beta_start": 0.0001,
            "clip_sample": True,
            "num_train_timesteps": 100,
            "prediction_type": "epsilon",
            "variance_type": "fixed_small",
        },
        "obs_encoder": {
            "rgb_model": {
                "name": "resnet_style_cnn",
                "weights": None,
                "pretrained": False,
                "feature_dim": None,
            },
            "resize_shape": None,
            "crop_shape": [76, 76],
            "random_crop": True,
            "use_group_norm": True,
            "share_rgb_model": False,
            "imagenet_norm": True,
        },
    },
    "training": {
        "device": "cuda:0",
        "seed": 42,
        "debug": True,
        "resume": True,
        "lr_scheduler": "cosine",
        "lr_warmup_steps": 500,
        "gradient_accumulate_every": 2,
        "use_ema": True,
        "freeze_encoder": False,
        "num_epochs": 100,
        "rollout_every": 20,
        "checkpoint_every": 20,
        "val_every": 1,
        "sample_every": 5,
        "max_train_steps": None,
        "max_val_steps": None,
        "tqdm_interval_sec": 1.0,
    },
    "optimizer": {
        "lr": 1.0e-4,
        "betas": [0.95, 0.999],
        "eps": 1.0e-8,
        "weight_decay": 1.0e-6,
    },
    # -- harness extensions -------------------------------------------------
    "demos": {
        "n_episodes": 200,
        "start_seed": 0,
        "successful_only": True,
    },
    "pretrain": {
        "steps": 300,
        "batch_size": 32,
        "lr": 1.0e-3,
        "n_frames": 256,
        "frame_seed": 7,
        "seed": 0,
    },
    "matrix": {
        "tasks": ["reach2d", "pusht2d"],
        "families": ["resnet_style_cnn", "vit_patch16"],
        "regimes": ["scratch", "frozen", "finetune"],
        "n_eval_episodes": 50,
        "eval_max_steps": 0,  # 0 = task default
        "canonical": False,
    },
    "run": {
        "out_dir": None,
        "dataset_dir": None,
        "results_file": None,
        "checkpoint": None,
    },
}

VALID_SCHEDULES = ("squaredcos_cap_v2", "linear")
VALID_TASKS = ("lift", "can", "square", "pusht", "pusht2d", "reach2d")


def _check_types(path: str, default, value):
    if value is None:
        if default is None or path in _NULLABLE:
            return
        raise ConfigurationError(f"null is not valid for key: {path}")
    if default is None:
        want = _NULLABLE.get(path)
        if want is not None and not isinstance(value, want):
            raise ConfigurationError(
                f"type mismatch at key: {path} (expected {want.__name__}, got {type(value).__name__})")
        return
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"type mismatch at key: {path} (expected bool)")
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"type mismatch at key: {path} (expected number)")
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"type mismatch at key: {path} (expected string)")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigurationError(f"type mismatch at key: {path} (expected list)")


def _merge(base: dict, override: dict, prefix: str = "") -> None:
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown key: {path}")
        if isinstance(base[key], dict) and key != "shape_meta":
            if not isinstance(value, dict):
                raise ConfigurationError(f"type mismatch at key: {path} (expected mapping)")
            _merge(base[key], value, path + ".")
        else:
            _check_types(path, base[key], value)
            base[key] = value


def _semantic_checks(cfg: dict) -> None:
    ns = cfg["policy"]["noise_scheduler"]
    if ns["beta_schedule"] not in VALID_SCHEDULES:
        raise ConfigurationError(
            f"invalid value at key: policy.noise_scheduler.beta_schedule ({ns['beta_schedule']!r})")
    if ns["num_train_timesteps"] < 1:
        raise ConfigurationError("policy.noise_scheduler.num_train_timesteps must be >= 1")
    if cfg["policy"]["num_inference_steps"] > ns["num_train_timesteps"]:
        raise ConfigurationError(
            "policy.num_inference_steps must not exceed noise_scheduler.num_train_timesteps")
    levels = len(cfg["policy"]["down_dims"])
    stride = 2 ** (levels - 1)
    if cfg["horizon"] % stride != 0:
        raise ConfigurationError(f"horizon {cfg['horizon']} not divisible by {stride}")
    if cfg["n_obs_steps"] + cfg["n_action_steps"] > cfg["horizon"] + 1:
        raise ConfigurationError("n_obs_steps + n_action_steps must be <= horizon + 1")
    if not 0.0 <= cfg["task"]["dataset"]["val_ratio"] < 1.0:
        raise ConfigurationError("task.dataset.val_ratio must be in [0, 1)")
    fam = cfg["policy"]["obs_encoder"]["rgb_model"]["name"]
    if fam not in ("resnet_style_cnn", "vit_patch16"):
        raise ConfigurationError(
            f"invalid value at key: policy.obs_encoder.rgb_model.name ({fam!r})")
    for regime_key in cfg["matrix"]["regimes"]:
        if regime_key not in ("scratch", "frozen", "finetune"):
            raise ConfigurationError(f"invalid regime in matrix.regimes: {regime_key!r}")
    if cfg["training"]["freeze_encoder"] and not cfg["policy"]["obs_encoder"]["rgb_model"]["pretrained"]:
        raise ConfigurationError("freeze_encoder requires a pretrained encoder (set rgb_model.pretrained)")


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def parse_config(document: dict | None) -> dict:
    """Validate a (possibly partial) config document against the schema."""
    cfg = default_config()
    if document:
        if not isinstance(document, dict):
            raise ConfigurationError("config document must be a mapping")
        _merge(cfg, document)
    _semantic_checks(cfg)
    return cfg


def load_config_file(path) -> dict:
    with open(path) as f:
        doc = yaml.safe_load(f)
    if doc is None:
        doc = {}
    return parse_config(doc)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply dotted-path overrides like ``training.seed=7`` on top of a config."""
    cfg = copy.deepcopy(cfg)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigurationError(f"override {ov!r} is not of the form key.path=value")
        key, _, raw = ov.partition("=")
        key = key.strip()
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"cannot parse override value {raw!r}: {e}") from e
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigurationError(f"unknown key: {key}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigurationError(f"unknown key: {key}")
        _merge(node, {parts[-1]: value},
               prefix=(".".join(parts[:-1]) + "." if len(parts) > 1 else ""))
    _semantic_checks(cfg)
    return cfg


def task_shape_meta(task: str) -> dict:
    """Observation/action shapes for the desk-scale tasks."""
    if task in ("pusht2d", "reach2d"):
        return {
            "action": {"shape": [2]},
            "obs": {
                "image": {"shape": [3, 84, 84], "type": "rgb"},
                "agent_pos": {"shape": [2], "type": "low_dim"},
            },
        }
    return default_config()["shape_meta"]

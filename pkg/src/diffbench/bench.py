"""Benchmark harness: demo generation, closed-loop evaluation, the task x
family x regime matrix sweep, and the append-only JSON-lines results store.

Episodes within one evaluation run in lockstep so the diffusion policy can
batch its denoising across environments; every episode still draws from its
own sampling RNG, so results do not depend on how rollouts are batched.
"""

from __future__ import annotations

import copy
import fcntl
import json
import time
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import task_shape_meta
from .data import EpisodeRecord, load_dataset
from .envs import make_env, pusht_expert_action, reach_expert_action
from .errors import ConfigurationError, DomainError, ProtocolError
from .factory import build_policy_from_config, build_training_stack
from .policy import DiffusionPolicy, select_executed_slice
from .training import load_checkpoint_tensors
from .vision import build_encoder, save_encoder_weights, train_pretext_autoencoder

RESULTS_SCHEMA_VERSION = "results-v1"
SAMPLING_SEED_OFFSET = 500_000  # sampling streams live far away from env seeds
EXPERT_NOISE_OFFSET = 10_000

ARCH_LABELS = {
    "resnet_style_cnn": "resnet_style_cnn",
    "vit_patch16": "vit_patch16",
}


@dataclass
class RunResult:
    """One benchmark cell: task x encoder family x regime x split."""

    task: str
    family: str
    regime: str
    split: str
    n_episodes: int
    n_success: int
    success_rate: float
    seeds: list[int]
    checkpoint: str | None
    wall_time: float
    sampling_seed_base: int | None = None
    arch_label: str | None = None
    pretrain_dataset: str | None = None
    pretrain_params: str | None = None
    schema_version: str = RESULTS_SCHEMA_VERSION

    def __post_init__(self):
        if self.n_episodes > 0 and abs(self.success_rate - self.n_success / self.n_episodes) > 1e-12:
            raise DomainError("success_rate must equal n_success / n_episodes exactly")
        if len(set(self.seeds)) != len(self.seeds):
            raise DomainError("episode seeds must be distinct")

    def to_record(self, canonical: bool = False) -> dict:
        rec = asdict(self)
        if canonical:
            rec["wall_time"] = 0.0
        return rec


def append_result(path, result: RunResult, canonical: bool = False) -> None:
    line = json.dumps(result.to_record(canonical), sort_keys=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        f.write(line + "\n")
        fcntl.flock(f, fcntl.LOCK_UN)


def read_results(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    for i, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}:{i + 1}: corrupt results line: {e}") from e
    return records


# ---------------------------------------------------------------------------
# Rollout policies


class DiffusionRollout:
    """Receding-horizon executor: plan a horizon, run n_action_steps, re-plan.

    The policy is expected to carry EMA weights during evaluation; pass
    ``expect_source=None`` to opt out (debug only).
    """

    def __init__(self, policy: DiffusionPolicy, sampling_seed_base: int,
                 expect_source: str | None = "ema"):
        if expect_source is not None and policy.params_source != expect_source:
            raise ProtocolError(
                f"evaluation requires {expect_source!r} parameters, "
                f"policy carries {policy.params_source!r}")
        self.policy = policy.eval_mode()
        self.sampling_seed_base = sampling_seed_base
        self.n_obs = policy.exec_cfg.n_obs_steps
        self.histories: list[deque] = []
        self.queues: list[deque] = []
        self.rngs: list[torch.Generator] = []

    def reset(self, seeds: list[int]) -> None:
        n = len(seeds)
        self.histories = [deque(maxlen=self.n_obs) for _ in range(n)]
        self.queues = [deque() for _ in range(n)]
        self.rngs = [torch.Generator().manual_seed(self.sampling_seed_base + i)
                     for i in range(n)]

    def act(self, observations: list[dict | None]) -> list[np.ndarray | None]:
        active = [i for i, o in enumerate(observations) if o is not None]
        for i in active:
            self.histories[i].append(observations[i])
        replan = [i for i in active if not self.queues[i]]
        if replan:
            self._plan(replan)
        out: list[np.ndarray | None] = [None] * len(observations)
        for i in active:
            out[i] = self.queues[i].popleft()
        return out

    def _plan(self, idxs: list[int]) -> None:
        frames, lowdim = [], []
        for i in idxs:
            hist = list(self.histories[i])
            while len(hist) < self.n_obs:  # episode start: replicate the first obs
                hist = [hist[0]] + hist
            frames.append(torch.stack(
                [torch.from_numpy(h["frame"]).unsqueeze(0) for h in hist]))
            lowdim.append(torch.stack([torch.from_numpy(h["lowdim"]) for h in hist]))
        frames = torch.stack(frames)          # [B, n_obs, 1, 3, H, W]
        lowdim = torch.stack(lowdim)
        policy = self.policy
        with torch.no_grad():
            cond = policy.encode_observations(frames, lowdim, "eval")
            traj = policy.sample_trajectories(cond, len(idxs), [self.rngs[i] for i in idxs])
            executed = select_executed_slice(traj, policy.exec_cfg.n_obs_steps,
                                             policy.exec_cfg.n_action_steps)
            if policy.action_normalizer is not None:
                executed = policy.action_normalizer.denormalize(executed)
        for k, i in enumerate(idxs):
            for row in executed[k].numpy():
                self.queues[i].append(row.astype(np.float64))


class ExpertRollout:
    """The scripted expert wrapped under the rollout-policy interface."""

    def __init__(self, task: str, noise_offset: int = EXPERT_NOISE_OFFSET):
        self.task = task
        self.noise_offset = noise_offset
        self.rngs: list[np.random.Generator] = []
        self.env_params = None

    def bind_env_params(self, params) -> None:
        self.env_params = params

    def reset(self, seeds: list[int]) -> None:
        self.rngs = [np.random.default_rng(s + self.noise_offset) for s in seeds]

    def act(self, observations: list[dict | None]) -> list[np.ndarray | None]:
        out: list[np.ndarray | None] = [None] * len(observations)
        for i, obs in enumerate(observations):
            if obs is None:
                continue
            if self.task == "pusht2d":
                out[i] = pusht_expert_action(obs["state"], self.env_params, self.rngs[i])
            else:
                out[i] = reach_expert_action(obs["state"], self.rngs[i])
        return out


class RandomRollout:
    """Uniform random target positions; the floor every policy must beat."""

    def __init__(self, seed_offset: int = 77_000):
        self.seed_offset = seed_offset
        self.rngs: list[np.random.Generator] = []

    def reset(self, seeds: list[int]) -> None:
        self.rngs = [np.random.default_rng(s + self.seed_offset) for s in seeds]

    def act(self, observations: list[dict | None]) -> list[np.ndarray | None]:
        return [None if o is None else self.rngs[i].uniform(0.0, 1.0, 2)
                for i, o in enumerate(observations)]


# ---------------------------------------------------------------------------
# Evaluation


def run_eval(rollout_policy, env_factory, n_episodes: int, start_seed: int,
             max_steps: int | None = None, task: str = "", family: str = "",
             regime: str = "", split: str = "", checkpoint: str | None = None,
             sampling_seed_base: int | None = None, seeds: list[int] | None = None) -> RunResult:
    """Closed-loop evaluation; episode i uses seed start_seed + i.

    A protocol/domain error inside an episode marks it failed and the run
    continues. ``seeds`` overrides the arithmetic seed list (train splits
    replay demo seeds).
    """
    if n_episodes < 1:
        raise ConfigurationError("n_episodes must be >= 1")
    t0 = time.monotonic()
    if seeds is None:
        seeds = [start_seed + i for i in range(n_episodes)]
    envs = [env_factory() for _ in seeds]
    if isinstance(rollout_policy, ExpertRollout):
        rollout_policy.bind_env_params(envs[0].params)
    rollout_policy.reset(seeds)

    observations: list[dict | None] = []
    failed = [False] * len(seeds)
    infos: list[dict] = [{} for _ in seeds]
    for env, seed in zip(envs, seeds):
        observations.append(env.reset(seed))
    limit = max_steps or envs[0].max_steps
    for _ in range(limit):
        if all(o is None for o in observations):
            break
        actions = rollout_policy.act(observations)
        for i, env in enumerate(envs):
            if observations[i] is None:
                continue
            try:
                obs, done, info = env.step(actions[i])
            except (ProtocolError, DomainError):
                failed[i] = True
                observations[i] = None
                continue
            infos[i] = info
            observations[i] = None if done else obs

    n_success = sum(1 for i, info in enumerate(infos)
                    if not failed[i] and info.get("success", False))
    return RunResult(
        task=task, family=family, regime=regime, split=split,
        n_episodes=len(seeds), n_success=n_success,
        success_rate=n_success / len(seeds),
        seeds=list(seeds), checkpoint=checkpoint,
        wall_time=time.monotonic() - t0,
        sampling_seed_base=sampling_seed_base,
        arch_label=ARCH_LABELS.get(family, family) if family else None,
    )


# ---------------------------------------------------------------------------
# Demo generation and pretext pretraining


def generate_demos(task: str, n_episodes: int, start_seed: int,
                   successful_only: bool = True, max_steps: int | None = None,
                   env_params: dict | None = None) -> list[EpisodeRecord]:
    """Roll the scripted expert and record episodes in the dataset layout."""
    episodes = []
    seed = start_seed
    attempts = 0
    while len(episodes) < n_episodes:
        env = make_env(task, **(env_params or {}))
        if max_steps:
            env = make_env(task, max_steps=max_steps, **(env_params or {}))
        obs = env.reset(seed)
        rng = np.random.default_rng(seed + EXPERT_NOISE_OFFSET)
        frames, lowdim, actions = [], [], []
        done = False
        info: dict = {}
        while not done:
            if task == "pusht2d":
                a = pusht_expert_action(obs["state"], env.params, rng)
            else:
                a = reach_expert_action(obs["state"], rng)
            frames.append(np.round(obs["frame"] * 255.0).astype(np.uint8)[None])
            lowdim.append(obs["lowdim"])
            actions.append(a.astype(np.float32))
            obs, done, info = env.step(a)
        record = EpisodeRecord(
            frames=np.stack(frames),
            lowdim=np.stack(lowdim).astype(np.float32),
            actions=np.stack(actions).astype(np.float32),
            meta={"seed": seed, "success": bool(info.get("success", False)),
                  "task": task},
        )
        attempts += 1
        seed += 1
        if record.meta["success"] or not successful_only:
            episodes.append(record)
        if attempts > n_episodes * 3 + 20:
            raise RuntimeError(f"expert failed too often on {task}: "
                               f"{len(episodes)}/{n_episodes} after {attempts} attempts")
    return episodes


def collect_random_frames(task: str, n_frames: int, seed: int) -> torch.Tensor:
    """Frames from random rollouts, for the pretext autoencoding run."""
    frames = []
    rng = np.random.default_rng(seed)
    ep_seed = seed
    while len(frames) < n_frames:
        env = make_env(task)
        obs = env.reset(ep_seed)
        ep_seed += 1
        done = False
        while not done and len(frames) < n_frames:
            frames.append(torch.from_numpy(obs["frame"]))
            try:
                obs, done, _ = env.step(rng.uniform(0.0, 1.0, 2))
            except (ProtocolError, DomainError):
                break
    return torch.stack(frames)


def ensure_pretrained_archive(cfg: dict, task: str, family: str, workdir) -> Path:
    """Produce (or reuse) the emulated pretrained-weight archive for a family."""
    workdir = Path(workdir)
    path = workdir / "pretrained" / f"{task}_{family}.weights"
    if path.exists():
        return path
    pt = cfg["pretrain"]
    torch.manual_seed(pt["seed"])
    rgb = cfg["policy"]["obs_encoder"]["rgb_model"]
    feature_dim = rgb["feature_dim"] or 64
    encoder = build_encoder(family, feature_dim)
    frames = collect_random_frames(task, pt["n_frames"], pt["frame_seed"])
    loss = train_pretext_autoencoder(encoder, frames, pt["steps"],
                                     batch_size=pt["batch_size"], lr=pt["lr"],
                                     seed=pt["seed"])
    save_encoder_weights(encoder, path, meta={
        "kind": "encoder-weights", "family": family, "task": task,
        "feature_dim": feature_dim, "pretext": "frame-autoencoder",
        "steps": pt["steps"], "final_loss": loss,
    })
    return path


# ---------------------------------------------------------------------------
# Matrix sweep


def cell_config(cfg: dict, task: str, family: str, regime: str,
                weights: str | None) -> dict:
    cell = copy.deepcopy(cfg)
    cell["task_name"] = task
    cell["task"]["task_name"] = task
    cell["task"]["name"] = f"{task}_image"
    cell["shape_meta"] = task_shape_meta(task)
    rgb = cell["policy"]["obs_encoder"]["rgb_model"]
    rgb["name"] = family
    rgb["pretrained"] = regime in ("frozen", "finetune")
    rgb["weights"] = weights if regime in ("frozen", "finetune") else None
    cell["training"]["freeze_encoder"] = regime == "frozen"
    return cell


def completed_cells(results_path) -> set[tuple]:
    done = set()
    for rec in read_results(results_path):
        done.add((rec["task"], rec["family"], rec["regime"], rec["split"]))
    return done


def train_cell(cell_cfg: dict, episodes: list[EpisodeRecord], checkpoint_path: Path,
               log=print) -> None:
    train_ds, val_ds, policy, trainer = build_training_stack(cell_cfg, episodes)
    epochs = cell_cfg["training"]["num_epochs"]
    for _ in range(epochs):
        metrics = trainer.train_epoch(train_ds, val_ds)
        if trainer.epoch % max(cell_cfg["training"]["checkpoint_every"], 1) == 0 \
                or trainer.epoch == epochs:
            checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
            trainer.save_checkpoint(checkpoint_path)
        log(f"    epoch {metrics['epoch']}/{epochs} "
            f"train_loss {metrics['train_loss']:.4f}"
            + (f" val_loss {metrics['val_loss']:.4f}" if "val_loss" in metrics else ""))
    checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    trainer.save_checkpoint(checkpoint_path)


def load_eval_policy(checkpoint_path) -> tuple[DiffusionPolicy, dict]:
    """Rebuild a policy from a checkpoint and install its EMA weights."""
    tensors, meta = load_checkpoint_tensors(checkpoint_path)
    cfg = meta["config"]
    from .data import Normalizer  # local import to avoid a cycle at module load

    def norm_from(prefix):
        k = f"norm/{prefix}/mins"
        if k not in tensors:
            return None
        return Normalizer(tensors[k].numpy(), tensors[f"norm/{prefix}/maxs"].numpy())

    policy = build_policy_from_config(cfg, norm_from("action"), norm_from("lowdim"),
                                      seed=cfg["training"]["seed"])
    use_ema = cfg["training"]["use_ema"]
    prefix = "ema/" if use_ema else "model/"
    params = {n[len(prefix):]: t for n, t in tensors.items() if n.startswith(prefix)}
    policy.install_params(params, "ema" if use_ema else "live")
    return policy, cfg


def eval_cell(cell_cfg: dict, checkpoint_path, split: str, episodes_meta: list[dict],
              n_episodes: int, canonical: bool = False,
              checkpoint_ref: str | None = None) -> RunResult:
    policy, cfg = load_eval_policy(checkpoint_path)
    task = cfg["task_name"]
    runner = cfg["task"]["env_runner"]
    if split == "train":
        seeds = [m["seed"] for m in episodes_meta][:n_episodes]
        if not seeds:
            raise ConfigurationError("train split requested but dataset has no seeds")
        start_seed = seeds[0]
    else:
        start_seed = runner["test_start_seed"]
        seeds = None
    sampling_base = (start_seed if seeds is None else seeds[0]) + SAMPLING_SEED_OFFSET
    rollout = DiffusionRollout(policy, sampling_base,
                               expect_source="ema" if cfg["training"]["use_ema"] else None)
    result = run_eval(
        rollout, lambda: make_env(task,
                                  **({"max_steps": runner["max_steps"]} if runner["max_steps"] else {})),
        n_episodes=n_episodes if seeds is None else len(seeds),
        start_seed=start_seed, seeds=seeds,
        task=task, family=cfg["policy"]["obs_encoder"]["rgb_model"]["name"],
        regime=_regime_name(cfg), split=split,
        checkpoint=checkpoint_ref or str(checkpoint_path),
        sampling_seed_base=sampling_base,
    )
    if result.regime != "scratch" and policy.obs_encoder is not None:
        n_params = sum(p.numel() for p in policy.obs_encoder.cameras[0].parameters())
        result.pretrain_dataset = "pretext-ae"
        result.pretrain_params = f"{n_params / 1e6:.1f}M"
    return result


def _regime_name(cfg: dict) -> str:
    if cfg["training"]["freeze_encoder"]:
        return "frozen"
    if cfg["policy"]["obs_encoder"]["rgb_model"]["pretrained"]:
        return "finetune"
    return "scratch"


def run_matrix(cfg: dict, workdir, log=print) -> Path:
    """Train and evaluate every (task, family, regime) cell; resumable."""
    workdir = Path(workdir)
    results_path = Path(cfg["run"]["results_file"] or workdir / "results.jsonl")
    canonical = cfg["matrix"]["canonical"]
    done = completed_cells(results_path)
    n_eval = cfg["matrix"]["n_eval_episodes"]

    for task in cfg["matrix"]["tasks"]:
        data_dir = Path(cfg["run"]["dataset_dir"] or workdir / "data") / task
        if not (data_dir / "index.json").exists():
            raise ConfigurationError(
                f"missing demos for task {task!r}: expected a dataset at {data_dir} "
                f"(run gen-demos first)")
        episodes, index = load_dataset(data_dir)
        for family in cfg["matrix"]["families"]:
            weights = None
            for regime in cfg["matrix"]["regimes"]:
                pending = [s for s in ("train", "test")
                           if (task, family, regime, s) not in done]
                ckpt = workdir / "checkpoints" / f"{task}_{family}_{regime}.ckpt"
                if not pending and ckpt.exists():
                    log(f"[skip] {task}/{family}/{regime} (complete)")
                    continue
                if regime in ("frozen", "finetune") and weights is None:
                    weights = str(ensure_pretrained_archive(cfg, task, family, workdir))
                cell = cell_config(cfg, task, family, regime, weights)
                if not ckpt.exists():
                    log(f"[train] {task}/{family}/{regime}")
                    train_cell(cell, episodes, ckpt, log=log)
                for split in pending:
                    log(f"[eval]  {task}/{family}/{regime} split={split}")
                    result = eval_cell(cell, ckpt, split, index["episodes"], n_eval,
                                       canonical=canonical)
                    append_result(results_path, result, canonical=canonical)
                    log(f"        success_rate {result.success_rate:.2f} "
                        f"({result.n_success}/{result.n_episodes})")
    return results_path

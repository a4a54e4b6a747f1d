"""Trainer contracts: schedules, EMA, optimizer semantics, checkpoints, resume."""

import math

import numpy as np
import pytest
import torch

from diffbench.errors import ArchiveError, ConfigurationError, ProtocolError
from diffbench.policy import DiffusionPolicy, ExecutionConfig
from diffbench.scheduler import build_schedule
from diffbench.training import (CHECKPOINT_FORMAT_VERSION, EmaConfig, EmaTracker,
                                NonFiniteLossError, TrainConfig, Trainer,
                                ema_decay, load_checkpoint_tensors, lr_at,
                                planned_total_steps)
from diffbench.unet import ConditionalUnet1d, DenoiserConfig

TOY = DenoiserConfig(action_dim=1, cond_dim=0, horizon=8, down_dims=(8, 16),
                     n_groups=4, step_embed_dim=8)


class SyntheticWindows:
    """Unconditional action windows around two fixed patterns."""

    def __init__(self, n, seed=0, dtype=torch.float32, horizon=8, action_dim=1):
        g = torch.Generator().manual_seed(seed)
        base = torch.linspace(-0.6, 0.6, horizon).reshape(horizon, 1).repeat(1, action_dim)
        noise = torch.randn(n, horizon, action_dim, generator=g) * 0.05
        signs = torch.where(torch.rand(n, 1, 1, generator=g) < 0.5, -1.0, 1.0)
        self.actions = (base * signs + noise).clamp(-1, 1).to(dtype)

    def __len__(self):
        return self.actions.shape[0]

    def collate(self, idx):
        return {"actions": self.actions[list(map(int, idx))]}


def toy_policy(seed=0, num_timesteps=16, dtype=torch.float32):
    torch.manual_seed(seed)
    unet = ConditionalUnet1d(TOY).to(dtype)
    sched = build_schedule("squaredcos_cap_v2", num_timesteps)
    return DiffusionPolicy(unet, None, sched, ExecutionConfig(2, 4, num_timesteps))


def toy_trainer(policy=None, **overrides):
    policy = policy or toy_policy()
    defaults = dict(base_lr=1e-3, warmup_steps=2, grad_accumulate=1, num_epochs=2,
                    batch_size=8, seed=42, use_ema=True)
    defaults.update(overrides)
    cfg = TrainConfig(**defaults)
    return Trainer(policy, cfg, total_steps=100, config_echo={"toy": True})


class TestLrSchedule:
    def test_analytic_values(self):
        cfg = TrainConfig(base_lr=1e-4, warmup_steps=500)
        total = 10_000
        assert lr_at(250, cfg, total) == pytest.approx(0.5e-4, abs=1e-12)
        assert lr_at(500, cfg, total) == pytest.approx(1.0e-4, abs=1e-12)
        assert lr_at(total, cfg, total) == pytest.approx(0.0, abs=1e-12)

    def test_zero_at_start_and_midpoint_cosine(self):
        cfg = TrainConfig(base_lr=2e-4, warmup_steps=100)
        assert lr_at(0, cfg, 1100) == 0.0
        assert lr_at(600, cfg, 1100) == pytest.approx(1e-4, abs=1e-12)

    def test_no_warmup(self):
        cfg = TrainConfig(base_lr=1e-3, warmup_steps=0)
        assert lr_at(0, cfg, 100) == 1e-3


class TestEma:
    def test_decay_values(self):
        cfg = EmaConfig()
        assert ema_decay(0, cfg) == 0.0
        assert ema_decay(15, cfg) == pytest.approx(0.875, abs=1e-12)
        assert ema_decay(10**9, cfg) == 0.9999

    def test_shadow_snaps_then_tracks(self):
        p = torch.nn.Parameter(torch.ones(3))
        ema = EmaTracker({"p": p})
        with torch.no_grad():
            p.mul_(2.0)
        ema.update({"p": p})  # decay(0) = 0 -> shadow = live
        assert torch.equal(ema.shadow["p"], torch.full((3,), 2.0))
        with torch.no_grad():
            p.mul_(2.0)
        ema.update({"p": p})  # decay(1) = 1 - 2^-0.75
        d = 1 - 2 ** -0.75
        expected = d * 2.0 + (1 - d) * 4.0
        assert torch.allclose(ema.shadow["p"], torch.full((3,), expected))

    def test_name_set_mismatch_rejected(self):
        ema = EmaTracker({"a": torch.nn.Parameter(torch.ones(1))})
        with pytest.raises(ConfigurationError):
            ema.update({"b": torch.nn.Parameter(torch.ones(1))})


class TestOptimizerSemantics:
    def test_zero_grad_step_is_pure_decoupled_decay(self):
        torch.manual_seed(0)
        model = torch.nn.Linear(4, 4, dtype=torch.float64)
        lr, wd = 1e-2, 1e-3
        opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.95, 0.999),
                                eps=1e-8, weight_decay=wd)
        before = {n: p.clone() for n, p in model.named_parameters()}
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        for n, p in model.named_parameters():
            delta = (before[n] - p).detach()
            # p *= (1 - lr*wd) rounds differently from lr*wd*p by a few ulps
            assert torch.allclose(delta, lr * wd * before[n], rtol=1e-10, atol=1e-18)

    def test_grad_accumulation_equivalence_full_precision(self):
        """accumulate=2 with batch 8 must equal accumulate=1 with batch 16."""
        ds = SyntheticWindows(16, dtype=torch.float64)
        g = torch.Generator().manual_seed(0)
        t = torch.randint(0, 16, (16,), generator=g)
        eps = torch.randn(16, 8, 1, dtype=torch.float64, generator=g)

        def one_update(micro_slices):
            policy = toy_policy(dtype=torch.float64)
            with torch.no_grad():
                for p in policy.unet.parameters():
                    p.uniform_(-0.1, 0.1, generator=torch.Generator().manual_seed(1))
            params = [p for _, p in policy.named_parameters()]
            opt = torch.optim.AdamW(params, lr=1e-3, betas=(0.95, 0.999),
                                    eps=1e-8, weight_decay=1e-6)
            opt.zero_grad()
            for sl in micro_slices:
                batch = {"actions": ds.actions[sl]}
                loss = policy.compute_loss(batch, g, t=t[sl], eps=eps[sl]) * len(sl) / 16
                loss.backward()
            opt.step()
            return {n: p.detach().clone() for n, p in policy.named_parameters()}

        accum = one_update([list(range(0, 8)), list(range(8, 16))])
        whole = one_update([list(range(0, 16))])
        for n in whole:
            diff = (accum[n] - whole[n]).abs().max()
            scale = whole[n].abs().max().clamp(min=1e-12)
            assert float(diff / scale) < 1e-12, n


class TestTrainEpoch:
    def test_zero_lr_leaves_parameters_unchanged(self):
        policy = toy_policy()
        trainer = toy_trainer(policy, base_lr=0.0, warmup_steps=0, num_epochs=1)
        before = {n: p.clone() for n, p in policy.named_parameters()}
        trainer.train_epoch(SyntheticWindows(32))
        for n, p in policy.named_parameters():
            assert torch.equal(p, before[n]), n

    def test_loss_decreases_over_five_epochs(self):
        policy = toy_policy(seed=3)
        trainer = toy_trainer(policy, base_lr=3e-3, warmup_steps=5,
                              grad_accumulate=1, batch_size=16)
        trainer.total_steps = planned_total_steps(200, trainer.cfg) * 3
        ds = SyntheticWindows(200, seed=4)
        losses = [trainer.train_epoch(ds)["train_loss"] for _ in range(5)]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_nonfinite_loss_aborts_with_diagnostics(self):
        policy = toy_policy()
        with torch.no_grad():
            policy.unet.head_proj.weight.fill_(float("nan"))
            policy.unet.head_proj.bias.fill_(float("nan"))

        class NanWindows(SyntheticWindows):
            pass

        trainer = toy_trainer(policy)
        with pytest.raises(NonFiniteLossError) as err:
            trainer.train_epoch(NanWindows(8))
        assert err.value.batch_indices

    def test_validation_loss_reported(self):
        trainer = toy_trainer()
        metrics = trainer.train_epoch(SyntheticWindows(16), SyntheticWindows(8, seed=9))
        assert "val_loss" in metrics and math.isfinite(metrics["val_loss"])


class TestCheckpoints:
    def _trained(self, tmp_path, epochs=2):
        policy = toy_policy(seed=5)
        trainer = toy_trainer(policy, num_epochs=epochs, base_lr=1e-3)
        ds = SyntheticWindows(32, seed=6)
        for _ in range(epochs):
            trainer.train_epoch(ds)
        path = tmp_path / "model.ckpt"
        trainer.save_checkpoint(path)
        return trainer, ds, path

    def test_save_load_save_byte_identical(self, tmp_path):
        trainer, _, path = self._trained(tmp_path)
        tensors, meta = load_checkpoint_tensors(path)
        fresh_policy = toy_policy(seed=99)
        fresh = toy_trainer(fresh_policy)
        fresh.restore(tensors, meta)
        second = tmp_path / "again.ckpt"
        fresh.total_steps = meta["total_steps"]
        fresh.config_echo = meta["config"]
        fresh.save_checkpoint(second)
        assert path.read_bytes() == second.read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        ds = SyntheticWindows(32, seed=6)

        def run(epochs, resume_from=None):
            policy = toy_policy(seed=5)
            trainer = toy_trainer(policy, num_epochs=4, base_lr=1e-3)
            if resume_from is not None:
                tensors, meta = load_checkpoint_tensors(resume_from)
                trainer.restore(tensors, meta)
            for _ in range(epochs):
                trainer.train_epoch(ds)
            return trainer

        full = run(4)
        half = run(2)
        mid = tmp_path / "mid.ckpt"
        half.save_checkpoint(mid)
        resumed = run(2, resume_from=mid)
        assert resumed.global_step == full.global_step
        for (n, a), (_, b) in zip(full.policy.named_parameters(),
                                  resumed.policy.named_parameters()):
            assert torch.equal(a, b), n
        for n in full.ema.shadow:
            assert torch.equal(full.ema.shadow[n], resumed.ema.shadow[n]), n

    def test_mismatched_config_shapes_rejected(self, tmp_path):
        _, _, path = self._trained(tmp_path)
        tensors, meta = load_checkpoint_tensors(path)
        other_cfg = DenoiserConfig(action_dim=1, cond_dim=0, horizon=8,
                                   down_dims=(16, 32), n_groups=4, step_embed_dim=8)
        torch.manual_seed(0)
        policy = DiffusionPolicy(ConditionalUnet1d(other_cfg),
                                 None, build_schedule("squaredcos_cap_v2", 16),
                                 ExecutionConfig(2, 4, 16))
        trainer = toy_trainer(policy)
        with pytest.raises(ArchiveError, match="shape|missing"):
            trainer.restore(tensors, meta)

    def test_format_version_enforced(self, tmp_path):
        from diffbench.archive import save_archive
        bad = tmp_path / "bad.ckpt"
        save_archive(bad, {"x": torch.zeros(1)}, meta={"kind": "checkpoint"},
                     format_version="ckpt-v0")
        with pytest.raises(ArchiveError):
            load_checkpoint_tensors(bad)

    def test_ema_weights_used_for_eval(self, tmp_path):
        from diffbench.bench import DiffusionRollout
        trainer, _, path = self._trained(tmp_path)
        live = trainer.policy
        assert live.params_source == "live"
        with pytest.raises(ProtocolError):
            DiffusionRollout(live, sampling_seed_base=0)
        live.install_params({n: t for n, t in trainer.ema.shadow.items()}, "ema")
        DiffusionRollout(live, sampling_seed_base=0)  # accepted now
        for n, p in live.named_parameters():
            assert torch.equal(p.detach(), trainer.ema.shadow[n]), n


class TestPlannedSteps:
    def test_counts(self):
        cfg = TrainConfig(batch_size=16, grad_accumulate=2, num_epochs=10)
        # 100 windows -> 7 micro-batches -> 4 optimizer steps per epoch
        assert planned_total_steps(100, cfg) == 40

    def test_max_train_steps_cap(self):
        cfg = TrainConfig(batch_size=16, grad_accumulate=1, num_epochs=3,
                          max_train_steps=2)
        assert planned_total_steps(100, cfg) == 6

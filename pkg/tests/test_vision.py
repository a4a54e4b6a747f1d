"""Perception contracts: preprocessing, encoder families, regimes, weight archives."""

import numpy as np
import pytest
import torch

from diffbench.errors import ArchiveError, ConfigurationError, DomainError
from diffbench.vision import (IMAGENET_MEAN, IMAGENET_STD, EncoderRegime,
                              ObservationEncoder, ObservationWindow, VitPatch16,
                              apply_regime, build_encoder, encode_window,
                              load_pretrained, preprocess_frames,
                              save_encoder_weights, train_pretext_autoencoder)


class TestPreprocess:
    def test_eval_center_crop_offset(self):
        frame = torch.zeros(1, 3, 84, 84)
        frame[0, :, 4, 4] = 1.0       # lands at crop (0, 0)
        frame[0, :, 79, 79] = 1.0     # lands at crop (75, 75)
        out = preprocess_frames(frame, "eval", imagenet_norm=False)
        assert out.shape == (1, 3, 76, 76)
        assert float(out[0, 0, 0, 0]) == 1.0
        assert float(out[0, 0, 75, 75]) == 1.0

    def test_train_crop_offsets_bounded_and_reproducible(self):
        frames = torch.rand(16, 3, 84, 84)
        a = preprocess_frames(frames, "train", torch.Generator().manual_seed(4),
                              imagenet_norm=False)
        b = preprocess_frames(frames, "train", torch.Generator().manual_seed(4),
                              imagenet_norm=False)
        assert torch.equal(a, b)
        # every crop is a contiguous 76x76 window of the source
        c = preprocess_frames(frames, "train", torch.Generator().manual_seed(5),
                              imagenet_norm=False)
        for i in range(16):
            found = False
            for oy in range(9):
                for ox in range(9):
                    if torch.equal(c[i], frames[i, :, oy:oy + 76, ox:ox + 76]):
                        found = True
                        break
                if found:
                    break
            assert found

    def test_standardization_constants(self):
        frame = torch.full((1, 3, 84, 84), 0.5)
        out = preprocess_frames(frame, "eval")
        for ch in range(3):
            expected = (0.5 - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch]
            vals = out[0, ch]
            assert torch.allclose(vals, torch.full_like(vals, expected), atol=1e-6)

    def test_input_too_small(self):
        with pytest.raises(DomainError):
            preprocess_frames(torch.rand(1, 3, 60, 60), "eval")

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            preprocess_frames(torch.rand(1, 3, 84, 84), "test")


class TestObservationWindow:
    def test_valid(self):
        w = ObservationWindow(torch.rand(2, 1, 3, 84, 84), torch.rand(2, 2))
        assert w.n_obs_steps == 2

    def test_bad_range(self):
        with pytest.raises(DomainError):
            ObservationWindow(torch.rand(2, 1, 3, 84, 84) + 1.0, torch.rand(2, 2))

    def test_mismatched_lowdim(self):
        with pytest.raises(DomainError):
            ObservationWindow(torch.rand(2, 1, 3, 84, 84), torch.rand(3, 2))


class TestEncoders:
    def test_cnn_feature_shape(self):
        enc = build_encoder("resnet_style_cnn", 32)
        out = enc(torch.rand(4, 3, 76, 76))
        assert out.shape == (4, 32)

    def test_vit_feature_shape_and_resize(self):
        enc = build_encoder("vit_patch16", 32)
        # 76x76 is not patch-divisible; the encoder resizes to 80x80 internally
        out = enc(torch.rand(4, 3, 76, 76))
        assert out.shape == (4, 32)
        assert isinstance(enc, VitPatch16) and enc.input_size == 80

    def test_unknown_family(self):
        with pytest.raises(ConfigurationError):
            build_encoder("convnext", 32)

    def test_no_batch_statistics_anywhere(self):
        for family in ("resnet_style_cnn", "vit_patch16"):
            enc = build_encoder(family, 16)
            names = list(enc.state_dict()) + [n for n, _ in enc.named_buffers()]
            assert not any("running_mean" in n or "running_var" in n for n in names), family

    def test_cond_dim_toy_layout(self):
        enc = ObservationEncoder("resnet_style_cnn", 64, n_cameras=1, lowdim_dim=2,
                                 n_obs_steps=2)
        assert enc.cond_dim == 2 * (64 + 2) == 132

    def test_cond_dim_two_camera_layout(self):
        enc = ObservationEncoder("resnet_style_cnn", 8, n_cameras=2, lowdim_dim=9,
                                 n_obs_steps=2)
        assert enc.cond_dim == 2 * (2 * 8 + 9)
        out = enc(torch.rand(3, 2, 2, 3, 76, 76), torch.rand(3, 2, 9))
        assert out.shape == (3, enc.cond_dim)

    def test_zero_images_zero_head_passes_lowdim_through(self):
        enc = ObservationEncoder("resnet_style_cnn", 4, n_cameras=1, lowdim_dim=2,
                                 n_obs_steps=2)
        with torch.no_grad():
            for cam in enc.cameras:
                cam.head.weight.zero_()
                cam.head.bias.zero_()
        lowdim = torch.rand(1, 2, 2)
        out = enc(torch.zeros(1, 2, 1, 3, 76, 76), lowdim)
        per_step = out.reshape(2, 6)
        assert torch.equal(per_step[:, :4], torch.zeros(2, 4))
        assert torch.equal(per_step[:, 4:], lowdim[0])

    def test_camera_count_mismatch(self):
        enc = ObservationEncoder("resnet_style_cnn", 4, n_cameras=2, lowdim_dim=2,
                                 n_obs_steps=2)
        with pytest.raises(ConfigurationError):
            enc(torch.rand(1, 2, 1, 3, 76, 76), torch.rand(1, 2, 2))

    def test_encode_window_single(self):
        enc = ObservationEncoder("resnet_style_cnn", 8, n_cameras=1, lowdim_dim=2,
                                 n_obs_steps=2)
        w = ObservationWindow(torch.rand(2, 1, 3, 84, 84), torch.rand(2, 2))
        vec = encode_window(w, enc)
        assert vec.shape == (enc.cond_dim,)


class TestRegimes:
    def test_validation(self):
        EncoderRegime("scratch")
        EncoderRegime("frozen", "weights.bin")
        EncoderRegime("finetune", "weights.bin")
        with pytest.raises(ConfigurationError):
            EncoderRegime("scratch", "weights.bin")
        with pytest.raises(ConfigurationError):
            EncoderRegime("frozen")
        with pytest.raises(ConfigurationError):
            EncoderRegime("distill")

    def test_apply_regime_masks(self):
        enc = build_encoder("resnet_style_cnn", 8)
        mask = apply_regime(enc, EncoderRegime("frozen", "x"))
        assert all(v is False for v in mask.values())
        assert all(not p.requires_grad for p in enc.parameters())
        mask = apply_regime(enc, EncoderRegime("finetune", "x"))
        assert all(v is True for v in mask.values())

    def test_frozen_bitwise_immutable_under_training(self):
        torch.manual_seed(0)
        enc = build_encoder("resnet_style_cnn", 8)
        head = torch.nn.Linear(8, 1)
        apply_regime(enc, EncoderRegime("frozen", "x"))
        before = {n: p.clone() for n, p in enc.named_parameters()}
        opt = torch.optim.AdamW([p for p in head.parameters()], lr=1e-2)
        for _ in range(100):
            loss = head(enc(torch.rand(2, 3, 76, 76))).pow(2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        for n, p in enc.named_parameters():
            assert torch.equal(p, before[n]), n

    def test_finetune_changes_encoder(self):
        torch.manual_seed(0)
        enc = build_encoder("resnet_style_cnn", 8)
        apply_regime(enc, EncoderRegime("finetune", "x"))
        before = {n: p.clone() for n, p in enc.named_parameters()}
        opt = torch.optim.AdamW(enc.parameters(), lr=1e-3)
        for _ in range(20):
            loss = enc(torch.rand(2, 3, 76, 76)).pow(2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert any(not torch.equal(p, before[n]) for n, p in enc.named_parameters())

    def test_scratch_seeds_differ(self):
        torch.manual_seed(1)
        a = build_encoder("resnet_style_cnn", 8)
        torch.manual_seed(2)
        b = build_encoder("resnet_style_cnn", 8)
        diffs = [not torch.equal(pa, pb) for (_, pa), (_, pb)
                 in zip(a.named_parameters(), b.named_parameters())]
        assert any(diffs)


class TestWeightArchives:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(3)
        enc = build_encoder("resnet_style_cnn", 8)
        path = tmp_path / "enc.weights"
        save_encoder_weights(enc, path, meta={"family": "resnet_style_cnn"})
        torch.manual_seed(4)
        other = build_encoder("resnet_style_cnn", 8)
        load_pretrained(other, path)
        for (n, a), (_, b) in zip(enc.state_dict().items(), other.state_dict().items()):
            assert torch.equal(a, b), n

    def test_missing_tensor_named(self, tmp_path):
        from diffbench.archive import save_archive
        enc = build_encoder("resnet_style_cnn", 8)
        state = dict(enc.state_dict())
        removed = sorted(state)[0]
        del state[removed]
        path = tmp_path / "partial.weights"
        save_archive(path, state, meta={}, format_version="ckpt-v1")
        with pytest.raises(ArchiveError, match=removed.replace(".", r"\.")):
            load_pretrained(enc, path)

    def test_surplus_tensors_reported(self, tmp_path):
        from diffbench.archive import save_archive
        enc = build_encoder("resnet_style_cnn", 8)
        state = dict(enc.state_dict())
        state["classifier.weight"] = torch.zeros(10, 8)
        path = tmp_path / "extra.weights"
        save_archive(path, state, meta={}, format_version="ckpt-v1")
        with pytest.warns(UserWarning):
            surplus = load_pretrained(enc, path)
        assert surplus == ["classifier.weight"]

    def test_shape_mismatch(self, tmp_path):
        enc8 = build_encoder("resnet_style_cnn", 8)
        path = tmp_path / "f8.weights"
        save_encoder_weights(enc8, path)
        enc16 = build_encoder("resnet_style_cnn", 16)
        with pytest.raises(ArchiveError, match="shape"):
            load_pretrained(enc16, path)


class TestPretext:
    def test_autoencoder_reduces_loss(self):
        torch.manual_seed(0)
        enc = build_encoder("resnet_style_cnn", 16)
        frames = torch.rand(24, 3, 84, 84)
        first = train_pretext_autoencoder(enc, frames, steps=1, batch_size=8, seed=0)
        torch.manual_seed(0)
        enc2 = build_encoder("resnet_style_cnn", 16)
        final = train_pretext_autoencoder(enc2, frames, steps=30, batch_size=8, seed=0)
        assert final < first

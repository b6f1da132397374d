import json
import subprocess
import sys
import textwrap

import numpy as np
import pytest
import torch

from frinet.backbone import random_backbone, weight_checksum
from frinet.data import sample_episode
from frinet.engine import (Checkpoint, FeatureCache, TrainConfig, TrainingDiverged, build_model, collate,
                           evaluate, forward_episode, model_from_checkpoint, run_model, train)
from frinet.head import FusionHead
from frinet.matching import masked_average_pool
from frinet.model import FRINet


def small_config(**kw):
    base = dict(input_size=64, hidden=8, head_hidden=8, epochs=2, steps_per_epoch=4, batch_size=2,
                learning_rate=0.01, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def trained(small_dataset, toy_backbone):
    cfg = small_config()
    return cfg, train(small_dataset, small_dataset.split(0), cfg, backbone=toy_backbone)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 5e-3
        assert cfg.batch_size == 4
        assert cfg.epochs_1shot == 100 and cfg.epochs_5shot == 50
        assert cfg.mu == 0.25
        assert cfg.momentum == 0.9 and cfg.optimizer == "sgd"
        assert cfg.input_size == 256
        assert cfg.orientations == (0, 90, 180, 270)

    def test_epochs_per_shot(self):
        assert TrainConfig(shots=1).num_epochs == 100
        assert TrainConfig(shots=5).num_epochs == 50
        assert TrainConfig(shots=5, epochs=3).num_epochs == 3

    @pytest.mark.parametrize("orientations", [(90, 180), (0, 0, 90), (0, 45)])
    def test_bad_orientations(self, orientations):
        with pytest.raises(ValueError):
            TrainConfig(orientations=orientations)

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            TrainConfig(mu=-1)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="adam")

    def test_text_round_trip(self, tmp_path):
        cfg = TrainConfig(orientations=(0, 180), epochs=7, rotation_aug=True, seed=3)
        path = tmp_path / "cfg.txt"
        path.write_text(cfg.to_text())
        back = TrainConfig.from_file(path)
        assert back == cfg
        assert back.digest() == cfg.digest()

    def test_text_parsing(self):
        cfg = TrainConfig.from_text("# comment\nlearning_rate = 0.1\norientations=0,90\n\nflip=false\n", fold=2)
        assert cfg.learning_rate == 0.1 and cfg.orientations == (0, 90) and not cfg.flip and cfg.fold == 2
        with pytest.raises(ValueError):
            TrainConfig.from_text("nonsense_key=1")
        with pytest.raises(ValueError):
            TrainConfig.from_text("learning_rate")


class TestForward:
    def test_single_orientation(self, small_dataset, toy_backbone):
        model = FRINet(toy_backbone, orientations=(0,), hidden=8, head_hidden=8)
        ep = sample_episode(small_dataset, small_dataset.split(0), "test", 1, rng_seed=2)
        fused, branches = forward_episode(ep, model)
        assert list(branches) == [0]
        assert isinstance(model.fusion, FusionHead) and model.fusion.n_branches == 1
        expected = model.fusion(branches[0].logits[None, None])[0]
        assert torch.allclose(fused.logits, expected)
        assert fused.logits.shape == (2, 64, 64)

    def test_all_orientations(self, small_dataset, toy_backbone):
        model = FRINet(toy_backbone, hidden=8, head_hidden=8)
        ep = sample_episode(small_dataset, small_dataset.split(0), "test", 1, rng_seed=2)
        fused, branches = forward_episode(ep, model)
        assert list(branches) == [0, 90, 180, 270]
        assert all(b.logits.shape == (2, 64, 64) for b in branches.values())
        assert fused.orientation == "fused"

    def test_five_shot_prototypes_are_shot_means(self, small_dataset, toy_backbone):
        from frinet.data import rotate_exact

        model = FRINet(toy_backbone, hidden=8, head_hidden=8).eval()
        ep = sample_episode(small_dataset, small_dataset.split(1), "test", 5, rng_seed=3)
        with torch.no_grad():
            out = run_model(model, collate([ep]))
            for i, a in enumerate(model.orientations):
                per_shot = [masked_average_pool(toy_backbone(rotate_exact(s.image, a)[None])[0],
                                                rotate_exact(s.mask, a)) for s in ep.supports]
                assert torch.allclose(out.prototypes[0, i], torch.stack(per_shot).mean(0), atol=1e-5)

    def test_learnable_parameters_exclude_backbone(self, toy_backbone):
        model = FRINet(toy_backbone, hidden=8, head_hidden=8)
        names = [n for n, _ in model.named_parameters()]
        assert names and not any(n.startswith("backbone") for n in names)
        assert all(k.split(".")[0] in ("activation", "head", "fusion") for k in model.state_dict())

    def test_nan_reports_stage(self, small_dataset, toy_backbone):
        model = FRINet(toy_backbone, hidden=8, head_hidden=8)
        ep = sample_episode(small_dataset, small_dataset.split(0), "test", 1, rng_seed=2)
        batch = collate([ep])
        batch.query_images[0, 0, 0, 0] = float("nan")
        with pytest.raises(FloatingPointError, match="feature extraction"):
            run_model(model, batch)

    def test_feature_cache_matches_direct(self, small_dataset, toy_backbone):
        model = FRINet(toy_backbone, hidden=8, head_hidden=8).eval()
        ep = sample_episode(small_dataset, small_dataset.split(0), "test", 1, rng_seed=2)
        with torch.no_grad():
            direct = run_model(model, collate([ep])).fused
            model.feature_cache = FeatureCache(toy_backbone)
            cached = run_model(model, collate([ep])).fused
            again = run_model(model, collate([ep])).fused
        assert torch.equal(direct, cached) and torch.equal(cached, again)
        model.feature_cache = FeatureCache(random_backbone(5))
        with pytest.raises(ValueError):
            run_model(model, collate([ep]))

    def test_bad_mode(self, small_dataset, toy_backbone):
        model = FRINet(toy_backbone, hidden=8, head_hidden=8)
        ep = sample_episode(small_dataset, small_dataset.split(0), "test", 1, rng_seed=2)
        with pytest.raises(ValueError):
            forward_episode(ep, model, mode="predict")


class TestTrain:
    def test_loss_decreases(self, small_dataset, toy_backbone):
        cfg = small_config(epochs=3, steps_per_epoch=12, batch_size=4, learning_rate=0.02)
        ckpt = train(small_dataset, small_dataset.split(0), cfg, backbone=toy_backbone)
        losses = [m["loss"] for m in ckpt.metric_log]
        assert len(losses) == 3
        assert losses[-1] < losses[0]

    def test_backbone_untouched(self, small_dataset, toy_backbone):
        before = weight_checksum(toy_backbone)
        train(small_dataset, small_dataset.split(0), small_config(epochs=1), backbone=toy_backbone)
        assert weight_checksum(toy_backbone) == before

    def test_deterministic_loss_curve(self, small_dataset, toy_backbone, trained):
        cfg, first = trained
        second = train(small_dataset, small_dataset.split(0), cfg, backbone=toy_backbone)
        a = [m["loss"] for m in first.metric_log]
        b = [m["loss"] for m in second.metric_log]
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)
        for k in first.learnable_params:
            assert torch.equal(first.learnable_params[k], second.learnable_params[k])

    def test_divergence_guard(self, small_dataset, toy_backbone):
        cfg = small_config(epochs=2, divergence_threshold=0.0)
        with pytest.raises(TrainingDiverged) as err:
            train(small_dataset, small_dataset.split(0), cfg, backbone=toy_backbone)
        assert err.value.last_good is None

    def test_divergence_keeps_last_good(self, small_dataset, toy_backbone, monkeypatch):
        import frinet.engine as engine

        calls = {"n": 0}
        real = engine.episode_losses

        def flaky(out, gt, mu):
            calls["n"] += 1
            bundle = real(out, gt, mu)
            if calls["n"] > 4:  # first epoch has 4 steps
                bundle.loss_all = bundle.loss_all * float("nan")
            return bundle

        monkeypatch.setattr(engine, "episode_losses", flaky)
        with pytest.raises(TrainingDiverged) as err:
            train(small_dataset, small_dataset.split(0), small_config(epochs=2), backbone=toy_backbone)
        assert err.value.last_good is not None and err.value.last_good.epoch == 1

    def test_needs_backbone(self, small_dataset):
        with pytest.raises(ValueError):
            train(small_dataset, small_dataset.split(0), small_config())

    def test_writes_checkpoints(self, small_dataset, toy_backbone, tmp_path):
        train(small_dataset, small_dataset.split(0), small_config(epochs=2), backbone=toy_backbone,
              out_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["epoch_001.json", "epoch_001.pt", "epoch_002.json", "epoch_002.pt",
                         "final.json", "final.pt"]


class TestCheckpoint:
    def test_round_trip_bit_exact(self, trained, small_dataset, toy_backbone, tmp_path):
        cfg, ckpt = trained
        ckpt.save(tmp_path / "c.pt")
        back = Checkpoint.load(tmp_path / "c.pt")
        assert back.config == cfg and back.epoch == ckpt.epoch and back.metric_log == ckpt.metric_log
        ep = sample_episode(small_dataset, small_dataset.split(0), "test", 1, rng_seed=9, input_size=64)
        a, _ = forward_episode(ep, model_from_checkpoint(ckpt, toy_backbone))
        b, _ = forward_episode(ep, model_from_checkpoint(back, toy_backbone))
        assert torch.equal(a.logits, b.logits)

    def test_corruption_detected(self, trained, tmp_path):
        _, ckpt = trained
        path = ckpt.save(tmp_path / "c.pt")
        meta = json.loads(path.with_suffix(".json").read_text())
        meta["params_checksum"] = "0" * 64
        path.with_suffix(".json").write_text(json.dumps(meta))
        with pytest.raises(ValueError, match="checksum"):
            Checkpoint.load(path)

    def test_backbone_referenced_not_copied(self, trained):
        _, ckpt = trained
        assert not any(k.startswith("backbone") or k.startswith("blocks") for k in ckpt.learnable_params)
        assert ckpt.backbone_ref.metadata["weight_checksum"]


class TestEvaluate:
    def test_zero_episodes(self, trained, small_dataset, toy_backbone):
        cfg, ckpt = trained
        rep = evaluate(small_dataset, small_dataset.split(0), cfg, ckpt, 0, backbone=toy_backbone)
        assert rep.status == "no episodes" and rep.num_episodes == 0 and rep.per_class_iou == {}

    def test_same_seed_same_report(self, trained, small_dataset, toy_backbone):
        cfg, ckpt = trained
        a = evaluate(small_dataset, small_dataset.split(0), cfg, ckpt, 12, seed=4, backbone=toy_backbone)
        b = evaluate(small_dataset, small_dataset.split(0), cfg, ckpt, 12, seed=4, backbone=toy_backbone)
        assert a.to_json() == b.to_json()
        assert set(a.per_class_iou) <= set(small_dataset.split(0).novel_classes)

    def test_untrained_floor(self, small_dataset, toy_backbone):
        cfg = small_config()
        model = build_model(cfg, toy_backbone)
        rep = evaluate(small_dataset, small_dataset.split(0), cfg, model, 20, seed=0)
        assert 0.0 <= rep.miou <= 1.0
        assert all(0.0 <= v <= 1.0 for v in rep.per_class_iou.values())

    def test_batch_size_does_not_change_report(self, trained, small_dataset, toy_backbone):
        cfg, ckpt = trained
        a = evaluate(small_dataset, small_dataset.split(0), cfg, ckpt, 10, seed=1, batch_size=3,
                     backbone=toy_backbone)
        b = evaluate(small_dataset, small_dataset.split(0), cfg, ckpt, 10, seed=1, batch_size=10,
                     backbone=toy_backbone)
        assert a.per_class_iou == b.per_class_iou

    def test_cross_process_determinism(self, tmp_path):
        script = textwrap.dedent("""
            import hashlib, torch
            from frinet.backbone import random_backbone
            from frinet.data import sample_episode
            from frinet.engine import TrainConfig, build_model, forward_episode
            from frinet.synthetic import generate_synthetic_dataset
            torch.set_num_threads(1)
            ds = generate_synthetic_dataset(num_images=20, rng_seed=5)
            model = build_model(TrainConfig(hidden=8, head_hidden=8, seed=1), random_backbone(2))
            ep = sample_episode(ds, ds.split(0), "test", 1, rng_seed=3)
            fused, _ = forward_episode(ep, model)
            print(hashlib.sha256(fused.logits.numpy().tobytes()).hexdigest())
        """)
        outs = [subprocess.run([sys.executable, "-c", script], capture_output=True, text=True, check=True).stdout
                for _ in range(2)]
        assert outs[0] == outs[1] and len(outs[0].strip()) == 64

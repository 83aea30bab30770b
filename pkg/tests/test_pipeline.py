import os

import numpy as np
import pytest
import torch

from proxyclust import pipeline
from proxyclust.config import toy_profile
from proxyclust.data import SynthSpec, generate_synthetic, load_dataset
from proxyclust.distill import param_hash
from proxyclust.errors import BackboneStateError


def small_cfg(**kw):
    args = dict(
        total_steps=50, t_hat=8, t_tilde=4, block=6,
        d_txt=16, extractor_width=12, extractor_pool=2,
        epochs=6, warmup_epochs=2, batch_size=8, lr=1e-3,
        clusters=3, n_neighbors=3, bank_size=24,
        toy_base=8, toy_tdim=16, pretrain_epochs=6,
        kmeans_restarts=2, image_size=32,
    )
    args.update(kw)
    return toy_profile(**args)


@pytest.fixture(scope="module")
def tiny_world(tmp_path_factory):
    """24-image dataset plus a matching pretrained frozen backbone."""
    root = tmp_path_factory.mktemp("world")
    spec = SynthSpec(classes=3, per_class=8, image_size=32)
    manifest = generate_synthetic(spec, 21, root)
    cfg = small_cfg(data_manifest=str(manifest))
    ds = load_dataset(manifest)
    bb, _ = pipeline.pretrain_backbone(cfg, dataset=ds, log_every=0)
    return cfg, ds, bb


class TestFeatureCache:
    def test_matches_direct_taps(self, tiny_world):
        cfg, ds, bb = tiny_world
        cache = pipeline.FeatureCache(bb, ds.images, cfg.t_hat, cfg.block, batch_size=7)
        direct = bb.tap_feature(ds.images[5:9], cfg.t_hat, b=cfg.block).z
        assert torch.allclose(cache[[5, 6, 7, 8]], direct, atol=1e-6)
        assert cache.channels == direct.shape[1]


class TestSeedDerivation:
    def test_disjoint_purposes_disjoint_streams(self):
        a = pipeline.derive_rng(3, pipeline.P_DRAW, 0, 0).integers(0, 1 << 30, 8)
        b = pipeline.derive_rng(3, pipeline.P_SHUFFLE, 0, 0).integers(0, 1 << 30, 8)
        c = pipeline.derive_rng(3, pipeline.P_DRAW, 0, 1).integers(0, 1 << 30, 8)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_reproducible(self):
        assert pipeline.derive_seed(9, 1, 2, 3) == pipeline.derive_seed(9, 1, 2, 3)


class TestStagedProtocol:
    @pytest.fixture(scope="class")
    def result(self, tiny_world):
        cfg, ds, bb = tiny_world
        return pipeline.run_training(cfg, dataset=ds, backbone=bb)

    def test_history_covers_every_epoch(self, result):
        assert [r["epoch"] for r in result.history] == list(range(6))

    def test_warmup_probes_with_kmeans_then_head(self, result):
        modes = [r["eval_mode"] for r in result.history]
        assert modes == ["kmeans", "kmeans", "head", "head", "head", "head"]

    def test_guidance_losses_appear_at_the_boundary(self, result):
        for r in result.history[:2]:
            assert np.isnan(r["loss_nb"]) and np.isnan(r["loss_en"])
        for r in result.history[2:]:
            assert np.isfinite(r["loss_nb"]) and np.isfinite(r["loss_en"])

    def test_rebuild_count(self, result):
        # one initial build plus one per guided epoch: epochs - warmup + 1
        assert result.rebuilds == 6 - 2 + 1

    def test_head_and_bank_exist_after(self, result):
        assert result.head is not None
        assert result.bank is not None and len(result.bank) > 0
        assert result.final_mode == "head"
        assert result.final_pred.shape == (24,)

    def test_losses_never_see_labels(self, tiny_world):
        # swapping in degenerate labels must change reported metrics only,
        # never the trained model
        cfg, ds, bb = tiny_world
        relabeled = load_dataset(cfg.data_manifest)
        relabeled.labels = np.zeros(24, dtype=np.int64)
        relabeled.labels[-1] = 1
        a = pipeline.run_training(cfg, dataset=ds, backbone=bb)
        b = pipeline.run_training(cfg, dataset=relabeled, backbone=bb)
        assert param_hash(a.extractor) == param_hash(b.extractor)
        assert param_hash(a.head) == param_hash(b.head)
        assert a.history[-1]["acc"] != b.history[-1]["acc"]


class TestGuidanceOff:
    def test_kmeans_only_run(self, tiny_world):
        cfg, ds, bb = tiny_world
        cfg = cfg.replace(guidance=False, epochs=3)
        res = pipeline.run_training(cfg, dataset=ds, backbone=bb)
        assert res.head is None
        assert res.final_mode == "kmeans"
        assert res.centroids is not None and res.centroids.shape == (3, cfg.d_txt)
        assert res.rebuilds == 0
        assert all(np.isnan(r["loss_nb"]) for r in res.history)


class TestValidationPaths:
    def test_trainable_backbone_rejected(self, tiny_world):
        cfg, ds, _ = tiny_world
        fresh = pipeline.make_toy_backbone(cfg, 32)
        with pytest.raises(BackboneStateError):
            pipeline.run_training(cfg, dataset=ds, backbone=fresh)

    def test_schedule_mismatch_rejected(self, tiny_world):
        cfg, ds, bb = tiny_world
        with pytest.raises(ValueError, match="schedule mismatch"):
            pipeline.run_training(cfg.replace(total_steps=60), dataset=ds, backbone=bb)

    def test_missing_backbone_checkpoint(self, tiny_world):
        cfg, ds, _ = tiny_world
        cfg = cfg.replace(backbone_path="/nonexistent/bb.pt")
        with pytest.raises(BackboneStateError):
            pipeline.run_training(cfg, dataset=ds)


class TestResume:
    def test_interrupted_run_replays_exactly(self, tiny_world, tmp_path):
        cfg, ds, bb = tiny_world
        full = pipeline.run_training(cfg, dataset=ds, backbone=bb)

        ck = str(tmp_path / "part.pt")
        pipeline.run_training(cfg, dataset=ds, backbone=bb, save_to=ck, stop_after=4)
        resumed = pipeline.run_training(cfg, dataset=ds, backbone=bb, resume=ck)

        assert param_hash(resumed.extractor) == param_hash(full.extractor)
        assert param_hash(resumed.head) == param_hash(full.head)
        assert len(resumed.history) == len(full.history)
        for ra, rb in zip(full.history, resumed.history):
            assert ra.keys() == rb.keys()
            for k in ra:
                both_nan = (isinstance(ra[k], float)
                            and np.isnan(ra[k]) and np.isnan(rb[k]))
                assert both_nan or ra[k] == rb[k], (k, ra[k], rb[k])
        np.testing.assert_array_equal(
            resumed.bank.tensor().numpy(), full.bank.tensor().numpy()
        )

    def test_resume_rejects_other_config(self, tiny_world, tmp_path):
        cfg, ds, bb = tiny_world
        ck = str(tmp_path / "part.pt")
        pipeline.run_training(cfg, dataset=ds, backbone=bb, save_to=ck, stop_after=3)
        with pytest.raises(ValueError, match="config"):
            pipeline.run_training(cfg.replace(lr=2e-3), dataset=ds, backbone=bb, resume=ck)


class TestInferenceAndExport:
    def test_inference_matches_training_assignments(self, tiny_world, tmp_path):
        cfg, ds, bb = tiny_world
        ck = str(tmp_path / "run.pt")
        res = pipeline.run_training(cfg, dataset=ds, backbone=bb, save_to=ck)
        pred, probs, relpaths = pipeline.run_inference(ck, dataset=ds, backbone=bb)
        np.testing.assert_array_equal(pred, res.final_pred)
        assert probs.shape == (24, 3)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)
        assert relpaths == ds.relpaths

    def test_inference_through_centroids(self, tiny_world, tmp_path):
        cfg, ds, bb = tiny_world
        cfg = cfg.replace(guidance=False, epochs=2)
        ck = str(tmp_path / "km.pt")
        res = pipeline.run_training(cfg, dataset=ds, backbone=bb, save_to=ck)
        pred, probs, _ = pipeline.run_inference(ck, dataset=ds, backbone=bb)
        np.testing.assert_array_equal(pred, res.final_pred)
        assert set(np.unique(probs)) <= {0.0, 1.0}

    def test_inference_needs_head_or_centroids(self, tiny_world, tmp_path):
        cfg, ds, bb = tiny_world
        cfg = cfg.replace(guidance=False, epochs=2)
        res = pipeline.run_training(cfg, dataset=ds, backbone=bb)
        blob = {
            "config": __import__("dataclasses").asdict(cfg),
            "extractor": res.extractor.state_dict(),
            "extractor_in": res.extractor.features[0].in_channels,
            "head": None, "bank": None, "optimizer": {}, "epoch": 1,
            "history": [], "rebuilds": 0, "centroids": None,
        }
        with pytest.raises(BackboneStateError):
            pipeline.run_inference(blob, dataset=ds, backbone=bb)

    def test_assignment_table_round_trip(self, tiny_world, tmp_path):
        cfg, ds, bb = tiny_world
        res = pipeline.run_training(cfg, dataset=ds, backbone=bb)
        probs = np.full((24, 3), 1.0 / 3)
        path = str(tmp_path / "assign.tsv")
        pipeline.export_assignments(path, ds.relpaths, res.final_pred, probs)
        relback, predback = pipeline.read_assignments(path)
        assert relback == ds.relpaths
        np.testing.assert_array_equal(predback, res.final_pred)

    def test_history_table(self, tmp_path):
        rows = [
            {"epoch": 0, "loss_sd": 0.5, "loss_nb": float("nan"), "loss_en": float("nan"),
             "acc": 0.5, "nmi": 0.1, "eval_mode": "kmeans", "c_pred": 3},
            {"epoch": 1, "loss_sd": 0.4, "loss_nb": 1.0, "loss_en": 1.3,
             "acc": 0.6, "nmi": 0.2, "eval_mode": "head", "c_pred": 3},
        ]
        path = str(tmp_path / "h.tsv")
        pipeline.write_history(path, rows)
        lines = open(path).read().splitlines()
        assert lines[0].split("\t") == [
            "epoch", "loss_sd", "loss_nb", "loss_en", "acc", "nmi", "eval_mode", "c_pred"
        ]
        assert len(lines) == 3
        assert lines[2].split("\t")[6] == "head"

import numpy as np
import pytest
import torch

from proxyclust.backbone import ExternalBackbone, ToyBackbone, pretrain_toy
from proxyclust.diffusion import make_schedule
from proxyclust.errors import BackboneStateError


def tiny_backbone(**kw):
    args = dict(image_size=16, base=8, d_txt=8, heads=2, t_dim=16,
                schedule=make_schedule(50), init_seed=3)
    args.update(kw)
    return ToyBackbone(**args)


def smooth_images(n, size=16, seed=0):
    """Low-frequency sine mixtures; learnable with a tiny denoiser."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    imgs = np.zeros((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        for c in range(3):
            fa, fb = rng.uniform(0.5, 2.0, 2)
            pa, pb = rng.uniform(0.0, 2 * np.pi, 2)
            imgs[i, c] = (np.sin(fa * 2 * np.pi * xx + pa) * 0.5
                          + np.cos(fb * 2 * np.pi * yy + pb) * 0.4)
    return torch.from_numpy(np.clip(imgs, -1.0, 1.0))


@pytest.fixture(scope="module")
def trained():
    """A very small backbone pretrained briefly on random smooth images."""
    torch.manual_seed(0)
    imgs = smooth_images(24, seed=0)
    bb = tiny_backbone()
    pretrain_toy(bb, imgs, epochs=20, batch_size=8, lr=3e-3, seed=0)
    return bb, imgs


class TestCondition:
    def test_empty_prompt_is_deterministic(self):
        bb = tiny_backbone()
        a = bb.encode_condition(batch=2)
        b = bb.encode_condition(batch=2)
        assert torch.equal(a.tokens, b.tokens)
        assert a.eot_index == b.eot_index

    def test_proxies_differ_only_at_word_slot(self):
        bb = tiny_backbone()
        u = torch.randn(2, 8)
        v = torch.randn(2, 8)
        cu = bb.encode_condition(proxy=u).tokens
        cv = bb.encode_condition(proxy=v).tokens
        slot = bb.proxy_slot
        for pos in range(cu.shape[1]):
            if pos == slot:
                assert not torch.equal(cu[:, pos], cv[:, pos])
            else:
                assert torch.equal(cu[:, pos], cv[:, pos])

    def test_eot_is_last_template_position(self):
        bb = tiny_backbone()
        cond = bb.encode_condition(proxy=torch.randn(8))
        assert cond.eot_index == cond.tokens.shape[1] - 1

    def test_wrong_dimension_rejected(self):
        bb = tiny_backbone()
        with pytest.raises(ValueError):
            bb.encode_condition(proxy=torch.randn(2, 5))

    def test_construction_deterministic_under_seed(self):
        assert tiny_backbone().param_hash() == tiny_backbone().param_hash()


class TestPredictNoise:
    def test_shape_and_determinism(self):
        bb = tiny_backbone().eval()
        x = torch.randn(2, 3, 16, 16)
        cond = bb.encode_condition(batch=2)
        with torch.no_grad():
            a = bb.predict_noise(x, 7, cond)
            b = bb.predict_noise(x, 7, cond)
        assert a.shape == x.shape
        assert torch.equal(a, b)

    def test_timestep_range_checked(self):
        bb = tiny_backbone()
        x = torch.randn(1, 3, 16, 16)
        cond = bb.encode_condition(batch=1)
        with pytest.raises(ValueError):
            bb.predict_noise(x, 51, cond)
        with pytest.raises(ValueError):
            bb.predict_noise(x, -1, cond)

    def test_gradient_reaches_proxy_slot(self):
        # the output conv starts at zero (so the untrained net predicts zero
        # noise); give it weight so gradients can reach the condition at all
        bb = tiny_backbone()
        with torch.no_grad():
            torch.manual_seed(5)
            bb.head[-1].weight.normal_(0, 0.1)
        bb.freeze()
        x = torch.randn(1, 3, 16, 16)
        proxy = torch.randn(1, 8, requires_grad=True)
        out = bb.predict_noise(x, 5, bb.encode_condition(proxy=proxy))
        out.sum().backward()
        assert proxy.grad is not None
        assert float(proxy.grad.abs().max()) > 0

    def test_proxy_gradient_matches_finite_differences(self):
        bb = tiny_backbone().double()
        with torch.no_grad():
            torch.manual_seed(5)
            bb.head[-1].weight.normal_(0, 0.1)
        bb.freeze()
        rng = np.random.default_rng(7)
        x = torch.from_numpy(rng.standard_normal((1, 3, 16, 16)))
        r = torch.from_numpy(rng.standard_normal((1, 3, 16, 16)))
        proxy = torch.from_numpy(rng.standard_normal((1, 8))).requires_grad_(True)

        def value(p):
            return (bb.predict_noise(x, 5, bb.encode_condition(proxy=p)) * r).sum()

        value(proxy).backward()
        grad = proxy.grad.clone()
        h = 1e-6
        for k in range(4):
            e = torch.zeros_like(proxy)
            e[0, k] = h
            with torch.no_grad():
                fd = (value(proxy + e) - value(proxy - e)) / (2 * h)
            rel = abs(float(fd) - float(grad[0, k])) / max(abs(float(fd)), 1e-12)
            assert rel < 1e-3


class TestTaps:
    def test_identical_images_get_identical_features(self, trained):
        bb, imgs = trained
        x = torch.cat([imgs[:1], imgs[:1]])
        tap = bb.tap_feature(x, 5)
        assert torch.equal(tap.z[0], tap.z[1])

    def test_changing_shared_eps_changes_features(self, trained):
        bb, imgs = trained
        x = imgs[:2]
        a = bb.tap_feature(x, 5)
        other = torch.ones_like(bb.shared_eps)
        b = bb.tap_feature(x, 5, shared_eps=other)
        assert not torch.allclose(a.z, b.z)

    def test_tap_is_pure(self, trained):
        bb, imgs = trained
        a = bb.tap_feature(imgs[:3], 9)
        b = bb.tap_feature(imgs[:3], 9)
        assert torch.equal(a.z, b.z)
        assert a.block_index == bb.default_block

    def test_block_out_of_range(self, trained):
        bb, imgs = trained
        with pytest.raises(ValueError):
            bb.tap_feature(imgs[:1], 5, b=99)

    def test_attention_maps_are_probabilities_with_block_shapes(self, trained):
        bb, imgs = trained
        stack = bb.tap_attention(imgs[:4], 3)
        assert stack.block_count == 2
        # stem stride 2 then one downsample: 16 -> 8 -> 4
        assert tuple(stack.maps[0].shape) == (4, 8, 8)
        assert tuple(stack.maps[1].shape) == (4, 4, 4)
        for m in stack.maps:
            assert float(m.min()) >= 0.0
            assert float(m.max()) <= 1.0

    def test_taps_need_shared_eps(self):
        bb = tiny_backbone()
        with pytest.raises(BackboneStateError):
            bb.tap_feature(torch.randn(1, 3, 16, 16), 5)


class TestPretrain:
    def test_loss_decreases_and_model_freezes(self, trained):
        bb, imgs = trained
        assert bb.frozen
        assert not bb.trainable
        assert all(not p.requires_grad for p in bb.parameters())

    def test_pretrain_rejects_empty_and_frozen(self, trained):
        bb, _ = trained
        with pytest.raises(ValueError):
            pretrain_toy(tiny_backbone(), torch.zeros(0, 3, 16, 16), epochs=1)
        with pytest.raises(BackboneStateError):
            pretrain_toy(bb, torch.randn(4, 3, 16, 16), epochs=1)

    def test_training_curve_improves_over_untrained(self):
        torch.manual_seed(1)
        imgs = smooth_images(16, seed=1)
        bb = tiny_backbone(init_seed=5)
        hist = pretrain_toy(bb, imgs, epochs=60, batch_size=8, lr=3e-3, seed=1)
        first = np.mean(hist[:2])
        # the output conv starts at zero, so the first loss is E||eps||^2 = 1
        assert abs(hist[0] - 1.0) < 0.06
        assert np.mean(hist[-5:]) < 0.85 * first

    def test_frozen_hash_stable_across_taps(self, trained):
        bb, imgs = trained
        before = bb.param_hash()
        bb.tap_feature(imgs[:2], 3)
        bb.tap_attention(imgs[:2], 3)
        assert bb.param_hash() == before


class TestSaveLoad:
    def test_round_trip(self, trained, tmp_path):
        bb, imgs = trained
        path = tmp_path / "bb.pt"
        bb.save(path)
        again = ToyBackbone.load(path)
        assert again.param_hash() == bb.param_hash()
        assert again.schedule == bb.schedule
        assert again.frozen
        assert torch.equal(again.shared_eps, bb.shared_eps)
        a = bb.tap_feature(imgs[:2], 4)
        b = again.tap_feature(imgs[:2], 4)
        assert torch.allclose(a.z, b.z)


class TestExternalAdapter:
    def test_stub_fails_loudly(self):
        ext = ExternalBackbone("some-large-model")
        assert ext.block_index == 19
        assert ext.d_txt == 768
        assert not ext.trainable
        with pytest.raises(BackboneStateError):
            ext.predict_noise(None, 0, None)
        with pytest.raises(BackboneStateError):
            ext.tap_feature(None, 0)

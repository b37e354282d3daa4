import io
import math
import struct

import numpy as np
import pytest

from faultcl import ensemble
from faultcl import tensornet as tn


def small_net(rng, filters=6, size=12, classes=4, dtype=np.float64):
    fg = tn.FeatureGenerator.create(rng, image_size=size, n_filters=filters, dtype=dtype)
    return fg, tn.ClassifierHead.create(rng, fg.out_dim, classes, dtype=dtype)


class TestForward:
    def test_feature_dim(self):
        assert tn.feature_dim(32) == 6 * 6 * 80
        with pytest.raises(ValueError):
            tn.feature_dim(8)

    def test_zero_head_uniform(self, rng):
        fg = tn.FeatureGenerator.create(rng)
        head = tn.ClassifierHead.zeros(fg.out_dim, 4)
        p = tn.forward(fg, head, rng.uniform(size=(32, 32)))
        np.testing.assert_allclose(p, 0.25, atol=1e-7)

    def test_sums_to_one(self, rng):
        fg, head = small_net(rng)
        p = tn.forward(fg, head, rng.uniform(size=(5, 12, 12)))
        assert np.all(p > 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_shape_mismatch(self, rng):
        fg, head = small_net(rng)
        with pytest.raises(ValueError):
            tn.forward(fg, head, np.zeros((2, 10, 10)))
        with pytest.raises(ValueError):
            tn.ClassifierHead.zeros(7, 3).logits(np.zeros((1, 8)))

    def test_identity_conv(self, rng):
        x = rng.normal(size=(2, 7, 9, 1))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out, _ = tn._conv_forward(x, w, np.zeros(1))
        np.testing.assert_array_equal(out[..., 0], x[:, 1:-1, 1:-1, 0])

    def test_conv_matches_direct_sum(self, rng):
        x = rng.normal(size=(2, 6, 5, 3))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out, _ = tn._conv_forward(x, w, b)
        ref = np.zeros((2, 4, 3, 4))
        for n in range(2):
            for i in range(4):
                for j in range(3):
                    for f in range(4):
                        ref[n, i, j, f] = np.sum(x[n, i : i + 3, j : j + 3, :] * w[f].transpose(1, 2, 0)) + b[f]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_deterministic(self, rng):
        fg, head = small_net(rng)
        x = rng.uniform(size=(4, 12, 12))
        assert tn.forward(fg, head, x).tobytes() == tn.forward(fg, head, x).tobytes()

    def test_batchnorm_training_stats(self, rng):
        x = rng.normal(3.0, 2.0, size=(8, 5, 5, 3))
        gamma, beta = np.array([0.5, 2.0, 1.0]), np.array([-1.0, 0.0, 4.0])
        out, _ = tn._bn_forward(x, gamma, beta, x.mean(axis=(0, 1, 2)), x.var(axis=(0, 1, 2)))
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), beta, atol=1e-4)
        np.testing.assert_allclose(out.std(axis=(0, 1, 2)), gamma, atol=1e-4)

    def test_running_stats_update(self, rng):
        fg, _ = small_net(rng)
        x = rng.uniform(size=(4, 12, 12))
        fg.forward(x, training=True)
        assert not np.allclose(fg.buffers["bn1_mean"], 0)
        before = {k: v.copy() for k, v in fg.buffers.items()}
        fg.forward(x, training=True, update_stats=False)
        fg.forward(x, training=False)
        for k in before:
            np.testing.assert_array_equal(before[k], fg.buffers[k])


class TestPool:
    def test_backward_routes_to_argmax(self, rng):
        x = rng.normal(size=(1, 4, 4, 2))
        out, cache = tn._pool_forward(x)
        for i in range(2):
            for j in range(2):
                for c in range(2):
                    d = np.zeros_like(out)
                    d[0, i, j, c] = 1.0
                    dx = tn._pool_backward(d, cache)
                    window = x[0, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2, c]
                    r, s = np.unravel_index(np.argmax(window), (2, 2))
                    expected = np.zeros_like(x)
                    expected[0, 2 * i + r, 2 * j + s, c] = 1.0
                    np.testing.assert_array_equal(dx, expected)

    def test_tie_goes_to_first(self):
        x = np.ones((1, 2, 2, 1))
        out, cache = tn._pool_forward(x)
        dx = tn._pool_backward(np.ones_like(out), cache)
        np.testing.assert_array_equal(dx[0, :, :, 0], [[1, 0], [0, 0]])

    def test_odd_size_drops_edge(self, rng):
        x = rng.normal(size=(1, 5, 5, 1))
        out, _ = tn._pool_forward(x)
        assert out.shape == (1, 2, 2, 1)
        assert out[0, 1, 1, 0] == x[0, 2:4, 2:4, 0].max()


class TestLoss:
    def test_uniform_loss(self, rng):
        fg = tn.FeatureGenerator.create(rng, image_size=12, n_filters=4)
        head = tn.ClassifierHead.zeros(fg.out_dim, 4)
        loss, _, _ = tn.loss_and_grad(fg, head, rng.uniform(size=(3, 12, 12)), np.array([0, 1, 3]))
        assert loss == pytest.approx(math.log(4), abs=1e-6)

    def test_duplication_invariance(self, rng):
        fg, head = small_net(rng)
        x = rng.uniform(size=(3, 12, 12))
        y = np.array([0, 2, 1])
        l1, g1, h1 = tn.loss_and_grad(fg, head, x, y, update_stats=False)
        l2, g2, h2 = tn.loss_and_grad(fg, head, np.concatenate([x, x]), np.concatenate([y, y]), update_stats=False)
        assert l1 == pytest.approx(l2, abs=1e-12)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], atol=1e-10)
        for k in h1:
            np.testing.assert_allclose(h1[k], h2[k], atol=1e-10)

    def test_covers_all_params(self, rng):
        fg, head = small_net(rng)
        _, g, h = tn.loss_and_grad(fg, head, rng.uniform(size=(2, 12, 12)), np.array([0, 1]))
        assert set(g) == set(fg.params) and set(h) == set(head.params)
        for k in g:
            assert g[k].shape == fg.params[k].shape

    def test_multi_loss_is_mean_of_groups(self, rng):
        fg, h1 = small_net(rng)
        h2 = tn.ClassifierHead.create(rng, fg.out_dim, 3, dtype=np.float64)
        xa, xb = rng.uniform(size=(4, 12, 12)), rng.uniform(size=(4, 12, 12))
        ya, yb = np.array([0, 1, 2, 3]), np.array([0, 1, 2, 0])
        loss, _ = tn.multi_loss_and_grad(fg, {"a": h1, "b": h2}, {"a": (xa, ya), "b": (xb, yb)}, update_stats=False)
        # same batch statistics: evaluate both heads on the joint pass
        feats, _ = fg.forward(np.concatenate([xa, xb]), training=True, update_stats=False)
        pa = tn.softmax(h1.logits(feats[:4]))[np.arange(4), ya]
        pb = tn.softmax(h2.logits(feats[4:]))[np.arange(4), yb]
        assert loss == pytest.approx(0.5 * (-np.log(pa).mean() - np.log(pb).mean()), abs=1e-12)

    def test_non_finite_loss(self, rng):
        fg, head = small_net(rng)
        head.params["w"][:] = np.nan
        with pytest.raises(FloatingPointError):
            tn.loss_and_grad(fg, head, rng.uniform(size=(2, 12, 12)), np.array([0, 1]))

    def test_label_out_of_range(self, rng):
        fg, head = small_net(rng)
        with pytest.raises(ValueError):
            tn.loss_and_grad(fg, head, rng.uniform(size=(2, 12, 12)), np.array([0, 4]))


class TestGradCheck:
    def test_passes(self, rng):
        fg, head = small_net(rng)
        report = tn.grad_check(fg, head, rng.uniform(size=(2, 12, 12)), np.array([1, 3]), rng=rng)
        assert report.passed, report.per_param
        assert report.n_checked >= 50

    def test_zero_epsilon(self, rng):
        fg, head = small_net(rng)
        with pytest.raises(ValueError):
            tn.grad_check(fg, head, rng.uniform(size=(2, 12, 12)), np.array([0, 1]), epsilon=0)

    def test_detects_sign_flip(self, rng, monkeypatch):
        original = tn._conv_backward

        def flipped(dout, cache, need_dx=True):
            dx, dw, db = original(dout, cache, need_dx)
            return dx, -dw, db

        monkeypatch.setattr(tn, "_conv_backward", flipped)
        fg, head = small_net(rng)
        report = tn.grad_check(fg, head, rng.uniform(size=(2, 12, 12)), np.array([1, 3]), rng=rng)
        assert not report.passed


class TestSgd:
    def test_zero_grad(self):
        p = {"a": np.array([1.0, 2.0])}
        tn.sgd_step(p, {"a": np.zeros(2)}, {}, lr=0.1)
        np.testing.assert_array_equal(p["a"], [1.0, 2.0])

    def test_plain_step(self):
        p = {"a": np.array(5.0)}
        tn.sgd_step(p, {"a": np.array(1.0)}, {}, lr=0.1, momentum=0.0)
        assert float(p["a"]) == pytest.approx(4.9)

    def test_momentum_recurrence(self):
        p, v = {"a": np.array(0.0)}, {}
        tn.sgd_step(p, {"a": np.array(1.0)}, v, lr=0.1, momentum=0.9)
        assert float(p["a"]) == pytest.approx(-0.1)
        tn.sgd_step(p, {"a": np.array(1.0)}, v, lr=0.1, momentum=0.9)
        assert float(p["a"]) == pytest.approx(-0.29)

    def test_bad_lr(self):
        with pytest.raises(ValueError):
            tn.sgd_step({}, {}, {}, lr=0.0)


def test_plasticity_toy(rng):
    """Two linearly separable image classes are fitted perfectly in 30 epochs."""
    n = 24
    x = rng.uniform(0.0, 0.2, size=(n, 32, 32)).astype(np.float32)
    y = np.arange(n) % 2
    x[y == 0, :16, :] += 0.8
    x[y == 1, 16:, :] += 0.8
    state = ensemble.EnsembleState(domain_catalog={1: 2})
    model = ensemble.new_episode(state, 1, {1}, seed=0)
    cfg = ensemble.TrainingConfig(epochs=30)
    stats = ensemble.train_episode(model, (x, y), {}, cfg, rng)
    assert stats.train_accuracy[1] == 1.0


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        fg, head = small_net(rng, dtype=np.float32)
        params = {**fg.state(), **{f"head.{k}": v for k, v in head.params.items()}}
        path = tmp_path / "m.dfnn"
        tn.save_params(path, params)
        back = tn.read_params(path)
        assert list(back) == list(params)
        for k in params:
            np.testing.assert_array_equal(back[k], params[k])
        assert tn.params_hash(back) == tn.params_hash(params)

    def test_layout(self):
        blob = tn.params_blob({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
        assert blob[:4] == b"DFNN"
        assert struct.unpack("<II", blob[4:12]) == (1, 1)
        assert struct.unpack("<H", blob[12:14]) == (2,) and blob[14:16] == b"ab"
        assert blob[16] == 2 and struct.unpack("<II", blob[17:25]) == (1, 2)
        assert np.frombuffer(blob[25:], "<f4").tolist() == [1.0, 2.0]

    def test_bad_input(self):
        with pytest.raises(ValueError):
            tn.load_params(io.BytesIO(b"NOPE"))
        blob = tn.params_blob({"w": np.ones(4, dtype=np.float32)})
        with pytest.raises(ValueError):
            tn.load_params(io.BytesIO(blob[:-3]))
        bad_version = blob[:4] + struct.pack("<I", 9) + blob[8:]
        with pytest.raises(ValueError):
            tn.load_params(io.BytesIO(bad_version))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdssd.anchors import generate_default_boxes
from cdssd.net import Network, NetworkConfig, fuse_meta_layer, fuse_meta_layer_backward, reconstruction_mse

TINY = dict(input_size=12, meta_layers=3, channels=[2, 3, 4], num_classes=2, heads_on_layers=[2, 3],
            box_pool_per_layer=[2, 1], fused_channels=3, boxes_per_cell=2)


def float64_net(mode, seed=1, **over):
    net = Network(NetworkConfig(**{**TINY, **over}), mode=mode, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name, p in net.params.items():
        p.data = p.data.astype(np.float64)
        # non-zero biases keep relu inputs away from the kink at exactly 0
        if name.endswith(".b"):
            p.data = p.data + rng.normal(0, 0.1, p.shape)
    return net


def finite_diff_check(net, f, grads, probes=6, eps=1e-6, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in net.params.items():
        if name not in grads:
            continue
        flat = p.data.reshape(-1)
        an = grads[name].reshape(-1)
        for i in rng.choice(flat.size, min(probes, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            worst = max(worst, abs(an[i] - num) / max(1.0, abs(an[i])))
    return worst


@st.composite
def configs(draw):
    layers = draw(st.integers(1, 4))
    size = draw(st.integers(5, 20))
    heads = sorted(draw(st.sets(st.integers(1, layers), min_size=1)))
    return NetworkConfig(input_size=size, meta_layers=layers,
                         channels=[draw(st.integers(1, 4)) for _ in range(layers)],
                         num_classes=draw(st.integers(1, 3)), heads_on_layers=heads,
                         box_pool_per_layer=[draw(st.integers(1, 3)) for _ in heads],
                         fused_channels=draw(st.integers(1, 4)), boxes_per_cell=draw(st.integers(1, 3)))


class TestConfig:
    def test_desk_anchor_count(self):
        cfg = NetworkConfig()
        assert cfg.feature_sizes() == [96, 48, 24, 12]
        # heads on 48, 24 and 12 pixel maps pooled by 2, 2 and 1
        assert cfg.num_anchors() == (24 * 24 + 12 * 12 + 12 * 12) * 3 == 2592
        anchors = generate_default_boxes(cfg.anchor_layout([0.2, 0.35, 0.5]), [0.7, 1.0, 1.4])
        assert len(anchors) == cfg.num_anchors()

    def test_full_profile(self):
        cfg = NetworkConfig.full_profile()
        assert cfg.input_size == 300 and cfg.meta_layers == 7 and cfg.num_classes == 24

    @pytest.mark.parametrize("bad", [dict(channels=[1, 2]), dict(heads_on_layers=[5]),
                                     dict(heads_on_layers=[2, 2], box_pool_per_layer=[1, 1]),
                                     dict(box_pool_per_layer=[2, 4, 1]), dict(dropout_rate=1.0),
                                     dict(heads_on_layers=[], box_pool_per_layer=[])])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            NetworkConfig(**bad)

    def test_roundtrip(self, tmp_path):
        cfg = NetworkConfig(**TINY)
        cfg.save(tmp_path / "n.json")
        assert NetworkConfig.load(tmp_path / "n.json") == cfg


class TestFusion:
    def test_shapes(self):
        rng = np.random.default_rng(0)
        maps = [rng.random((4, 8, 8)), rng.random((4, 4, 4)), rng.random((4, 4, 4)), rng.random((4, 8, 8))]
        out = fuse_meta_layer(*maps, rng.random((5, 16, 1, 1)), np.zeros(5))
        assert out.shape == (5, 8, 8)

    def test_identity_projection(self):
        rng = np.random.default_rng(1)
        low = rng.normal(size=(4, 4, 4))
        high = low.repeat(2, axis=1).repeat(2, axis=2)
        w = np.tile(np.eye(4), (1, 4))[:, :, None, None]
        b = rng.normal(size=4)
        out = fuse_meta_layer(high, low, low, high, w, b)
        np.testing.assert_allclose(out, np.maximum(4 * high + b[:, None, None], 0), atol=1e-12)

    def test_mismatched_layers(self):
        with pytest.raises(ValueError):
            fuse_meta_layer(np.zeros((1, 8, 8)), np.zeros((1, 3, 3)), np.zeros((1, 3, 3)), np.zeros((1, 8, 8)),
                            np.zeros((1, 4, 1, 1)), np.zeros(1))

    def test_gradient_reaches_all_inputs(self):
        rng = np.random.default_rng(2)
        maps = [rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(2, 3, 3, 3)),
                rng.normal(size=(2, 2, 6, 6))]
        w, b = rng.normal(size=(4, 11, 1, 1)), rng.normal(size=4)
        r = rng.normal(size=(2, 4, 6, 6))
        grads = fuse_meta_layer_backward(r, *maps, w, b)
        args = maps + [w, b]
        for k, g in enumerate(grads):
            assert np.abs(g).max() > 0
            x = args[k]
            for idx in [tuple(rng.integers(0, s) for s in x.shape) for _ in range(4)]:
                orig = x[idx]
                x[idx] = orig + 1e-6
                hi = (fuse_meta_layer(*args[:4], *args[4:]) * r).sum()
                x[idx] = orig - 1e-6
                lo = (fuse_meta_layer(*args[:4], *args[4:]) * r).sum()
                x[idx] = orig
                assert abs(g[idx] - (hi - lo) / 2e-6) < 1e-6 * max(1, abs(g[idx]))


class TestAutoencoder:
    @given(configs(), st.integers(1, 3))
    @settings(max_examples=30, deadline=None)
    def test_output_shape_equals_input(self, cfg, n):
        net = Network(cfg, seed=0)
        x = np.random.default_rng(0).random((n, 3, cfg.input_size, cfg.input_size))
        assert net.forward_autoencoder(x).shape == x.shape
        assert net.forward_autoencoder(x[0]).shape == x[0].shape

    def test_zero_image_finite(self):
        net = Network(seed=3)
        x = np.zeros((1, 3, 96, 96), np.float32)
        assert np.isfinite(net.forward_autoencoder(x)).all()
        assert np.isfinite(reconstruction_mse(net, x))

    def test_wrong_shape(self):
        with pytest.raises(ValueError):
            Network().forward_autoencoder(np.zeros((1, 3, 90, 96)))

    def test_dropout_only_in_training(self):
        net = Network(NetworkConfig(**TINY, dropout_rate=0.5), seed=0)
        x = np.random.default_rng(0).random((2, 3, 12, 12))
        assert np.array_equal(net.forward_autoencoder(x, train=False), net.forward_autoencoder(x, train=False))
        assert not np.array_equal(net.forward_autoencoder(x, step=0), net.forward_autoencoder(x, train=False))
        assert np.array_equal(net.forward_autoencoder(x, step=4), net.forward_autoencoder(x, step=4))

    def test_mode_guards(self):
        net = Network(NetworkConfig(**TINY))
        with pytest.raises(RuntimeError):
            net.forward_detect(np.zeros((3, 12, 12)))
        net.to_detect_mode()
        with pytest.raises(RuntimeError):
            net.forward_autoencoder(np.zeros((3, 12, 12)))

    def test_gradients(self):
        net = float64_net("pretrain", dropout_rate=0.3)
        rng = np.random.default_rng(0)
        x, r = rng.random((2, 3, 12, 12)), rng.normal(size=(2, 3, 12, 12))
        _, cache = net.forward_autoencoder(x, step=3, return_cache=True)
        grads = net.backward(cache, d_recon=r)
        assert set(grads) == set(net.params)
        f = lambda: float((net.forward_autoencoder(x, step=3) * r).sum())
        assert finite_diff_check(net, f, grads) < 1e-5


class TestDetect:
    @given(configs())
    @settings(max_examples=30, deadline=None)
    def test_rows_equal_anchor_count(self, cfg):
        net = Network(cfg, mode="detect", seed=0)
        logits, offsets = net.forward_detect(np.zeros((2, 3, cfg.input_size, cfg.input_size)))
        anchors = generate_default_boxes(cfg.anchor_layout([0.5] * len(cfg.heads_on_layers)),
                                         [1.0] * cfg.boxes_per_cell)
        assert logits.shape == (2, len(anchors), cfg.num_classes + 1)
        assert offsets.shape == (2, len(anchors), 4)

    def test_identical_images_identical_rows(self):
        net = Network(mode="detect", seed=4)
        img = np.random.default_rng(0).random((3, 96, 96)).astype(np.float32)
        l, o = net.forward_detect(np.stack([img, img]))
        assert np.array_equal(l[0], l[1]) and np.array_equal(o[0], o[1])
        l1, _ = net.forward_detect(img)
        assert np.array_equal(l1, l[0])

    def test_transfer_keeps_autoencoder_weights(self):
        net = Network(NetworkConfig(**TINY), seed=5)
        before = {k: v.copy() for k, v in net.state_dict().items()}
        net.to_detect_mode()
        after = net.state_dict()
        for k, v in before.items():
            assert np.array_equal(v, after[k])
        assert {k for k in after if k not in before} == {"fuse2.w", "fuse2.b", "head2.w", "head2.b",
                                                          "fuse3.w", "fuse3.b", "head3.w", "head3.b"}

    def test_head_order_permutation(self):
        base = dict(TINY, meta_layers=3, heads_on_layers=[1, 2, 3], box_pool_per_layer=[2, 1, 1])
        a = Network(NetworkConfig(**base), mode="detect", seed=0)
        b = Network(NetworkConfig(**dict(base, heads_on_layers=[3, 1, 2], box_pool_per_layer=[1, 2, 1])),
                    mode="detect", seed=9)
        b.load_state_dict(a.state_dict())
        x = np.random.default_rng(0).random((2, 3, 12, 12))
        la, oa = a.forward_detect(x)
        lb, ob = b.forward_detect(x)
        # per-layer row counts: layer 1 -> 6x6x2, layer 2 -> 6x6x2, layer 3 -> 3x3x2
        s1, s2, s3 = slice(0, 72), slice(72, 144), slice(144, 162)
        perm = np.r_[np.arange(162)[s3], np.arange(162)[s1], np.arange(162)[s2]]
        assert np.array_equal(lb, la[:, perm]) and np.array_equal(ob, oa[:, perm])

    def test_gradients(self):
        net = float64_net("detect")
        rng = np.random.default_rng(0)
        x = rng.random((2, 3, 12, 12))
        logits, offsets, cache = net.forward_detect(x, return_cache=True)
        rl, ro = rng.normal(size=logits.shape), rng.normal(size=offsets.shape)
        grads = net.backward(cache, d_logits=rl, d_offsets=ro)

        def f():
            l, o = net.forward_detect(x)
            return float((l * rl).sum() + (o * ro).sum())

        assert finite_diff_check(net, f, grads) < 1e-5

    def test_no_dead_parameters(self):
        net = Network(mode="detect", seed=0)
        x = np.random.default_rng(1).random((4, 3, 96, 96)).astype(np.float32)
        logits, offsets, cache = net.forward_detect(x, return_cache=True)
        rng = np.random.default_rng(2)
        grads = net.backward(cache, d_logits=rng.normal(size=logits.shape),
                             d_offsets=rng.normal(size=offsets.shape))
        # decoder stages below the lowest head are not on the detection path
        unused = {"dec1.w", "dec1.b"}
        assert set(grads) == set(net.params) - unused
        for name, g in grads.items():
            assert np.abs(g).max() > 0, name

    def test_no_dead_parameters_pretrain(self):
        net = Network(seed=0)
        x = np.random.default_rng(1).random((4, 3, 96, 96)).astype(np.float32)
        _, grads = net.reconstruction_step(x)
        for name, g in grads.items():
            assert np.abs(g).max() > 0, name

    def test_state_dict_mismatch(self):
        a = Network(NetworkConfig(**TINY), mode="detect")
        b = Network(NetworkConfig(**TINY))
        with pytest.raises(ValueError):
            b.load_state_dict(a.state_dict())

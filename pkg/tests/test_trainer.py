import numpy as np
import pytest

from cdssd.anchors import compute_aspect_ratio_bins, generate_default_boxes
from cdssd.augment import AugmentConfig
from cdssd.data import synth_shapes
from cdssd.net import Network, NetworkConfig, reconstruction_mse
from cdssd.tensor import Tensor
from cdssd.trainer import (LOG_COLUMNS, TrainConfig, TrainingAborted, batch_order, finetune, pretrain,
                           read_log, sgd_step, targets_from_annotations, write_log)

SMALL = dict(input_size=24, meta_layers=3, channels=[4, 6, 8], num_classes=3, heads_on_layers=[2, 3],
             box_pool_per_layer=[2, 1], fused_channels=6, boxes_per_cell=2)


@pytest.fixture(scope="module")
def shapes():
    imgs, anns = synth_shapes(24, 24, seed=3)
    return imgs.astype(np.float32) / 255, anns


def small_setup(shapes, seed=0):
    x, anns = shapes
    cfg = NetworkConfig(**SMALL)
    net = Network(cfg, mode="detect", seed=seed)
    ratios = compute_aspect_ratio_bins(np.concatenate([a.boxes() for a in anns]), 2)
    anchors = generate_default_boxes(cfg.anchor_layout([0.3, 0.6]), ratios)
    return net, anchors, targets_from_annotations(anns)


class TestSGD:
    def test_plain_step(self):
        params = {"w": np.array([1.0, 2.0])}
        sgd_step(params, {"w": np.array([0.5, -1.0])}, {}, lr=1.0, momentum=0.0, weight_decay=0.0)
        np.testing.assert_allclose(params["w"], [0.5, 3.0])

    def test_pure_decay(self):
        params = {"w": np.array([4.0])}
        sgd_step(params, {"w": np.zeros(1)}, {}, lr=1.0, momentum=0.0, weight_decay=0.5)
        np.testing.assert_allclose(params["w"], [2.0])

    def test_momentum(self):
        params, state = {"w": np.array([0.0])}, {}
        for _ in range(2):
            sgd_step(params, {"w": np.array([1.0])}, state, lr=1.0, momentum=0.5, weight_decay=0.0)
        # velocities 1 then 1.5
        np.testing.assert_allclose(params["w"], [-2.5])

    def test_quadratic_bowl(self):
        params, state = {"x": np.array([3.0])}, {}
        for _ in range(100):
            sgd_step(params, {"x": 2 * params["x"]}, state, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert abs(params["x"][0]) < 1e-4

    def test_tensor_params(self):
        t = Tensor(np.ones(3, np.float32))
        sgd_step({"t": t}, {"t": np.ones(3)}, {}, lr=0.5, momentum=0.9, weight_decay=0.0)
        assert t.data.dtype == np.float32
        np.testing.assert_allclose(t.data, 0.5)

    def test_non_finite_aborts_before_update(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        with pytest.raises(TrainingAborted) as exc:
            sgd_step(params, {"a": np.ones(2), "b": np.array([np.nan, np.inf])}, {}, 0.1, 0.9, 0.0, step=7)
        assert exc.value.record == {"step": 7, "layer": "b", "reason": "non-finite gradient", "nan": 1, "inf": 1}
        assert np.array_equal(params["a"], np.ones(2))

    def test_shape_and_name_errors(self):
        with pytest.raises(ValueError):
            sgd_step({"a": np.ones(2)}, {"a": np.ones(3)}, {}, 0.1, 0.0, 0.0)
        with pytest.raises(KeyError):
            sgd_step({"a": np.ones(2)}, {"z": np.ones(2)}, {}, 0.1, 0.0, 0.0)


class TestConfig:
    def test_schedule_lookup(self):
        cfg = TrainConfig(schedule=[(1e-2, 3), (1e-3, 2)])
        assert cfg.total_steps == 5
        assert [cfg.lr_at(s) for s in (0, 2, 3, 4)] == [(1e-2, 0), (1e-2, 0), (1e-3, 1), (1e-3, 1)]
        with pytest.raises(IndexError):
            cfg.lr_at(5)

    @pytest.mark.parametrize("bad", [dict(batch_size=0), dict(momentum=1.0), dict(weight_decay=-1),
                                     dict(mode="x"), dict(schedule=[(-1e-3, 5)]), dict(schedule=[(1e-3, -1)]),
                                     dict(schedule=[(float("nan"), 5)])])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_roundtrip(self, tmp_path):
        cfg = TrainConfig(schedule=[(1e-3, 4)], augment=AugmentConfig(flip=False), mode="detect")
        path = tmp_path / "t.json"
        import json
        path.write_text(json.dumps(cfg.to_dict()))
        back = TrainConfig.load(path)
        assert back.to_dict() == cfg.to_dict()

    def test_batch_order(self):
        batches = batch_order(10, 4, seed=1, epoch=0)
        assert len(batches) == 2 and all(len(b) == 4 for b in batches)
        assert len(set(np.concatenate(batches))) == 8
        assert [b.tolist() for b in batch_order(10, 4, 1, 0)] == [b.tolist() for b in batches]
        assert [b.tolist() for b in batch_order(10, 4, 1, 1)] != [b.tolist() for b in batches]


class TestPretrain:
    def test_zero_lr_keeps_weights(self, shapes):
        net = Network(NetworkConfig(**SMALL), seed=0)
        before = {k: v.copy() for k, v in net.state_dict().items()}
        res = pretrain(net, shapes[0], TrainConfig(batch_size=4, schedule=[(0.0, 3)], weight_decay=5e-4))
        assert res.steps_run == 3
        for k, v in before.items():
            assert np.array_equal(v, net.state_dict()[k])

    def test_reduces_mse(self, shapes):
        net = Network(NetworkConfig(**SMALL), seed=0)
        start = reconstruction_mse(net, shapes[0])
        res = pretrain(net, shapes[0], TrainConfig(batch_size=8, schedule=[(1e-2, 60)]))
        assert reconstruction_mse(net, shapes[0]) < 0.5 * start
        assert [r["step"] for r in res.log] == list(range(60))
        assert all(np.isfinite(r["total"]) for r in res.log)

    def test_reproducible(self, shapes):
        states = []
        for _ in range(2):
            net = Network(NetworkConfig(**SMALL), seed=2)
            states.append(pretrain(net, shapes[0], TrainConfig(batch_size=8, schedule=[(1e-2, 5)], seed=4)).state)
        for k in states[0]:
            assert np.array_equal(states[0][k], states[1][k])

    def test_batch_larger_than_data(self, shapes):
        with pytest.raises(ValueError):
            pretrain(Network(NetworkConfig(**SMALL)), shapes[0][:3], TrainConfig(batch_size=4))

    def test_diverging_run_aborts(self, shapes):
        net = Network(NetworkConfig(**SMALL), seed=0)
        with pytest.raises(TrainingAborted) as exc:
            with np.errstate(all="ignore"):
                pretrain(net, shapes[0], TrainConfig(batch_size=8, schedule=[(1e6, 50)], momentum=0.0))
        assert exc.value.record["step"] is not None


class TestFinetune:
    def test_mining_log_and_columns(self, shapes, tmp_path):
        net, anchors, targets = small_setup(shapes)
        res = finetune(net, shapes[0], targets, anchors,
                       TrainConfig(batch_size=4, schedule=[(1e-2, 6)], mode="detect"))
        for row in res.log:
            assert row["positives"] > 0
            assert row["mined_negatives"] == min(2 * row["positives"], row["available_negatives"])
        write_log(tmp_path / "log.csv", res.log)
        back = read_log(tmp_path / "log.csv")
        assert list(back[0]) == list(LOG_COLUMNS)
        assert [int(r["step"]) for r in back] == list(range(6))

    def test_reproducible(self, shapes):
        states = []
        for _ in range(2):
            net, anchors, targets = small_setup(shapes, seed=1)
            states.append(finetune(net, shapes[0], targets, anchors,
                                   TrainConfig(batch_size=4, schedule=[(1e-2, 4)], mode="detect", seed=3)).state)
        for k in states[0]:
            assert np.array_equal(states[0][k], states[1][k])

    def test_pretrained_weights_at_step_zero(self, shapes):
        net = Network(NetworkConfig(**SMALL), seed=0)
        pre = pretrain(net, shapes[0], TrainConfig(batch_size=8, schedule=[(1e-2, 3)])).state
        net.to_detect_mode()
        _, anchors, targets = small_setup(shapes)
        res = finetune(net, shapes[0], targets, anchors,
                       TrainConfig(batch_size=4, schedule=[(0.0, 1)], mode="detect"))
        for k, v in pre.items():
            if k.startswith(("enc", "dec")):
                assert np.array_equal(v, res.state[k])

    def test_eval_hook_and_stop(self, shapes):
        net, anchors, targets = small_setup(shapes)
        seen = []

        def hook(n, step):
            seen.append(step)
            return 1.0 if step >= 4 else 0.0

        res = finetune(net, shapes[0], targets, anchors,
                       TrainConfig(batch_size=4, schedule=[(1e-3, 10)], mode="detect"),
                       eval_hook=hook, eval_every=2, stop_at=0.9)
        assert seen == [2, 4] and res.steps_run == 4 and res.evals == [(2, 0.0), (4, 1.0)]

    def test_errors(self, shapes):
        net, anchors, targets = small_setup(shapes)
        with pytest.raises(ValueError):
            finetune(net, shapes[0][:5], targets, anchors, TrainConfig(mode="detect"))
        wrong = generate_default_boxes(NetworkConfig(**SMALL).anchor_layout([0.3, 0.6])[:1], [1.0, 2.0])
        with pytest.raises(ValueError):
            finetune(net, shapes[0], targets, wrong, TrainConfig(mode="detect"))
        with pytest.raises(ValueError):
            finetune(Network(NetworkConfig(**SMALL)), shapes[0], targets, anchors, TrainConfig(mode="detect"))

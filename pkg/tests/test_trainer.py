import csv
import math

import numpy as np
import pytest

from lesa import ops
from lesa.checkpoint import checkpoint_load
from lesa.data import generate_dataset
from lesa.model import BackboneSpec, build_backbone
from lesa.nn import Linear
from lesa.tensor import Parameter, Tensor
from lesa.trainer import (
    METRIC_COLUMNS,
    OptimConfig,
    TrainingDiverged,
    TrainState,
    history_without_wall,
    lr_schedule,
    sgd_nesterov_step,
    train,
)


def small_model(op="lesa", seed=0):
    spec = BackboneSpec.with_ops(op, base_channels=8, heads=2, input_size=16, stage_blocks=[1, 1, 2, 1], num_classes=4)
    return build_backbone(spec, seed=seed)


@pytest.fixture(scope="module")
def data():
    d = generate_dataset(num_classes=4, count=96, size=16, seed=11)
    return d.images, d.labels


SMALL = dict(total_epochs=3, warmup_epochs=1, batch_size=32)


class TestSchedule:
    cfg = OptimConfig(lr_init=0.05, warmup_epochs=5, total_epochs=20)

    def test_warmup_boundary(self):
        assert lr_schedule(5, self.cfg) == 0.05

    def test_end(self):
        assert lr_schedule(20, self.cfg) == 0.0

    def test_midpoint(self):
        assert lr_schedule(12.5, self.cfg) == 0.025

    def test_starts_at_zero(self):
        assert lr_schedule(0, self.cfg) == 0.0
        assert lr_schedule(2.5, self.cfg) == pytest.approx(0.025, abs=1e-17)

    def test_continuous_at_boundary(self):
        left = lr_schedule(5 - 1e-9, self.cfg)
        right = lr_schedule(5 + 1e-9, self.cfg)
        assert left == pytest.approx(0.05, abs=1e-10) and right == pytest.approx(0.05, abs=1e-10)

    def test_monotone_after_warmup(self):
        lrs = [lr_schedule(t, self.cfg) for t in np.linspace(5, 20, 50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("t", [-0.1, 20.5])
    def test_out_of_range(self, t):
        with pytest.raises(ValueError):
            lr_schedule(t, self.cfg)

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            OptimConfig(warmup_epochs=20, total_epochs=20).validate()
        with pytest.raises(ValueError):
            OptimConfig(lr_init=-1.0).validate()


class TestSGD:
    def test_plain_sgd_when_momentum_zero(self, rng):
        p = Parameter(rng.standard_normal(5))
        g = rng.standard_normal(5)
        p.grad = g.copy()
        before = p.data.copy()
        sgd_nesterov_step([("p", p)], TrainState(), lr=0.1, momentum=0.0)
        np.testing.assert_array_equal(p.data, before - 0.1 * g)

    def test_scalar_two_steps_by_hand(self):
        p = Parameter(np.array(1.0))
        state = TrainState()
        lr, mu, wd = 0.1, 0.9, 0.01
        # step 1: g = 2 + wd*1 = 2.01, buf = 2.01, p = 1 - 0.1*(2.01 + 0.9*2.01)
        p.grad = np.array(2.0)
        sgd_nesterov_step([("p", p)], state, lr, mu, wd)
        p1 = 1 - 0.1 * (2.01 + 0.9 * 2.01)
        assert abs(p.item() - p1) < 1e-15
        # step 2: g = -1 + wd*p1, buf = 0.9*2.01 + g, p = p1 - 0.1*(g + 0.9*buf)
        p.grad = np.array(-1.0)
        sgd_nesterov_step([("p", p)], state, lr, mu, wd)
        g2 = -1 + wd * p1
        buf2 = 0.9 * 2.01 + g2
        assert abs(p.item() - (p1 - 0.1 * (g2 + 0.9 * buf2))) < 1e-15

    def test_zero_grad_zero_buffer_unchanged(self, rng):
        p = Parameter(rng.standard_normal(4))
        before = p.data.copy()
        p.grad = np.zeros(4)
        sgd_nesterov_step([("p", p)], TrainState(momentum={"p": np.zeros(4)}), lr=0.5, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, before)

    def test_missing_grad(self):
        with pytest.raises(ValueError, match="p"):
            sgd_nesterov_step([("p", Parameter(np.zeros(2)))], TrainState(), lr=0.1)

    def test_weight_decay_skips_non_decay_params(self):
        a, b = Parameter(np.ones(2)), Parameter(np.ones(2), decay=False)
        a.grad, b.grad = np.zeros(2), np.zeros(2)
        sgd_nesterov_step([("a", a), ("b", b)], TrainState(), lr=1.0, momentum=0.0, weight_decay=0.1)
        np.testing.assert_array_equal(a.data, 0.9)
        np.testing.assert_array_equal(b.data, 1.0)

    def test_half_batches_accumulate_to_full_batch(self, rng):
        x, y = rng.standard_normal((8, 5)), rng.integers(0, 3, 8)
        full, halves = Linear(5, 3, rng=np.random.default_rng(0)), Linear(5, 3, rng=np.random.default_rng(0))
        ops.cross_entropy(full(Tensor(x)), y).backward()
        for sl in (slice(0, 4), slice(4, 8)):
            ops.mul(ops.cross_entropy(halves(Tensor(x[sl])), y[sl]), 0.5).backward()
        for model in (full, halves):
            sgd_nesterov_step(list(model.named_parameters()), TrainState(), lr=0.3, momentum=0.0, weight_decay=0.0)
        for (_, p), (_, q) in zip(full.named_parameters(), halves.named_parameters()):
            np.testing.assert_allclose(p.data, q.data, atol=1e-12)


class TestTrain:
    def test_zero_lr_leaves_params_bitwise(self, data):
        model = small_model()
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        train(model, data, None, OptimConfig(lr_init=0.0, **SMALL), max_epochs=1)
        for n, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])

    def test_determinism(self, data):
        runs = []
        for _ in range(2):
            model = small_model()
            state = train(model, data, data, OptimConfig(**SMALL), seed=3)
            runs.append((model.state_dict(), history_without_wall(state.history)))
        assert runs[0][1] == runs[1][1]
        for k in runs[0][0]:
            np.testing.assert_array_equal(runs[0][0][k], runs[1][0][k])

    def test_resume_matches_uninterrupted(self, data, tmp_path):
        cfg = OptimConfig(**SMALL)
        ref_model = small_model()
        ref = train(ref_model, data, data, cfg, seed=5)

        out = tmp_path / "run"
        first = small_model()
        train(first, data, data, cfg, seed=5, out_dir=str(out), max_epochs=1)
        model, state, saved_cfg = checkpoint_load(str(out / "last.ckpt"))
        assert saved_cfg == cfg and state.epoch == 1
        resumed = train(model, data, data, cfg, state=state, out_dir=str(out))
        assert history_without_wall(resumed.history) == history_without_wall(ref.history)
        for (n, a), (_, b) in zip(ref_model.state_dict().items(), model.state_dict().items()):
            np.testing.assert_array_equal(a, b, err_msg=n)
        with open(out / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3]

    def test_metrics_csv_and_checkpoints(self, data, tmp_path):
        state = train(small_model("sa"), data, data, OptimConfig(**SMALL), out_dir=str(tmp_path))
        with open(tmp_path / "metrics.csv") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        assert tuple(header) == METRIC_COLUMNS
        assert len(rows) == 3
        assert float(rows[0][1]) == 0.0  # epoch 1 runs at the start of the warmup ramp
        assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
        assert state.best_eval_acc == max(r["eval_acc"] for r in state.history)

    def test_loss_decreases(self, data):
        state = train(small_model(), data, None, OptimConfig(total_epochs=6, warmup_epochs=1, batch_size=16))
        assert state.history[-1]["train_loss"] < state.history[0]["train_loss"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_names_first_bad_layer(self, data):
        model = small_model()
        model.blocks[2].reduce.weight.data[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            train(model, data, None, OptimConfig(**SMALL))
        assert info.value.layer == "blocks.2"
        assert "blocks.2" in str(info.value)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(small_model(), (np.zeros((0, 3, 16, 16)), np.zeros(0, dtype=np.int64)), None, OptimConfig(**SMALL))

    def test_per_step_schedule(self, data):
        state = train(small_model(), data, None, OptimConfig(per_step_schedule=True, **SMALL), max_epochs=1)
        # 3 steps in epoch 0 with warmup 1: last step at t = 2/3
        assert state.lr_current == pytest.approx(0.05 * 2 / 3, abs=1e-15)
        assert not math.isnan(state.history[0]["train_loss"])

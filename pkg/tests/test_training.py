import csv
import math
import random

import pytest
import torch

from conftest import tiny_setup
from refground.data import ReferringSample
from refground.geometry import BoxXYWH
from refground.grounder import LossWeights
from refground.training import (
    LOG_COLUMNS,
    LRSchedule,
    NumericalError,
    SGDMomentum,
    TrainConfig,
    fit,
    grad_check,
    make_batches,
    rel_error,
    train_step,
    write_log,
)

ZERO = LossWeights(0, 0, 0, 0)


class TestSchedule:
    def test_examples(self):
        s = LRSchedule()
        assert [s.rate(e) for e in (0, 4, 5, 9, 10)] == [1e-3, 1e-3, 8e-4, 8e-4, 1e-3 * 0.8**2]
        assert s.rate(10) == pytest.approx(6.4e-4, rel=1e-12)

    def test_closed_form(self):
        s = LRSchedule()
        assert all(s.rate(e) == 1e-3 * 0.8 ** (e // 5) for e in range(100))


def _scalar(value):
    return torch.nn.Parameter(torch.tensor([value], dtype=torch.float64))


def _momentum_oracle(w, lr, mu, grad, steps):
    v = 0.0
    for _ in range(steps):
        v = mu * v - lr * grad(w)
        w = w + v
    return w


class TestSGD:
    def test_single_step(self):
        w = _scalar(1.0)
        opt = SGDMomentum([w], lr=0.1, momentum=0.0)
        (w**2).sum().backward()
        opt.step()
        assert w.item() == pytest.approx(0.8, abs=1e-15)

    def test_two_steps_constant_gradient(self):
        w = _scalar(1.0)
        opt = SGDMomentum([w], lr=0.1, momentum=0.9)
        for _ in range(2):
            opt.zero_grad()
            (2 * w).sum().backward()
            opt.step()
        # v1 = -0.2, v2 = 0.9 * -0.2 - 0.2 = -0.38
        assert w.item() == pytest.approx(1 - 0.2 - 0.38, abs=1e-15)

    def test_matches_recursion_on_quadratic(self):
        w = _scalar(1.0)
        opt = SGDMomentum([w], lr=0.1, momentum=0.9)
        for _ in range(7):
            opt.zero_grad()
            (w**2).sum().backward()
            opt.step()
        assert w.item() == pytest.approx(_momentum_oracle(1.0, 0.1, 0.9, lambda x: 2 * x, 7), abs=1e-14)

    def test_velocity_shapes(self):
        ps = [torch.nn.Parameter(torch.zeros(2, 3)), torch.nn.Parameter(torch.zeros(4))]
        opt = SGDMomentum(ps)
        assert [v.shape for v in opt.velocity] == [p.shape for p in ps]


def _sample(i, image, box, expr="red circle"):
    return ReferringSample(f"s{i}", image, 10, 10, expr, BoxXYWH(*box))


class TestBatches:
    def test_same_referent_one_batch(self):
        samples = [
            _sample(0, "a.png", (0, 0, 2, 2)),
            _sample(1, "a.png", (0, 0, 2, 2), "the red one"),
            _sample(2, "a.png", (0, 0, 2, 2), "red thing"),
            _sample(3, "a.png", (5, 5, 2, 2)),
            _sample(4, "b.png", (0, 0, 2, 2)),
        ]
        batches = make_batches(samples)
        assert sorted(map(sorted, batches)) == [[0, 1, 2], [3], [4]]

    def test_partition_and_seeded_order(self):
        samples = [_sample(i, f"{i % 7}.png", (i % 3, 0, 1, 1)) for i in range(40)]
        a = make_batches(samples, random.Random(5))
        b = make_batches(samples, random.Random(5))
        c = make_batches(samples, random.Random(6))
        assert a == b and a != c
        flat = sorted(i for batch in a for i in batch)
        assert flat == list(range(40))


class TestTrainStep:
    def test_zero_weights_leave_params_unchanged(self):
        model, train, _, av = tiny_setup(0)
        before = {k: v.clone() for k, v in model.state_dict().items() if "running" not in k}
        opt = SGDMomentum(model.parameters(), lr=0.1, momentum=0.9)
        aw = torch.as_tensor(av.weights, dtype=torch.float32)
        for rows in make_batches(train.samples)[:3]:
            train_step(model, train.batch(rows), opt, ZERO, aw)
        after = model.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_non_finite_loss_names_term(self):
        model, train, _, av = tiny_setup(0)
        batch = train.batch([0])
        batch["targets"] = torch.full_like(batch["targets"], math.nan)
        opt = SGDMomentum(model.parameters())
        with pytest.raises(NumericalError, match="loc"):
            train_step(model, batch, opt, LossWeights(), torch.as_tensor(av.weights, dtype=torch.float32))

    def test_breakdown_recombines(self):
        model, train, _, av = tiny_setup(1)
        opt = SGDMomentum(model.parameters())
        w = LossWeights()
        out = train_step(model, train.batch([0]), opt, w, torch.as_tensor(av.weights, dtype=torch.float32))
        recombined = 20 * out.loc + 5 * out.conf + out.att + 5 * out.attr
        assert abs(float(recombined) - float(out.total)) < 1e-5


class TestFit:
    def test_constant_accuracy_stops_after_patience(self):
        model, train, val, av = tiny_setup(0)
        result = fit(model, train, val, av, TrainConfig(weights=ZERO, max_epochs=50))
        assert result.best_epoch == 0
        assert result.stopped_early
        assert [row["epoch"] for row in result.log] == list(range(11))

    def test_recorded_lr_sequence(self):
        model, train, val, av = tiny_setup(0)
        result = fit(model, train, val, av, TrainConfig(weights=ZERO, max_epochs=12, patience=100))
        assert [row["lr"] for row in result.log] == [1e-3 * 0.8 ** (e // 5) for e in range(12)]
        assert not result.stopped_early

    def test_freeze_keeps_backbone_bit_identical(self):
        model, train, val, av = tiny_setup(2)
        before = {k: v.clone() for k, v in model.backbone.state_dict().items()}
        text_before = model.text.embedding.rows.detach().clone()
        fit(model, train, val, av, TrainConfig(max_epochs=2, freeze_backbone=True))
        after = model.backbone.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)
        assert not torch.equal(text_before, model.text.embedding.rows)

    def test_reproducible_and_log_columns(self, tmp_path):
        logs = []
        for _ in range(2):
            model, train, val, av = tiny_setup(3)
            logs.append(fit(model, train, val, av, TrainConfig(max_epochs=3, seed=3)).log)
        assert logs[0] == logs[1]
        path = tmp_path / "log.csv"
        write_log(logs[0], path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == LOG_COLUMNS
        assert len(rows) == 4

    def test_empty_split_rejected(self):
        model, train, val, av = tiny_setup(0)
        empty = train.__class__([], train.images[:0], train.image_index[:0], train.ids[:0], train.boxes[:0],
                                train.targets[:0], train.centers[:0], train.attr_labels[:0])
        with pytest.raises(ValueError):
            fit(model, train, empty, av, TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(patience=0)


class TestGradCheck:
    def test_quadratic(self):
        w = _scalar(3.0)
        report = grad_check(lambda: (w**2).sum(), [w])
        assert report.max_rel_error < 1e-8
        assert report.checked == 1

    def test_reports_wrong_gradient(self):
        w = _scalar(0.7)

        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x**2

            @staticmethod
            def backward(ctx, g):
                return g * 3.0

        report = grad_check(lambda: Bad.apply(w).sum(), [w])
        assert report.max_rel_error > 0.1

    def test_nonfinite_reported(self):
        w = _scalar(0.0)
        report = grad_check(lambda: torch.sqrt(w).sum(), {"w": [w]})
        assert not report.ok
        assert report.nonfinite == ["w[0][0]"]

    def test_rel_error_floor(self):
        assert rel_error(2.0, 1.0) == 0.5
        assert rel_error(0.0, 1e-9) == pytest.approx(1e-4)

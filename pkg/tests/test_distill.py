"""Optimizer behavior, the transfer loss, and the training loop."""

import math

import numpy as np
import pytest

from blockswap.data import Dataset, SyntheticSpec, make_synthetic
from blockswap.distill import SGD, EpochStats, TrainRecipe, at_loss, cosine_lr, evaluate, train
from blockswap.engine import (
    Parameter,
    Tensor,
    attention_map,
    backward,
    linear,
    softmax_cross_entropy,
)
from blockswap.errors import ConfigError, EngineError, TrainingDiverged
from blockswap.network import Network, NetworkConfig

from gradcheck import assert_grads_match


def small_net(seed=0):
    return Network(NetworkConfig.uniform(depth=10, width=1), np.random.default_rng(seed))


def small_task(train_count=128, eval_count=32, seed=0):
    return make_synthetic(SyntheticSpec(train_count=train_count,
                                        eval_count=eval_count, seed=seed))


class TestRecipe:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainRecipe(epochs=0)
        with pytest.raises(ConfigError):
            TrainRecipe(epochs=1, batch_size=0)
        with pytest.raises(ConfigError):
            TrainRecipe(epochs=1, lr0=0.0)
        with pytest.raises(ConfigError):
            TrainRecipe(epochs=1, momentum=1.0)
        with pytest.raises(ConfigError):
            TrainRecipe(epochs=1, weight_decay=-1e-4)
        with pytest.raises(ConfigError):
            TrainRecipe(epochs=1, beta=-1.0)


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 10, 0.1) == 0.1
        assert cosine_lr(10, 10, 0.1) == 0.0
        assert cosine_lr(5, 10, 0.1) == 0.05

    def test_monotone_decrease(self):
        values = [cosine_lr(t, 20, 0.1) for t in range(21)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            cosine_lr(-1, 10, 0.1)
        with pytest.raises(ConfigError):
            cosine_lr(11, 10, 0.1)


class TestSGD:
    def param(self, value, role=Parameter.CONV_WEIGHT):
        return Parameter(np.array([value], dtype=np.float32), role, "p")

    def test_momentum_hand_sequence(self):
        # v1 = 1 -> w 0.9; v2 = 1.9 -> w 0.71
        p = self.param(1.0)
        opt = SGD([p], lr=0.1, momentum=0.9)
        p.grad = np.ones(1)
        opt.step()
        assert np.allclose(p.data, 0.9)
        p.grad = np.ones(1)
        opt.step()
        assert np.allclose(p.data, 0.71)

    def test_decay_only_touches_conv_and_linear(self):
        conv = self.param(2.0, Parameter.CONV_WEIGHT)
        fc = self.param(2.0, Parameter.LINEAR_WEIGHT)
        scale_p = self.param(2.0, Parameter.BN_SCALE)
        bias = self.param(2.0, Parameter.LINEAR_BIAS)
        opt = SGD([conv, fc, scale_p, bias], lr=1.0, momentum=0.0, weight_decay=0.5)
        for p in (conv, fc, scale_p, bias):
            p.grad = np.zeros(1)
        opt.step()
        assert np.allclose(conv.data, 1.0)
        assert np.allclose(fc.data, 1.0)
        assert np.allclose(scale_p.data, 2.0)
        assert np.allclose(bias.data, 2.0)

    def test_missing_grad_is_skipped(self):
        p = self.param(1.0)
        opt = SGD([p], lr=0.1)
        opt.step()
        assert np.allclose(p.data, 1.0)

    def test_zero_grad(self):
        p = self.param(1.0)
        p.grad = np.ones(1)
        SGD([p], lr=0.1).zero_grad()
        assert p.grad is None

    def test_learns_separable_toy(self):
        # two linearly separable clusters must reach zero training error
        rng = np.random.default_rng(0)
        x = rng.normal(size=(40, 2)).astype(np.float32)
        y = (x[:, 0] > 0).astype(np.int64)
        x[:, 0] += np.where(y == 1, 1.0, -1.0)
        w = Parameter(np.zeros((2, 2), dtype=np.float32), Parameter.LINEAR_WEIGHT, "w")
        b = Parameter(np.zeros(2, dtype=np.float32), Parameter.LINEAR_BIAS, "b")
        opt = SGD([w, b], lr=0.5, momentum=0.9)
        for _ in range(100):
            loss = softmax_cross_entropy(linear(Tensor(x), w, b), y)
            backward(loss)
            opt.step()
            opt.zero_grad()
        logits = x @ w.data + b.data
        assert (logits.argmax(axis=1) == y).mean() == 1.0


class TestTransferLoss:
    def map_pair(self, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3, 4, 4))
        return attention_map(Tensor(x)), rng.normal(size=(2, 16)) ** 2 + 0.1

    def test_hand_example(self):
        student = Tensor(np.array([[3.0, 4.0]]))
        teacher = np.array([[1.0, 0.0]])
        loss = at_loss([student], [teacher], Tensor(np.float64(0.0)), beta=1.0)
        assert abs(float(loss.data) - math.sqrt(0.8)) < 1e-4

    def test_zero_when_student_equals_teacher(self):
        s, _ = self.map_pair()
        ce = Tensor(np.float64(1.25))
        loss = at_loss([s], [s.data.copy()], ce, beta=1000.0)
        assert float(loss.data) == 1.25

    def test_invariant_to_positive_rescaling(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 4, 4))
        t = rng.normal(size=(2, 16)) ** 2 + 0.1
        ce = Tensor(np.float64(0.0))
        base = at_loss([attention_map(Tensor(x))], [t], ce, beta=1.0)
        scaled = at_loss([attention_map(Tensor(17.0 * x))], [0.3 * t], ce, beta=1.0)
        assert math.isclose(float(base.data), float(scaled.data), rel_tol=1e-9)

    def test_beta_weighting_is_linear(self):
        s, t = self.map_pair(seed=2)
        ce = Tensor(np.float64(0.0))
        one = float(at_loss([s], [t], ce, beta=1.0).data)
        thousand = float(at_loss([s], [t], ce, beta=1000.0).data)
        assert math.isclose(thousand, 1000.0 * one, rel_tol=1e-9)

    def test_length_mismatch(self):
        s, t = self.map_pair(seed=3)
        with pytest.raises(ConfigError):
            at_loss([s, s], [t], Tensor(np.float64(0.0)), beta=1.0)

    def test_zero_norm_map_faults(self):
        s = Tensor(np.zeros((1, 4)))
        with pytest.raises(EngineError):
            at_loss([s], [np.ones((1, 4))], Tensor(np.float64(0.0)), beta=1.0)

    def test_gradients(self):
        # composite loss: ce(logits) + beta * map distances, differentiated
        # through the attention maps back to the raw stage activations
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 3, size=2)
        teachers = [rng.normal(size=(2, 16)) ** 2 + 0.1 for _ in range(2)]

        for _ in range(20):
            x1 = rng.normal(size=(2, 2, 4, 4))
            x2 = rng.normal(size=(2, 3, 4, 4))
            logits = rng.normal(size=(2, 3))

            def build(x1=x1, x2=x2, logits=logits):
                t1, t2, tl = Tensor(x1.copy()), Tensor(x2.copy()), Tensor(logits.copy())
                ce = softmax_cross_entropy(tl, labels)
                loss = at_loss([attention_map(t1), attention_map(t2)],
                               teachers, ce, beta=2.0)
                return [t1, t2, tl], loss

            assert_grads_match(build, [x1, x2, logits], tol=1e-3)


class TestTrainLoop:
    def test_loss_decreases_and_history_is_complete(self):
        train_ds, eval_ds = small_task()
        recipe = TrainRecipe(epochs=5, batch_size=32, seed=1)
        history = train(small_net(seed=1), train_ds, eval_ds, recipe)
        assert len(history) == 5
        assert [h.epoch for h in history] == list(range(5))
        assert history[-1].train_loss < history[0].train_loss
        for h in history:
            assert isinstance(h, EpochStats)
            assert h.lr == cosine_lr(h.epoch, 5, recipe.lr0)
            assert 0.0 <= h.eval_error <= 1.0

    def test_deterministic(self):
        train_ds, eval_ds = small_task()
        recipe = TrainRecipe(epochs=2, batch_size=32, seed=2)
        a = train(small_net(seed=2), train_ds, eval_ds, recipe)
        b = train(small_net(seed=2), train_ds, eval_ds, recipe)
        assert a == b

    def test_self_teacher_matches_plain_ce(self):
        # a student distilling from itself sees a zero transfer term with
        # zero gradient, so weights must track the plain-CE run bitwise
        train_ds, eval_ds = small_task(train_count=64, eval_count=16)
        recipe = TrainRecipe(epochs=2, batch_size=32, seed=3, beta=1000.0)

        plain = small_net(seed=3)
        train(plain, train_ds, eval_ds, recipe)
        selfie = small_net(seed=3)
        train(selfie, train_ds, eval_ds, recipe, teacher=selfie)

        for name in plain.params:
            assert np.array_equal(plain.params[name].data, selfie.params[name].data)

    def test_teacher_changes_training(self):
        train_ds, eval_ds = small_task(train_count=64, eval_count=16)
        recipe = TrainRecipe(epochs=1, batch_size=32, seed=4)
        plain = small_net(seed=4)
        train(plain, train_ds, eval_ds, recipe)
        distilled = small_net(seed=4)
        train(distilled, train_ds, eval_ds, recipe, teacher=small_net(seed=99))
        assert any(not np.array_equal(plain.params[n].data, distilled.params[n].data)
                   for n in plain.params)

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergence_raises_with_history(self):
        # batch norm keeps moderately huge weights in check, so the step
        # size must be large enough to overflow float32 outright
        train_ds, eval_ds = small_task(train_count=64, eval_count=16)
        recipe = TrainRecipe(epochs=3, batch_size=32, lr0=1e40, seed=5)
        with pytest.raises(TrainingDiverged) as info:
            train(small_net(seed=5), train_ds, eval_ds, recipe)
        assert isinstance(info.value.history, list)

    def test_oversized_batch_faults(self):
        train_ds, eval_ds = small_task(train_count=32, eval_count=16)
        with pytest.raises(ConfigError, match="exceeds"):
            train(small_net(), train_ds, eval_ds, TrainRecipe(epochs=1, batch_size=64))

    def test_evaluate_range_and_determinism(self):
        _, eval_ds = small_task(train_count=32, eval_count=20)
        net = small_net(seed=6)
        a = evaluate(net, eval_ds, batch=8)
        b = evaluate(net, eval_ds, batch=8)
        assert a == b
        assert 0.0 <= a <= 1.0

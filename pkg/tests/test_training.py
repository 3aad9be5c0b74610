import dataclasses
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import accuracy_score, confusion_matrix, f1_score, precision_score, recall_score

from sefusion.model import build_model, forward
from sefusion.tensor import Tensor, backward, finite_diff_check
from sefusion.training import (
    AdamState,
    ConfusionMatrix,
    TrainingError,
    adam_step,
    bce_loss,
    evaluate,
    metrics,
    train,
)

from conftest import separable_set


class TestBCE:
    def test_ln2(self):
        loss = bce_loss(np.array([1]), Tensor(np.array([0.5])))
        assert loss.shape == ()
        assert float(loss) == pytest.approx(math.log(2), abs=1e-7)

    def test_near_one(self):
        assert float(bce_loss(np.array([1]), Tensor(np.array([1.0])))) <= 1e-6
        assert np.isfinite(float(bce_loss(np.array([1]), Tensor(np.array([0.0])))))

    def test_matches_loop(self, rng):
        y = rng.integers(0, 2, 20)
        p = rng.uniform(0.01, 0.99, 20)
        expect = sum(-(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)) for yi, pi in zip(y, p)) / 20
        assert float(bce_loss(y, Tensor(p))) == pytest.approx(expect, abs=1e-6)

    def test_gradient(self, rng):
        y = rng.integers(0, 2, 8)
        assert finite_diff_check(lambda t: bce_loss(y, t), rng.uniform(0.1, 0.9, 8)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bce_loss(np.array([1, 0]), Tensor(np.array([0.5])))


class TestAdam:
    def test_first_step_is_learning_rate(self):
        p = Tensor(np.ones(5, dtype=np.float64), requires_grad=True)
        p.grad = np.full(5, 3.7)
        adam_step(AdamState(1e-3), [("p", p)])
        np.testing.assert_allclose(1.0 - p.data, 1e-3, rtol=0.01)

    def test_zero_gradient(self):
        p = Tensor(np.arange(4.0), requires_grad=True)
        state = AdamState()
        p.grad = np.zeros(4)
        adam_step(state, [("p", p)])
        np.testing.assert_array_equal(p.data, np.arange(4.0))
        assert state.t == 1

    def test_moments_decay(self):
        p = Tensor(np.arange(4.0), requires_grad=True)
        state = AdamState()
        p.grad = np.ones(4)
        adam_step(state, [("p", p)])
        m_before, v_before = state.m["p"].copy(), state.v["p"].copy()
        p.grad = np.zeros(4)
        adam_step(state, [("p", p)])
        np.testing.assert_allclose(state.m["p"], 0.9 * m_before)
        np.testing.assert_allclose(state.v["p"], 0.999 * v_before)
        assert state.t == 2

    def test_missing_gradient(self):
        with pytest.raises(TrainingError, match="'w'"):
            adam_step(AdamState(), [("w", Tensor(np.ones(2), requires_grad=True))])

    def test_moments_shaped_like_params(self, rng):
        p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        p.grad = rng.normal(size=(3, 2))
        s = AdamState()
        adam_step(s, [("p", p)])
        assert s.m["p"].shape == s.v["p"].shape == (3, 2)

    def test_matches_reference_formula(self, rng):
        w0 = rng.normal(size=4)
        grads = rng.normal(size=(3, 4))
        p = Tensor(w0.copy(), requires_grad=True)
        s = AdamState(0.01)
        m = v = np.zeros(4)
        w = w0.copy()
        for t, g in enumerate(grads, 1):
            p.grad = g
            adam_step(s, [("p", p)])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, w, rtol=1e-12)


class TestTrain:
    def test_epochs_zero(self, tiny_cfg, separable):
        X, y = separable
        m = build_model(tiny_cfg)
        before = m.state_dict()
        hist = train(m, X, y, epochs=0)
        assert len(hist) == 0 and hist.val_acc == []
        assert all(before[k].tobytes() == v.tobytes() for k, v in m.state_dict().items())

    def test_frozen_everything(self, tiny_cfg, separable):
        X, y = separable
        m = build_model(tiny_cfg)
        m.freeze_all()
        before = m.state_dict()
        hist = train(m, X, y, X, y, epochs=3, batch_size=8)
        assert len(set(hist.val_acc)) == 1 and len(set(hist.val_loss)) == 1
        assert all(before[k].tobytes() == v.tobytes() for k, v in m.state_dict().items())

    def test_deterministic(self, tiny_cfg, separable):
        X, y = separable
        runs = []
        for _ in range(2):
            m = build_model(tiny_cfg)
            h = train(m, X, y, X, y, epochs=2, batch_size=8, seed=3)
            runs.append((h, m.state_dict()))
        assert runs[0][0] == runs[1][0]
        assert all(runs[0][1][k].tobytes() == runs[1][1][k].tobytes() for k in runs[0][1])

    def test_frozen_params_unchanged(self, tiny_cfg, separable):
        X, y = separable
        m = build_model(dataclasses.replace(tiny_cfg, branch_a=tiny_cfg.branch_a.with_tail(1)))
        frozen = {n: t.data.copy() for n, t in m.named_parameters() if not m.trainable[n]}
        assert frozen
        trainable_before = {n: t.data.copy() for n, t in m.trainable_parameters()}
        train(m, X, y, epochs=2, batch_size=8)
        params = dict(m.named_parameters())
        for n, v in frozen.items():
            assert params[n].data.tobytes() == v.tobytes(), n
        assert any(not np.array_equal(params[n].data, v) for n, v in trainable_before.items())

    def test_loss_decreases(self, tiny_cfg):
        X, y = separable_set()
        m = build_model(tiny_cfg)
        hist = train(m, X, y, epochs=30, batch_size=8, learning_rate=1e-3)
        assert hist.train_loss[-1] < hist.train_loss[0]

    def test_non_finite_loss_aborts(self, tiny_cfg, separable, monkeypatch):
        import sefusion.training as T

        X, y = separable
        monkeypatch.setattr(T, "bce_loss", lambda yb, p: Tensor(np.array(np.nan)))
        with pytest.raises(TrainingError, match="non-finite"):
            train(build_model(tiny_cfg), X, y, epochs=1, batch_size=16)

    def test_empty_sets(self, tiny_cfg):
        with pytest.raises(ValueError):
            train(build_model(tiny_cfg), np.zeros((0, 3, 16, 16), np.float32), np.zeros(0), epochs=1)

    def test_trailing_singleton_batch(self, tiny_cfg):
        X, y = separable_set(n=18)
        X, y = X[:17], y[:17]
        hist = train(build_model(tiny_cfg), X, y, epochs=1, batch_size=8)
        assert len(hist) == 1


class TestEvaluate:
    def test_all_positive(self, tiny_cfg, separable):
        X, _ = separable
        m = build_model(tiny_cfg)
        m.head.bias.data[...] = 50.0
        cm = evaluate(m, X, np.ones(len(X), dtype=int))
        assert cm == ConfusionMatrix(tp=len(X), tn=0, fp=0, fn=0)

    def test_matches_counting_loop(self, tiny_cfg, rng):
        m = build_model(tiny_cfg)
        X = rng.uniform(size=(12, 3, 16, 16)).astype(np.float32)
        y = rng.integers(0, 2, 12)
        pred = (forward(m, X).data >= 0.5).astype(int)
        counts = dict(tp=0, tn=0, fp=0, fn=0)
        for t, p in zip(y, pred):
            counts[("t" if t == p else "f") + ("p" if p == 1 else "n")] += 1
        cm = evaluate(m, X, y)
        assert cm == ConfusionMatrix(**counts)
        assert cm.total == 12

    def test_empty(self, tiny_cfg):
        with pytest.raises(ValueError):
            evaluate(build_model(tiny_cfg), np.zeros((0, 3, 16, 16)), np.zeros(0))


class TestMetrics:
    def test_perfect(self):
        assert metrics(ConfusionMatrix(tp=5, tn=5))[:4] == (1.0, 1.0, 1.0, 1.0)

    def test_arithmetic(self):
        m = metrics(ConfusionMatrix(tp=3, tn=5, fp=1, fn=1))
        assert (m.accuracy, m.precision, m.recall, m.f1) == (0.8, 0.75, 0.75, 0.75)
        assert not m.degenerate

    def test_degenerate(self):
        with pytest.warns(RuntimeWarning):
            m = metrics(ConfusionMatrix(tp=0, tn=4, fp=0, fn=2))
        assert m.precision == 0.0 and m.f1 == 0.0 and m.degenerate

    def test_empty(self):
        with pytest.raises(ValueError):
            metrics(ConfusionMatrix())

    def test_weighted_matches_sklearn(self, rng):
        y, p = rng.integers(0, 2, 50), rng.integers(0, 2, 50)
        m = metrics(ConfusionMatrix.from_labels(y, p), average="weighted")
        assert m.precision == pytest.approx(precision_score(y, p, average="weighted"), abs=1e-12)
        assert m.recall == pytest.approx(recall_score(y, p, average="weighted"), abs=1e-12)
        assert m.f1 == pytest.approx(f1_score(y, p, average="weighted"), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
    def test_sklearn_oracle(self, pairs):
        y, p = np.array(pairs).T
        cm = ConfusionMatrix.from_labels(y, p)
        tn, fp, fn, tp = confusion_matrix(y, p, labels=[0, 1]).ravel()
        assert (cm.tp, cm.tn, cm.fp, cm.fn) == (tp, tn, fp, fn)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = metrics(cm)
            assert m.accuracy == pytest.approx(accuracy_score(y, p), abs=1e-12)
            assert m.precision == pytest.approx(precision_score(y, p, zero_division=0), abs=1e-12)
            assert m.recall == pytest.approx(recall_score(y, p, zero_division=0), abs=1e-12)
            assert m.f1 == pytest.approx(f1_score(y, p, zero_division=0), abs=1e-12)
        if m.precision and m.recall:
            assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall), abs=1e-12)

    def test_from_labels_rejects_non_binary(self):
        with pytest.raises(ValueError):
            ConfusionMatrix.from_labels([0, 2], [0, 1])

    def test_as_array(self):
        np.testing.assert_array_equal(ConfusionMatrix(tp=1, tn=2, fp=3, fn=4).as_array(), [[2, 3], [4, 1]])


def test_state_reuse_continues_step_count(tiny_cfg, separable):
    X, y = separable
    s = AdamState(1e-3)
    m = build_model(tiny_cfg)
    train(m, X, y, epochs=1, batch_size=8, state=s)
    assert s.t == 2
    train(m, X, y, epochs=1, batch_size=8, state=s)
    assert s.t == 4


def test_backward_through_model_populates_trainable_grads(tiny_cfg, separable):
    X, y = separable
    m = build_model(tiny_cfg)
    backward(bce_loss(y[:4], forward(m, X[:4], "training", np.random.default_rng(0))))
    for n, t in m.named_parameters():
        assert (t.grad is not None) == m.trainable[n], n

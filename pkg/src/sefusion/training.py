"""Loss, optimizer, training loop, and confusion-matrix metrics."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .layers import TRAINING
from .model import FusionModel, forward, predict_proba, threshold
from .tensor import Function, Tensor, backward, no_grad

logger = logging.getLogger(__name__)

PROB_CLIP = 1e-7


class TrainingError(RuntimeError):
    pass


class BinaryCrossEntropy(Function):
    name = "bce_loss"

    @staticmethod
    def forward(ctx, p, y=None):
        pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
        y = y.astype(p.dtype)
        ctx.save(p, pc, y)
        losses = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
        return np.asarray(losses.mean(), dtype=p.dtype)

    @staticmethod
    def backward(ctx, grad):
        p, pc, y = ctx.saved
        inside = (p >= PROB_CLIP) & (p <= 1.0 - PROB_CLIP)
        g = (-y / pc + (1.0 - y) / (1.0 - pc)) / p.size
        return (grad * g * inside,)


def bce_loss(y, p: Tensor) -> Tensor:
    """Mean binary cross-entropy; probabilities are clipped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(y)
    if y.shape != p.shape:
        raise ValueError(f"labels {y.shape} and probabilities {p.shape} differ in shape")
    return BinaryCrossEntropy.apply(p, y=y)


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(state: AdamState, params: list[tuple[str, Tensor]]) -> None:
    """One bias-corrected Adam update of every ``(name, tensor)`` pair, in place.

    Only pass trainable parameters; each must carry a populated ``.grad``.
    """
    for name, p in params:
        if p.grad is None:
            raise TrainingError(f"missing gradient for trainable parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params:
        g = p.grad.astype(np.float64)
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p.data -= update.astype(p.dtype)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # a trailing singleton batch cannot be batch-normalized; fold it into its neighbor
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def _eval_loss_acc(model: FusionModel, X, y) -> tuple[float, float]:
    probs = predict_proba(model, X)
    with no_grad():
        loss = float(bce_loss(y, Tensor(probs)).data)
    return loss, float(np.mean(threshold(probs) == y))


def train(
    model: FusionModel,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
    epochs: int = 50,
    batch_size: int = 32,
    seed: int = 0,
    learning_rate: float = 1e-4,
    state: AdamState | None = None,
) -> History:
    """Mini-batch Adam on BCE; the model is updated in place (last epoch kept).

    Train loss/accuracy are batch averages in training mode; validation
    numbers use inference mode.
    """
    y_train = np.asarray(y_train)
    if len(X_train) == 0:
        raise ValueError("training set is empty")
    if X_val is not None and len(X_val) == 0:
        raise ValueError("validation set is empty")
    rng = np.random.default_rng(seed)
    state = state or AdamState(learning_rate)
    hist = History()
    params = model.trainable_parameters()
    for epoch in range(epochs):
        loss_sum = 0.0
        correct = 0
        for idx in _batches(rng.permutation(len(X_train)), batch_size):
            model.zero_grad()
            xb = X_train[idx]
            yb = y_train[idx]
            probs = forward(model, xb, TRAINING, rng)
            loss = bce_loss(yb, probs)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"loss became non-finite ({value}) in epoch {epoch + 1}")
            if loss.requires_grad and params:
                backward(loss)
                adam_step(state, params)
            loss_sum += value * len(idx)
            correct += int(np.sum(threshold(probs.data) == yb))
        hist.train_loss.append(loss_sum / len(X_train))
        hist.train_acc.append(correct / len(X_train))
        if X_val is not None:
            vl, va = _eval_loss_acc(model, X_val, np.asarray(y_val))
            hist.val_loss.append(vl)
            hist.val_acc.append(va)
        logger.debug("epoch %d: loss %.4f acc %.4f", epoch + 1, hist.train_loss[-1], hist.train_acc[-1])
    return hist


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionMatrix":
        t, p = np.asarray(y_true), np.asarray(y_pred)
        for name, v in (("y_true", t), ("y_pred", p)):
            if not np.isin(v, (0, 1)).all():
                raise ValueError(f"{name} must contain only 0 and 1")
        t, p = t.astype(bool), p.astype(bool)
        if t.shape != p.shape:
            raise ValueError(f"label vectors differ in shape: {t.shape} vs {p.shape}")
        return cls(
            tp=int(np.sum(t & p)),
            tn=int(np.sum(~t & ~p)),
            fp=int(np.sum(~t & p)),
            fn=int(np.sum(t & ~p)),
        )

    def as_array(self) -> np.ndarray:
        """Rows = actual (Others, Monkeypox), columns = predicted."""
        return np.array([[self.tn, self.fp], [self.fn, self.tp]])


def evaluate(model: FusionModel, X, y) -> ConfusionMatrix:
    if len(X) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return ConfusionMatrix.from_labels(y, threshold(predict_proba(model, X)))


class Metrics(NamedTuple):
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def metrics(cm: ConfusionMatrix, average: str = "binary") -> Metrics:
    """Accuracy, precision, recall and F1 as fractions.

    ``average="binary"`` scores the positive class (Monkeypox). ``"weighted"``
    averages the per-class scores weighted by support. Zero denominators give
    0 and set ``degenerate``.
    """
    if cm.total < 1:
        raise ValueError("confusion matrix is empty")
    accuracy = (cm.tp + cm.tn) / cm.total
    if average == "binary":
        prec, recall, f1, degenerate = _class_scores(cm.tp, cm.fp, cm.fn)
        if degenerate:
            warnings.warn(f"degenerate denominator in metrics for {cm}", RuntimeWarning, stacklevel=2)
        return Metrics(accuracy, prec, recall, f1, degenerate)
    if average != "weighted":
        raise ValueError(f"unknown average {average!r}")
    pos = _class_scores(cm.tp, cm.fp, cm.fn)
    neg = _class_scores(cm.tn, cm.fn, cm.fp)
    w_pos = (cm.tp + cm.fn) / cm.total
    w_neg = (cm.tn + cm.fp) / cm.total
    return Metrics(
        accuracy,
        w_pos * pos[0] + w_neg * neg[0],
        w_pos * pos[1] + w_neg * neg[1],
        w_pos * pos[2] + w_neg * neg[2],
        pos[3] or neg[3],
    )


def _class_scores(tp, fp, fn):
    prec, d1 = _ratio(tp, tp + fp)
    rec, d2 = _ratio(tp, tp + fn)
    f1, d3 = _ratio(2 * prec * rec, prec + rec)
    return prec, rec, f1, d1 or d2 or d3

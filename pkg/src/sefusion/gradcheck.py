"""Finite-difference verification of every registered primitive.

Each check builds float64 inputs from a fixed seed, contracts the primitive's
output with a random weight tensor to get a scalar, and compares the
backward pass against central differences for every differentiable input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .model import BackboneConfig, FusionModelConfig, Stage, build_model, forward
from .tensor import PRIMITIVES, Tensor, finite_diff_check, mul, no_grad, sum_all
from .training import BinaryCrossEntropy

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3
EPS = 1e-6

F64 = np.float64


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=F64), dtype=F64)


def _contract(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar sum(out * W) with a fixed random W, so every output entry matters."""
    if out.data.size == 1:
        return sum_all(out)
    return sum_all(mul(out, _t(rng.normal(size=out.shape))))


def check_inputs(fn: Callable[..., Tensor], inputs: list[np.ndarray], seed: int = 0, diff: tuple[int, ...] | None = None) -> float:
    """Max relative error over all differentiable positional inputs of ``fn``."""
    worst = 0.0
    diff = tuple(range(len(inputs))) if diff is None else diff
    for pos in diff:
        def f(t, pos=pos):
            args = [_t(a) for a in inputs]
            args[pos] = t
            return _contract(fn(*args), np.random.default_rng(seed + 1000))
        worst = max(worst, finite_diff_check(f, inputs[pos], EPS))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _sigmoid(rng):
    return check_inputs(lambda x: PRIMITIVES["sigmoid"].apply(x), [rng.normal(size=(3, 4)) * 2])


def _relu(rng):
    return check_inputs(lambda x: PRIMITIVES["relu"].apply(x), [_away_from_zero(rng, (3, 5))])


def _matmul(rng):
    return check_inputs(lambda a, b: PRIMITIVES["matmul"].apply(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])


def _conv2d(rng):
    x, k = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    e1 = check_inputs(lambda a, b: PRIMITIVES["conv2d"].apply(a, b, stride=2, padding=1), [x, k])
    e2 = check_inputs(lambda a, b: PRIMITIVES["conv2d"].apply(a, b, stride=1, padding=0), [x[:1], k[:2]])
    return max(e1, e2)


def _gap(rng):
    return check_inputs(lambda x: PRIMITIVES["global_avg_pool"].apply(x), [rng.normal(size=(2, 3, 4, 4))])


def _chan_mul(rng):
    return check_inputs(
        lambda x, e: PRIMITIVES["elementwise_mul_broadcast"].apply(x, e),
        [rng.normal(size=(2, 3, 3, 3)), rng.uniform(0.1, 0.9, size=(2, 3))],
    )


def _concat(rng):
    return check_inputs(
        lambda a, b: PRIMITIVES["concat_channels"].apply(a, b),
        [rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 3, 3))],
    )


def _add(rng):
    e1 = check_inputs(lambda a, b: PRIMITIVES["add"].apply(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])
    e2 = check_inputs(lambda a, b: PRIMITIVES["add"].apply(a, b), [rng.normal(size=(3, 4)), rng.normal(size=4)])
    return max(e1, e2)


def _mul(rng):
    return check_inputs(lambda a, b: PRIMITIVES["mul"].apply(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])


def _sub(rng):
    return check_inputs(lambda a, b: PRIMITIVES["sub"].apply(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])


def _sum_all(rng):
    return check_inputs(lambda a: PRIMITIVES["sum_all"].apply(a), [rng.normal(size=(3, 4))])


def _reshape(rng):
    return check_inputs(lambda a: PRIMITIVES["reshape"].apply(a, shape=(6, 2)), [rng.normal(size=(3, 4))])


def _bn_train(rng):
    e1 = check_inputs(
        lambda x, g, b: PRIMITIVES["batchnorm_training"].apply(x, g, b, epsilon=1e-5),
        [rng.normal(size=(4, 3)), rng.uniform(0.5, 1.5, 3), rng.normal(size=3)],
    )
    e2 = check_inputs(
        lambda x, g, b: PRIMITIVES["batchnorm_training"].apply(x, g, b, epsilon=1e-5),
        [rng.normal(size=(2, 3, 2, 2)), rng.uniform(0.5, 1.5, 3), rng.normal(size=3)],
    )
    return max(e1, e2)


def _bn_infer(rng):
    mean, var = rng.normal(size=3), rng.uniform(0.5, 2.0, 3)
    return check_inputs(
        lambda x, g, b, m, v: PRIMITIVES["batchnorm_inference"].apply(x, g, b, m, v, epsilon=1e-5),
        [rng.normal(size=(2, 3, 2, 2)), rng.uniform(0.5, 1.5, 3), rng.normal(size=3), mean, var],
        diff=(0, 1, 2),
    )


def _dropout(rng):
    mask = (rng.random((4, 5)) >= 0.3) / 0.7
    return check_inputs(lambda x: PRIMITIVES["dropout"].apply(x, mask=mask), [rng.normal(size=(4, 5))])


def _chan_bias(rng):
    return check_inputs(lambda x, b: PRIMITIVES["add_channel_bias"].apply(x, b), [rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3)])


def _bce(rng):
    y = rng.integers(0, 2, size=6)
    return check_inputs(lambda p: PRIMITIVES["bce_loss"].apply(p, y=y), [rng.uniform(0.05, 0.95, 6)])


def _se_block(rng):
    c, r = 8, 2
    x = rng.normal(size=(2, c, 3, 3))
    w1 = rng.normal(size=(c, c // r)) * 0.5
    w2 = rng.normal(size=(c // r, c)) * 0.5

    def fn(x, w1, w2):
        return L.se_block_forward(L.SEBlockParams(w1, w2, r), x)

    return check_inputs(fn, [x, w1, w2])


TINY_CONFIG = FusionModelConfig(
    branch_a=BackboneConfig("a", (Stage(4, 3, 2), Stage(8, 3, 2)), 2),
    branch_b=BackboneConfig("b", (Stage(8, 3, 4), Stage(8, 3, 1, residual=True)), 2),
    se_ratio=16,
    dense1_units=6,
    dense1_dropout=0.2,
    dense2_units=5,
    dense2_dropout=0.1,
    input_size=(8, 8),
    seed=3,
)


def _full_model(rng, cfg: FusionModelConfig = TINY_CONFIG):
    """Inference-mode model path (dropout off, frozen BN statistics)."""
    base = build_model(cfg, dtype=F64)
    # non-trivial running statistics so the inference BN path is exercised
    for name, t in base.named_tensors():
        if name.endswith("running_mean"):
            t.data[...] = rng.normal(size=t.shape) * 0.1
        elif name.endswith("running_var"):
            t.data[...] = rng.uniform(0.5, 1.5, size=t.shape)
    x0 = rng.uniform(0, 1, size=(3, 3, *cfg.input_size))
    y = np.array([1, 0, 1])
    worst = 0.0

    def loss_of(model, x):
        return BinaryCrossEntropy.apply(forward(model, x, L.INFERENCE), y=y)

    worst = max(worst, finite_diff_check(lambda x: loss_of(base, x), x0, EPS))
    for pname in ("a.stage0.kernel", "b.stage1.kernel", "a.se.w1", "b.se.w2", "dense1.weights", "dense2.bn.gamma", "head.weights"):
        target = dict(base.named_tensors())[pname]
        start = target.data.copy()
        worst = max(worst, _param_check(base, target, start, lambda: loss_of(base, _t(x0))))
    return worst


def _param_check(model, target: Tensor, start: np.ndarray, loss_fn) -> float:
    """Analytic gradient of a model parameter vs central differences."""
    model.zero_grad()
    target.data = start.copy()
    was = target.requires_grad
    target.requires_grad = True
    loss = loss_fn()
    loss.backward()
    analytic = target.grad.copy()
    flat = target.data.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + EPS
            hi = float(loss_fn().data)
            flat[i] = orig - EPS
            lo = float(loss_fn().data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * EPS)
    target.requires_grad = was
    model.zero_grad()
    numeric = numeric.reshape(start.shape)
    return float((np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))).max())


@dataclass(frozen=True)
class Check:
    name: str
    run: Callable[[np.random.Generator], float]
    tol: float = PRIMITIVE_TOL


PRIMITIVE_CHECKS: dict[str, Callable] = {
    "sigmoid": _sigmoid,
    "relu": _relu,
    "matmul": _matmul,
    "conv2d": _conv2d,
    "global_avg_pool": _gap,
    "elementwise_mul_broadcast": _chan_mul,
    "concat_channels": _concat,
    "add": _add,
    "mul": _mul,
    "sub": _sub,
    "sum_all": _sum_all,
    "reshape": _reshape,
    "batchnorm_training": _bn_train,
    "batchnorm_inference": _bn_infer,
    "dropout": _dropout,
    "add_channel_bias": _chan_bias,
    "bce_loss": _bce,
}


def all_checks() -> list[Check]:
    missing = sorted(set(PRIMITIVES) - set(PRIMITIVE_CHECKS))
    if missing:
        raise RuntimeError(f"registered primitives without a gradient check: {missing}")
    checks = [Check(name, PRIMITIVE_CHECKS[name]) for name in sorted(PRIMITIVES)]
    checks.append(Check("se_block", _se_block))
    checks.append(Check("full_model", _full_model, MODEL_TOL))
    return checks


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)


def run_all(seed: int = 0) -> list[CheckResult]:
    results = []
    for i, check in enumerate(all_checks()):
        try:
            err = check.run(np.random.default_rng(seed + i))
        except Exception:
            err = float("inf")
        results.append(CheckResult(check.name, err, check.tol))
    return results

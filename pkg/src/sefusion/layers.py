"""Parameterized layers and the squeeze-and-excitation block."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Function,
    ShapeError,
    Tensor,
    add,
    elementwise_mul_broadcast,
    global_avg_pool,
    matmul,
    relu,
    sigmoid,
)

TRAINING = "training"
INFERENCE = "inference"

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99
SE_DEFAULT_RATIO = 16


def _check_mode(mode: str) -> None:
    if mode not in (TRAINING, INFERENCE):
        raise ValueError(f"mode must be {TRAINING!r} or {INFERENCE!r}, got {mode!r}")


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class DenseParams:
    weights: Tensor  # [in, out]
    bias: Tensor  # [out]

    def __post_init__(self):
        w, b = self.weights.shape, self.bias.shape
        if len(w) != 2 or min(w) < 1 or b != (w[1],):
            raise ShapeError(f"dense weights {w} and bias {b} are inconsistent")

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32) -> "DenseParams":
        return cls(
            Tensor(uniform_init(rng, (n_in, n_out), n_in, dtype), requires_grad=True),
            Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True),
        )


def dense_forward(p: DenseParams, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != p.weights.shape[0]:
        raise ShapeError(f"dense layer expects [N, {p.weights.shape[0]}] input, got {x.shape}")
    return add(matmul(x, p.weights), p.bias)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("batch norm epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("batch norm momentum must lie in (0, 1)")
        if np.any(self.running_var.data < 0):
            raise ValueError("running variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def init(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormParams":
        return cls(
            Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype=dtype)),
            Tensor(np.ones(channels, dtype=dtype)),
            **kw,
        )


def _channel_axes(x: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    # (reduction axes, broadcast shape for a per-channel vector)
    if x.ndim == 2:
        return (0,), (1, -1)
    return (0, 2, 3), (1, -1, 1, 1)


class BatchNormTrain(Function):
    name = "batchnorm_training"

    @staticmethod
    def forward(ctx, x, gamma, beta, epsilon=BN_EPSILON):
        axes, bshape = _channel_axes(x)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        ctx.save(xhat, inv_std, gamma, axes, bshape)
        ctx.batch_stats = (mean, var)
        return (xhat * gamma.reshape(bshape) + beta.reshape(bshape)).astype(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        xhat, inv_std, gamma, axes, bshape = ctx.saved
        m = xhat.size // xhat.shape[1]
        dbeta = grad.sum(axis=axes)
        dgamma = (grad * xhat).sum(axis=axes)
        dxhat = grad * gamma.reshape(bshape)
        dx = (inv_std.reshape(bshape) / m) * (
            m * dxhat - dxhat.sum(axis=axes).reshape(bshape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
        )
        return dx.astype(grad.dtype), dgamma, dbeta


class BatchNormInfer(Function):
    name = "batchnorm_inference"

    @staticmethod
    def forward(ctx, x, gamma, beta, mean, var, epsilon=BN_EPSILON):
        _, bshape = _channel_axes(x)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        ctx.save(xhat, inv_std, gamma, bshape, x.ndim)
        return (xhat * gamma.reshape(bshape) + beta.reshape(bshape)).astype(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        xhat, inv_std, gamma, bshape, ndim = ctx.saved
        axes = (0,) if ndim == 2 else (0, 2, 3)
        return (
            grad * (gamma * inv_std).reshape(bshape),
            (grad * xhat).sum(axis=axes),
            grad.sum(axis=axes),
            None,
            None,
        )


def batchnorm_forward(p: BatchNormParams, x: Tensor, mode: str) -> Tensor:
    """Normalize per channel (axis 1) of a [N,C] or [N,C,H,W] tensor.

    In training mode the batch statistics are used and the running estimates
    are updated in place: ``running = momentum * running + (1 - momentum) * batch``.
    """
    _check_mode(mode)
    if x.ndim not in (2, 4) or x.shape[1] != p.channels:
        raise ShapeError(f"batch norm over {p.channels} channels got input {x.shape}")
    if mode == INFERENCE:
        return BatchNormInfer.apply(x, p.gamma, p.beta, p.running_mean, p.running_var, epsilon=p.epsilon)
    if x.shape[0] < 2:
        raise ValueError("batch norm in training mode needs a batch of at least 2 samples")
    out = BatchNormTrain.apply(x, p.gamma, p.beta, epsilon=p.epsilon)
    mean, var = _last_batch_stats(out, x, p)
    mom = p.momentum
    dt = p.running_mean.dtype
    p.running_mean.data[...] = (mom * p.running_mean.data + (1 - mom) * mean).astype(dt)
    p.running_var.data[...] = (mom * p.running_var.data + (1 - mom) * var).astype(dt)
    return out


def _last_batch_stats(out: Tensor, x: Tensor, p: BatchNormParams):
    if out._node is not None:
        return out._node.ctx.batch_stats
    axes, _ = _channel_axes(x.data)
    return x.data.mean(axis=axes), x.data.var(axis=axes)


@dataclass
class DropoutSpec:
    rate: float
    mode: str = TRAINING

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        _check_mode(self.mode)


class DropoutMask(Function):
    name = "dropout"

    @staticmethod
    def forward(ctx, x, mask=None):
        ctx.save(mask)
        return x * mask

    @staticmethod
    def backward(ctx, grad):
        (mask,) = ctx.saved
        return (grad * mask,)


def dropout_forward(s: DropoutSpec, x: Tensor, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); inference is the identity."""
    if s.mode == INFERENCE or s.rate == 0.0:
        return x
    keep = rng.random(x.shape) >= s.rate
    mask = (keep / (1.0 - s.rate)).astype(x.dtype)
    return DropoutMask.apply(x, mask=mask)


def resolve_se_ratio(channels: int, ratio: int = SE_DEFAULT_RATIO) -> int:
    """Reduction ratio actually used for ``channels``: falls back to C when C < ratio."""
    if ratio < 1:
        raise ValueError(f"SE reduction ratio must be positive, got {ratio}")
    r = channels if channels < ratio else ratio
    if channels % r:
        raise ValueError(f"SE reduction ratio {r} does not divide {channels} channels")
    return r


@dataclass
class SEBlockParams:
    w1: Tensor  # [C, C/r]
    w2: Tensor  # [C/r, C]
    reduction_ratio: int = field(default=SE_DEFAULT_RATIO)

    def __post_init__(self):
        c, hidden = self.w1.shape
        if self.w2.shape != (hidden, c) or hidden < 1:
            raise ShapeError(f"SE weights {self.w1.shape} and {self.w2.shape} are inconsistent")
        if c % self.reduction_ratio or c // self.reduction_ratio != hidden:
            raise ShapeError(f"SE bottleneck width {hidden} != {c}/{self.reduction_ratio}")

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, ratio: int = SE_DEFAULT_RATIO, dtype=np.float32):
        r = resolve_se_ratio(channels, ratio)
        hidden = channels // r
        return cls(
            Tensor(uniform_init(rng, (channels, hidden), channels, dtype), requires_grad=True),
            Tensor(uniform_init(rng, (hidden, channels), hidden, dtype), requires_grad=True),
            r,
        )


def se_squeeze(x: Tensor) -> Tensor:
    return global_avg_pool(x)


def se_excite(p: SEBlockParams, z: Tensor) -> Tensor:
    """Channel weights ``sigmoid(relu(z @ W1) @ W2)``, each in (0, 1)."""
    if z.ndim != 2 or z.shape[1] != p.channels:
        raise ShapeError(f"SE excitation over {p.channels} channels got {z.shape}")
    return sigmoid(matmul(relu(matmul(z, p.w1)), p.w2))


def se_scale(x: Tensor, e: Tensor) -> Tensor:
    return elementwise_mul_broadcast(x, e)


def se_block_forward(p: SEBlockParams, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"SE block over {p.channels} channels got feature map {x.shape}")
    return se_scale(x, se_excite(p, se_squeeze(x)))

"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive is a :class:`Function` subclass with a ``forward`` working on
plain numpy arrays and a ``backward`` returning one gradient per input.
Calling a primitive records a node on the output tensor; :meth:`Tensor.backward`
orders the reachable nodes into a :class:`Tape` and replays it in reverse.

Storage defaults to float32. Gradient verification builds the same graph from
float64 tensors; primitives preserve the dtype of their inputs.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a primitive."""


class Tensor:
    """N-dimensional array that can take part in gradient recording.

    Parameters
    ----------
    data : array_like
        Values; converted to ``dtype`` (float32 unless the input is already
        a floating numpy array and ``dtype`` is None).
    requires_grad : bool
        Whether gradients with respect to this tensor are wanted.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def __float__(self) -> float:
        return self.item()

    def astype(self, dtype) -> "Tensor":
        """Detached copy with a different storage dtype."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _not_scalar(shape):
    raise ShapeError(f"item() requires a single-element tensor, got shape {shape}")


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


class Context:
    """Scratch space shared between a primitive's forward and backward."""

    def __init__(self):
        self.saved: tuple = ()
        self.needs_input_grad: tuple[bool, ...] = ()

    def save(self, *arrays) -> None:
        self.saved = arrays


class _Node:
    __slots__ = ("fn", "ctx", "inputs")

    def __init__(self, fn, ctx, inputs):
        self.fn = fn
        self.ctx = ctx
        self.inputs = inputs


PRIMITIVES: dict[str, type["Function"]] = {}


class Function:
    """Base class for differentiable primitives.

    Subclasses set ``name`` (registers them for gradient verification) and
    implement ``forward(ctx, *arrays, **params)`` and ``backward(ctx, grad)``.
    """

    name: str | None = None

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.name:
            PRIMITIVES[cls.name] = cls

    @staticmethod
    def forward(ctx: Context, *arrays: np.ndarray, **params) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **params) -> Tensor:
        ctx = Context()
        ctx.needs_input_grad = tuple(t.requires_grad for t in inputs)
        out_data = cls.forward(ctx, *(t.data for t in inputs), **params)
        record = is_grad_enabled() and any(ctx.needs_input_grad)
        out = Tensor(out_data, requires_grad=record, dtype=out_data.dtype)
        if record:
            out._node = _Node(cls, ctx, inputs)
        return out


class Tape:
    """Recorded primitive applications reachable from one output.

    ``entries`` is in topological order: every node appears after the nodes
    that produced its inputs.
    """

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for parent in reversed(t._node.inputs):
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return sum(1 for t in self.entries if t._node is not None)

    def replay_backward(self, out: Tensor, seed: np.ndarray) -> None:
        pending: dict[int, np.ndarray] = {id(out): seed}
        for t in reversed(self.entries):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
            node = t._node
            if node is None:
                continue
            grads = node.fn.backward(node.ctx, g)
            for parent, pg in zip(node.inputs, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"{node.fn.__name__}.backward produced gradient of shape {pg.shape} "
                        f"for input of shape {parent.shape}"
                    )
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise RuntimeError("loss is not connected to any tensor that requires grad")
    Tape.from_output(loss).replay_backward(loss, np.asarray(grad, dtype=loss.dtype))


# ---------------------------------------------------------------------------
# primitives


class Sigmoid(Function):
    name = "sigmoid"

    @staticmethod
    def forward(ctx, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (s,) = ctx.saved
        return (grad * s * (1.0 - s),)


class ReLU(Function):
    name = "relu"

    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx.save(mask)
        return np.where(mask, x, 0).astype(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        (mask,) = ctx.saved
        return (grad * mask,)


class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        ctx.save(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return grad @ b.T, a.T @ grad


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


class Conv2d(Function):
    name = "conv2d"

    @staticmethod
    def forward(ctx, x, w, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d expects input [N,C,H,W] and kernel [F,C,Kh,Kw], got {x.shape} and {w.shape}")
        if stride < 1 or padding < 0:
            raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
        n, c, h, wd = x.shape
        f, _, kh, kw = w.shape
        if h + 2 * padding < kh or wd + 2 * padding < kw:
            raise ShapeError(f"kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{wd + 2 * padding}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]  # [N,C,Ho,Wo,Kh,Kw]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        out = cols @ w.reshape(f, -1).T
        ctx.save(cols, w, x.shape, xp.shape, stride, padding)
        return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    @staticmethod
    def backward(ctx, grad):
        cols, w, xshape, xpshape, stride, padding = ctx.saved
        n, c, h, wd = xshape
        f, _, kh, kw = w.shape
        ho, wo = grad.shape[2], grad.shape[3]
        g2 = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        dw = None
        dx = None
        if ctx.needs_input_grad[1]:
            dw = (g2.T @ cols).reshape(w.shape)
        if ctx.needs_input_grad[0]:
            dcols = (g2 @ w.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xpshape, dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
            dx = np.ascontiguousarray(dx)
        return dx, dw


class GlobalAvgPool(Function):
    name = "global_avg_pool"

    @staticmethod
    def forward(ctx, x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
        ctx.save(x.shape)
        return x.mean(axis=(2, 3))

    @staticmethod
    def backward(ctx, grad):
        (shape,) = ctx.saved
        hw = shape[2] * shape[3]
        return (np.broadcast_to((grad / hw)[:, :, None, None], shape).copy(),)


class ChannelScale(Function):
    """``Y[n,c,i,j] = E[n,c] * X[n,c,i,j]``."""

    name = "elementwise_mul_broadcast"

    @staticmethod
    def forward(ctx, x, e):
        if x.ndim != 4 or e.shape != x.shape[:2]:
            raise ShapeError(f"cannot scale feature map {x.shape} by channel weights {e.shape}")
        ctx.save(x, e)
        return x * e[:, :, None, None]

    @staticmethod
    def backward(ctx, grad):
        x, e = ctx.saved
        return grad * e[:, :, None, None], (grad * x).sum(axis=(2, 3))


class ConcatChannels(Function):
    name = "concat_channels"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != b.ndim or a.ndim < 2 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
        ctx.save(a.shape[1])
        return np.concatenate([a, b], axis=1)

    @staticmethod
    def backward(ctx, grad):
        (ca,) = ctx.saved
        return np.ascontiguousarray(grad[:, :ca]), np.ascontiguousarray(grad[:, ca:])


class Add(Function):
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""

    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        if a.shape == b.shape:
            ctx.save(False)
        elif b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
            ctx.save(True)
        elif b.ndim == 0:
            ctx.save(None)
        else:
            raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
        return a + b

    @staticmethod
    def backward(ctx, grad):
        (bias,) = ctx.saved
        if bias is None:
            return grad, np.asarray(grad.sum(), dtype=grad.dtype)
        return grad, grad.sum(axis=0) if bias else grad


class Mul(Function):
    """Elementwise product of equal shapes, or by a 0-d scalar."""

    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape and b.ndim != 0:
            raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        gb = grad * a
        if b.ndim == 0:
            gb = np.asarray(gb.sum(), dtype=grad.dtype)
        return grad * b, gb


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape and b.ndim != 0 and a.ndim != 0:
            raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
        ctx.save(a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx.saved
        ga = grad if sa == grad.shape else np.asarray(grad.sum(), dtype=grad.dtype)
        gb = -grad if sb == grad.shape else np.asarray(-grad.sum(), dtype=grad.dtype)
        return ga, gb


class SumAll(Function):
    name = "sum_all"

    @staticmethod
    def forward(ctx, x):
        ctx.save(x.shape)
        return np.asarray(x.sum(), dtype=x.dtype)

    @staticmethod
    def backward(ctx, grad):
        (shape,) = ctx.saved
        return (np.full(shape, grad, dtype=grad.dtype),)


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, x, shape=()):
        ctx.save(x.shape)
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        (shape,) = ctx.saved
        return (grad.reshape(shape),)


def sigmoid(t: Tensor) -> Tensor:
    return Sigmoid.apply(t)


def relu(t: Tensor) -> Tensor:
    return ReLU.apply(t)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``kernel`` [F,C,Kh,Kw], zero padded."""
    return Conv2d.apply(x, kernel, stride=int(stride), padding=int(padding))


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-sample, per-channel spatial mean: [N,C,H,W] -> [N,C]."""
    return GlobalAvgPool.apply(x)


def elementwise_mul_broadcast(x: Tensor, e: Tensor) -> Tensor:
    return ChannelScale.apply(x, e)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return ConcatChannels.apply(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def sum_all(x: Tensor) -> Tensor:
    return SumAll.apply(x)


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), Tensor(np.asarray(1.0 / x.data.size, dtype=x.dtype)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


# ---------------------------------------------------------------------------
# finite-difference oracle


class NonDeterministicError(RuntimeError):
    """The probed function returned different values for identical inputs."""


def numeric_grad(f: Callable[[Tensor], Tensor], t: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to every entry of ``t``."""
    base = t.data.astype(np.float64)
    flat = base.reshape(-1)
    out = np.empty_like(flat)

    def probe(values):
        with no_grad():
            return float(f(Tensor(values.reshape(base.shape), dtype=np.float64)).data.sum())

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = probe(flat)
        flat[i] = orig - eps
        lo = probe(flat)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(base.shape)


def finite_diff_check(f: Callable[[Tensor], Tensor], t, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` maps a float64 tensor to a scalar tensor and must be deterministic.
    The analytic gradient comes from one backward pass through ``f``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    base = np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64)

    with no_grad():
        first = f(Tensor(base, dtype=np.float64)).data.copy()
        second = f(Tensor(base, dtype=np.float64)).data
    if not np.array_equal(first, second):
        raise NonDeterministicError("function returned different values for the same input")

    x = Tensor(base, requires_grad=True, dtype=np.float64)
    out = f(x)
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar-valued function, got shape {out.shape}")
    analytic = np.zeros_like(base)
    if out.requires_grad:
        out.backward()
        if x.grad is not None:
            analytic = x.grad
    numeric = numeric_grad(f, Tensor(base, dtype=np.float64), eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0

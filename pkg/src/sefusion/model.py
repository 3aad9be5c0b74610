"""Dual-branch convolutional classifier with per-branch SE attention.

Topology::

    image ─┬─ branch A (conv stages) ─ SE ─┐
           └─ branch B (conv stages) ─ SE ─┴─ concat ─ GAP ─ dense block I
              ─ dense block II ─ dense(1) ─ sigmoid

A dense block is dense → ReLU → batch norm → dropout. Branch A widens its
channels stage by stage; branch B uses pre-activation residual stages
(BN → ReLU → conv, plus identity skip).
"""
from __future__ import annotations

import copy
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .layers import (
    INFERENCE,
    TRAINING,
    BatchNormParams,
    DenseParams,
    DropoutSpec,
    SEBlockParams,
    _check_mode,
    batchnorm_forward,
    dense_forward,
    dropout_forward,
    resolve_se_ratio,
    se_block_forward,
    uniform_init,
)
from .tensor import (
    Function,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    global_avg_pool,
    no_grad,
    relu,
    reshape,
    sigmoid,
)

DECISION_THRESHOLD = 0.5


@dataclass(frozen=True)
class Stage:
    filters: int
    kernel: int = 3
    stride: int = 1
    batchnorm: bool = True
    residual: bool = False

    def __post_init__(self):
        if self.filters < 1 or self.kernel < 1 or self.stride < 1:
            raise ValueError(f"invalid stage {self}")
        if self.residual and (self.stride != 1 or self.kernel % 2 == 0):
            raise ValueError("residual stages need stride 1 and an odd kernel")

    @classmethod
    def parse(cls, text: str) -> "Stage":
        """Parse ``filters/kernel/stride[/bn][/res]``, e.g. ``16/3/2/bn``."""
        parts = [p.strip() for p in text.strip().split("/") if p.strip()]
        if len(parts) < 3:
            raise ValueError(f"stage {text!r} needs at least filters/kernel/stride")
        flags = set(parts[3:])
        unknown = flags - {"bn", "res"}
        if unknown:
            raise ValueError(f"unknown stage flags {sorted(unknown)} in {text!r}")
        return cls(int(parts[0]), int(parts[1]), int(parts[2]), "bn" in flags, "res" in flags)

    def format(self) -> str:
        s = f"{self.filters}/{self.kernel}/{self.stride}"
        return s + ("/bn" if self.batchnorm else "") + ("/res" if self.residual else "")


@dataclass(frozen=True)
class BackboneConfig:
    name: str
    stages: tuple[Stage, ...]
    trainable_tail_layers: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError(f"backbone {self.name!r} has no stages")
        if not 0 <= self.trainable_tail_layers <= len(self.stages):
            raise ValueError(
                f"trainable_tail_layers={self.trainable_tail_layers} out of range for "
                f"{len(self.stages)} layers in backbone {self.name!r}"
            )
        if self.stages[0].residual:
            raise ValueError("the first stage cannot be residual (input has 3 channels)")
        for prev, st in zip(self.stages, self.stages[1:]):
            if st.residual and st.filters != prev.filters:
                raise ValueError(f"residual stage {st.format()} must keep {prev.filters} channels")

    @property
    def output_channels(self) -> int:
        return self.stages[-1].filters

    @property
    def n_layers(self) -> int:
        return len(self.stages)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        for st in self.stages:
            pad = st.kernel // 2
            if h + 2 * pad < st.kernel or w + 2 * pad < st.kernel:
                raise ShapeError(f"input {h}x{w} too small for backbone {self.name!r}")
            h = (h + 2 * pad - st.kernel) // st.stride + 1
            w = (w + 2 * pad - st.kernel) // st.stride + 1
        return h, w

    def with_tail(self, n: int) -> "BackboneConfig":
        return BackboneConfig(self.name, self.stages, n)

    @classmethod
    def parse(cls, name: str, text: str, trainable_tail_layers: int = 3) -> "BackboneConfig":
        return cls(name, tuple(Stage.parse(s) for s in text.split(",") if s.strip()), trainable_tail_layers)

    def format(self) -> str:
        return ",".join(st.format() for st in self.stages)


# Desk-scale stand-ins. Both reduce the input by 16x and end at 32 channels.
EFFICIENT_STANDIN = BackboneConfig(
    "efficient",
    (Stage(8, 3, 2), Stage(16, 3, 2), Stage(24, 3, 2), Stage(32, 3, 2)),
)
RESIDUAL_STANDIN = BackboneConfig(
    "residual",
    (Stage(16, 3, 4), Stage(16, 3, 1, residual=True), Stage(32, 3, 2), Stage(32, 3, 1, residual=True), Stage(32, 3, 2)),
)


@dataclass(frozen=True)
class FusionModelConfig:
    branch_a: BackboneConfig = EFFICIENT_STANDIN
    branch_b: BackboneConfig = RESIDUAL_STANDIN
    se_ratio: int = 16
    dense1_units: int = 256
    dense1_dropout: float = 0.2
    dense2_units: int = 128
    dense2_dropout: float = 0.1
    input_size: tuple[int, int] = (224, 224)
    seed: int = 0

    def validate(self) -> None:
        h, w = self.input_size
        ha = self.branch_a.output_hw(h, w)
        hb = self.branch_b.output_hw(h, w)
        if ha != hb:
            raise ShapeError(f"branch output spatial shapes differ: {ha} vs {hb}")
        for br in (self.branch_a, self.branch_b):
            resolve_se_ratio(br.output_channels, self.se_ratio)
        if self.dense1_units < 1 or self.dense2_units < 1:
            raise ValueError("dense units must be positive")
        DropoutSpec(self.dense1_dropout)
        DropoutSpec(self.dense2_dropout)

    @property
    def fused_channels(self) -> int:
        return self.branch_a.output_channels + self.branch_b.output_channels


@dataclass
class StageParams:
    spec: Stage
    kernel: Tensor
    bias: Tensor | None
    bn: BatchNormParams | None


class AddChannelBias(Function):
    name = "add_channel_bias"

    @staticmethod
    def forward(ctx, x, b):
        if x.ndim != 4 or b.shape != (x.shape[1],):
            raise ShapeError(f"channel bias {b.shape} does not fit {x.shape}")
        return x + b[None, :, None, None]

    @staticmethod
    def backward(ctx, grad):
        return grad, grad.sum(axis=(0, 2, 3))


@dataclass
class FusionModel:
    config: FusionModelConfig
    branches: dict[str, list[StageParams]]
    se: dict[str, SEBlockParams]
    dense1: DenseParams
    bn1: BatchNormParams
    dense2: DenseParams
    bn2: BatchNormParams
    head: DenseParams
    trainable: dict[str, bool] = field(default_factory=dict)

    # -- parameter bookkeeping -------------------------------------------
    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """All stored tensors (parameters and running statistics) in a fixed order."""
        for br in ("a", "b"):
            for i, st in enumerate(self.branches[br]):
                yield f"{br}.stage{i}.kernel", st.kernel
                if st.bias is not None:
                    yield f"{br}.stage{i}.bias", st.bias
                if st.bn is not None:
                    yield from _bn_tensors(f"{br}.stage{i}.bn", st.bn)
            yield f"{br}.se.w1", self.se[br].w1
            yield f"{br}.se.w2", self.se[br].w2
        for name, d, bn in (("dense1", self.dense1, self.bn1), ("dense2", self.dense2, self.bn2)):
            yield f"{name}.weights", d.weights
            yield f"{name}.bias", d.bias
            yield from _bn_tensors(f"{name}.bn", bn)
        yield "head.weights", self.head.weights
        yield "head.bias", self.head.bias

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_tensors():
            if not name.endswith(("running_mean", "running_var")):
                yield name, t

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if self.trainable[n]]

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(t.data.size for n, t in self.named_parameters() if self.trainable[n] or not trainable_only)

    def layer_parameter_names(self, branch: str, layer: int) -> list[str]:
        prefix = f"{branch}.stage{layer}."
        return [n for n, _ in self.named_parameters() if n.startswith(prefix)]

    def set_trainable(self, name: str, flag: bool) -> None:
        params = dict(self.named_parameters())
        if name not in params:
            raise KeyError(name)
        self.trainable[name] = bool(flag)
        params[name].requires_grad = bool(flag)

    def freeze_all(self) -> None:
        for name, _ in self.named_parameters():
            self.set_trainable(name, False)

    def stage_trainable(self, branch: str, layer: int) -> bool:
        return any(self.trainable[n] for n in self.layer_parameter_names(branch, layer))

    def astype(self, dtype) -> "FusionModel":
        """Deep copy with every tensor stored as ``dtype``."""
        m = copy.deepcopy(self)
        for _, t in m.named_tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        return m

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_tensors()}


def _bn_tensors(prefix: str, bn: BatchNormParams):
    yield f"{prefix}.gamma", bn.gamma
    yield f"{prefix}.beta", bn.beta
    yield f"{prefix}.running_mean", bn.running_mean
    yield f"{prefix}.running_var", bn.running_var


def build_model(cfg: FusionModelConfig, dtype=np.float32) -> FusionModel:
    """Instantiate parameters for ``cfg``; all initial values derive from ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    branches: dict[str, list[StageParams]] = {}
    se: dict[str, SEBlockParams] = {}
    for key, bcfg in (("a", cfg.branch_a), ("b", cfg.branch_b)):
        stages = []
        in_ch = 3
        for st in bcfg.stages:
            fan_in = in_ch * st.kernel * st.kernel
            kernel = Tensor(uniform_init(rng, (st.filters, in_ch, st.kernel, st.kernel), fan_in, dtype), requires_grad=True)
            # pre-activation residual stages normalize their input; plain stages their output
            bias = None
            bn = None
            if st.residual:
                bias = Tensor(np.zeros(st.filters, dtype=dtype), requires_grad=True)
                if st.batchnorm:
                    bn = BatchNormParams.init(in_ch, dtype)
            elif st.batchnorm:
                bn = BatchNormParams.init(st.filters, dtype)
            else:
                bias = Tensor(np.zeros(st.filters, dtype=dtype), requires_grad=True)
            stages.append(StageParams(st, kernel, bias, bn))
            in_ch = st.filters
        branches[key] = stages
        se[key] = SEBlockParams.init(bcfg.output_channels, rng, cfg.se_ratio, dtype)
    fused = cfg.fused_channels
    model = FusionModel(
        config=cfg,
        branches=branches,
        se=se,
        dense1=DenseParams.init(fused, cfg.dense1_units, rng, dtype),
        bn1=BatchNormParams.init(cfg.dense1_units, dtype),
        dense2=DenseParams.init(cfg.dense1_units, cfg.dense2_units, rng, dtype),
        bn2=BatchNormParams.init(cfg.dense2_units, dtype),
        head=DenseParams.init(cfg.dense2_units, 1, rng, dtype),
    )
    for name, _ in model.named_parameters():
        model.set_trainable(name, True)
    set_trainable_tail(model, "a", cfg.branch_a.trainable_tail_layers)
    set_trainable_tail(model, "b", cfg.branch_b.trainable_tail_layers)
    return model


def set_trainable_tail(m: FusionModel, branch: str, n: int) -> None:
    """Make exactly the last ``n`` parameterized layers of ``branch`` trainable.

    A layer is one conv stage together with its bias and batch norm.
    """
    branch = branch.lower()
    if branch not in ("a", "b"):
        raise ValueError(f"branch must be 'a' or 'b', got {branch!r}")
    count = len(m.branches[branch])
    if not 0 <= n <= count:
        raise ValueError(f"cannot unfreeze {n} of {count} layers in branch {branch!r}")
    for i in range(count):
        for name in m.layer_parameter_names(branch, i):
            m.set_trainable(name, i >= count - n)


def _stage_forward(m: FusionModel, branch: str, i: int, st: StageParams, h: Tensor, mode: str) -> Tensor:
    bn_mode = mode if m.stage_trainable(branch, i) else INFERENCE
    pad = st.spec.kernel // 2
    if st.spec.residual:
        y = h
        if st.bn is not None:
            y = batchnorm_forward(st.bn, y, bn_mode)
        y = conv2d(relu(y), st.kernel, 1, pad)
        y = AddChannelBias.apply(y, st.bias)
        return add(h, y)
    y = conv2d(h, st.kernel, st.spec.stride, pad)
    if st.bias is not None:
        y = AddChannelBias.apply(y, st.bias)
    if st.bn is not None:
        y = batchnorm_forward(st.bn, y, bn_mode)
    return relu(y)


def branch_features(m: FusionModel, branch: str, x: Tensor, mode: str) -> Tensor:
    h = x
    for i, st in enumerate(m.branches[branch]):
        h = _stage_forward(m, branch, i, st, h, mode)
    return se_block_forward(m.se[branch], h)


def _dense_block(m: FusionModel, d: DenseParams, bn: BatchNormParams, rate: float, h, mode, rng, bn_name):
    h = relu(dense_forward(d, h))
    bn_trainable = m.trainable[f"{bn_name}.gamma"] or m.trainable[f"{bn_name}.beta"]
    h = batchnorm_forward(bn, h, mode if bn_trainable else INFERENCE)
    return dropout_forward(DropoutSpec(rate, mode), h, rng)


def forward(m: FusionModel, batch, mode: str = INFERENCE, rng: np.random.Generator | None = None) -> Tensor:
    """Per-sample probability of the positive class, shape [N]."""
    _check_mode(mode)
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), dtype=m.head.weights.dtype)
    h, w = m.config.input_size
    if x.ndim != 4 or x.shape[1:] != (3, h, w):
        raise ShapeError(f"expected batch of shape [N, 3, {h}, {w}], got {x.shape}")
    if mode == TRAINING and rng is None:
        rng = np.random.default_rng(m.config.seed)
    fa = branch_features(m, "a", x, mode)
    fb = branch_features(m, "b", x, mode)
    z = global_avg_pool(concat_channels(fa, fb))
    cfg = m.config
    z = _dense_block(m, m.dense1, m.bn1, cfg.dense1_dropout, z, mode, rng, "dense1.bn")
    z = _dense_block(m, m.dense2, m.bn2, cfg.dense2_dropout, z, mode, rng, "dense2.bn")
    logits = dense_forward(m.head, z)
    return reshape(sigmoid(logits), (x.shape[0],))


def predict_proba(m: FusionModel, batch, batch_size: int = 64) -> np.ndarray:
    """Inference-mode probabilities as a numpy vector, evaluated in chunks."""
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    out = []
    with no_grad():
        for start in range(0, len(arr), batch_size):
            out.append(forward(m, arr[start:start + batch_size], INFERENCE).data)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def threshold(probs: np.ndarray) -> np.ndarray:
    """Label 1 iff probability >= 0.5."""
    return (np.asarray(probs) >= DECISION_THRESHOLD).astype(np.int64)


def predict(m: FusionModel, batch) -> np.ndarray:
    return threshold(predict_proba(m, batch))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SEFN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    """Bad magic bytes or checksum mismatch."""


def encode_checkpoint(tensors: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes) -> list[tuple[str, np.ndarray]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(blob)} (needed {pos + n})")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic bytes)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        out.append((name, arr))
    (crc,) = struct.unpack("<I", take(4))
    if pos != len(blob):
        raise CheckpointCorruptError(f"{len(blob) - pos} unexpected trailing bytes")
    if zlib.crc32(blob[:pos - 4]) & 0xFFFFFFFF != crc:
        raise CheckpointCorruptError("checkpoint checksum mismatch")
    return out


def save_checkpoint(m: FusionModel, path) -> None:
    Path(path).write_bytes(encode_checkpoint([(n, t.data) for n, t in m.named_tensors()]))


def load_checkpoint(path, cfg: FusionModelConfig) -> FusionModel:
    """Rebuild the model for ``cfg`` and fill it with the stored tensors."""
    stored = decode_checkpoint(Path(path).read_bytes())
    m = build_model(cfg)
    expected = list(m.named_tensors())
    names = [n for n, _ in stored]
    if names != [n for n, _ in expected]:
        missing = sorted(set(n for n, _ in expected) - set(names))
        extra = sorted(set(names) - set(n for n, _ in expected))
        raise CheckpointShapeError(f"tensor names differ from config: missing {missing}, unexpected {extra}")
    for (name, arr), (_, t) in zip(stored, expected):
        if arr.shape != t.shape:
            raise CheckpointShapeError(f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data[...] = arr
    return m

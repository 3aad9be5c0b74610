"""Run configuration: flat ``key = value`` files with CLI overrides.

Lines starting with ``#`` are comments. Recognised keys (defaults in
parentheses)::

    dataset            dataset root <root>/<Class>/<images>
    out                output directory (runs)
    input_size         HxW (224x224)
    epochs             (50)
    batch_size         (32)
    lr                 Adam learning rate (0.0001)
    seed               master seed (0)
    k                  folds (4)
    split_ratios       train,val,test (0.7,0.2,0.1)
    dense1_units       (256)     dense1_dropout  (0.2)
    dense2_units       (128)     dense2_dropout  (0.1)
    se_ratio           (16)
    branch_a, branch_b stage lists, e.g. 8/3/2/bn,16/3/2/bn
    tail_a, tail_b     trainable tail layers per branch (3)
    variants_per_image (14)
    augment_ops        comma list of augmentation ops (all)
    positive_class     (Monkeypox)
    group_by_source    auto | true | false (auto)
    grid_dense1_units, grid_dense1_dropout, grid_dense2_units, grid_dense2_dropout
                       comma lists restricting the search grid
    grid_mode          split | cv (split)
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import AUGMENT_OPS, SPLIT_RATIOS, AugmentationSpec
from .model import EFFICIENT_STANDIN, RESIDUAL_STANDIN, BackboneConfig, FusionModelConfig
from .selection import DENSE_GRID


class ConfigError(ValueError):
    pass


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise ConfigError(f"input size must look like 224x224, got {text!r}") from None
    if h < 1 or w < 1:
        raise ConfigError(f"input size must be positive, got {text!r}")
    return h, w


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


@dataclass
class RunConfig:
    dataset: str | None = None
    out: str = "runs"
    input_size: tuple[int, int] = (224, 224)
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    k: int = 4
    split_ratios: tuple[float, float, float] = SPLIT_RATIOS
    dense1_units: int = 256
    dense1_dropout: float = 0.2
    dense2_units: int = 128
    dense2_dropout: float = 0.1
    se_ratio: int = 16
    branch_a: str = EFFICIENT_STANDIN.format()
    branch_b: str = RESIDUAL_STANDIN.format()
    tail_a: int = 3
    tail_b: int = 3
    variants_per_image: int = 14
    augment_ops: tuple[str, ...] = AUGMENT_OPS
    positive_class: str = "Monkeypox"
    group_by_source: bool | None = None
    grid: dict[str, tuple] = field(default_factory=dict)
    grid_mode: str = "split"

    _converters = {
        "input_size": parse_size,
        "epochs": int,
        "batch_size": int,
        "lr": float,
        "seed": int,
        "k": int,
        "split_ratios": _floats,
        "dense1_units": int,
        "dense1_dropout": float,
        "dense2_units": int,
        "dense2_dropout": float,
        "se_ratio": int,
        "tail_a": int,
        "tail_b": int,
        "variants_per_image": int,
        "augment_ops": lambda s: tuple(v.strip() for v in str(s).split(",") if v.strip()),
    }

    def set(self, key: str, value) -> None:
        key = key.strip().replace("-", "_")
        if key.startswith("grid_") and key != "grid_mode":
            axis = key[len("grid_"):]
            if axis not in DENSE_GRID:
                raise ConfigError(f"unknown grid key {key!r}")
            conv = _ints if axis.endswith("units") else _floats
            self.grid[axis] = conv(value)
            return
        names = {f.name for f in fields(self)}
        if key not in names or key == "grid":
            raise ConfigError(f"unknown config key {key!r}")
        if key == "group_by_source":
            v = str(value).strip().lower()
            if v not in ("auto", "true", "false"):
                raise ConfigError("group_by_source must be auto, true or false")
            value = None if v == "auto" else v == "true"
        elif key in self._converters:
            try:
                value = self._converters[key](value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None
        setattr(self, key, value)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = cls()
        for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{p}:{n}: expected key = value")
            key, value = line.split("=", 1)
            cfg.set(key, value.strip())
        return cfg

    def model_config(self, seed: int | None = None) -> FusionModelConfig:
        try:
            cfg = FusionModelConfig(
                branch_a=BackboneConfig.parse("efficient", self.branch_a, self.tail_a),
                branch_b=BackboneConfig.parse("residual", self.branch_b, self.tail_b),
                se_ratio=self.se_ratio,
                dense1_units=self.dense1_units,
                dense1_dropout=self.dense1_dropout,
                dense2_units=self.dense2_units,
                dense2_dropout=self.dense2_dropout,
                input_size=tuple(self.input_size),
                seed=self.seed if seed is None else seed,
            )
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(f"invalid model configuration: {exc}") from None
        return cfg

    def augmentation(self) -> AugmentationSpec:
        try:
            return AugmentationSpec(ops=self.augment_ops, variants_per_image=self.variants_per_image, seed=self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def require_dataset(self) -> Path:
        if not self.dataset:
            raise ConfigError("no dataset directory configured (set dataset = PATH)")
        p = Path(self.dataset)
        if not p.is_dir():
            raise ConfigError(f"dataset directory not found: {p}")
        return p

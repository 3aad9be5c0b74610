"""Cross-validation and hyperparameter grid search over FusionClassifier."""
from __future__ import annotations

import itertools
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from sklearn.base import clone

from .data import FoldPlan
from .estimator import FusionClassifier
from .model import FusionModelConfig
from .training import ConfusionMatrix, History, Metrics, metrics

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")

# dense1_units, dense1_dropout, dense2_units, dense2_dropout
DENSE_GRID = {
    "dense1_units": (32, 64, 128, 256),
    "dense1_dropout": (0.1, 0.2),
    "dense2_units": (32, 64, 128, 256),
    "dense2_dropout": (0.1, 0.2),
}

FOLD_SEED_OFFSET = 0
GRID_SEED_OFFSET = 1000


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("SEFUSION_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items, n_jobs):
    if n_jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


@dataclass
class FoldReport:
    """Per-fold metrics in percent plus training curves."""

    fold: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: ConfusionMatrix | None = None
    history: History = field(default_factory=History)
    degenerate: bool = False

    def __post_init__(self):
        for name in METRIC_NAMES:
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")

    @classmethod
    def from_confusion(cls, fold: int, cm: ConfusionMatrix, history: History | None = None) -> "FoldReport":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            m: Metrics = metrics(cm)
        return cls(fold, 100 * m.accuracy, 100 * m.precision, 100 * m.recall, 100 * m.f1,
                   cm, history or History(), m.degenerate)

    def values(self) -> tuple[float, float, float, float]:
        return tuple(getattr(self, n) for n in METRIC_NAMES)


def mean_report(reports: Sequence[FoldReport]) -> dict[str, float]:
    """Arithmetic mean of each metric across folds."""
    if not reports:
        raise ValueError("no fold reports to aggregate")
    return {n: sum(getattr(r, n) for r in reports) / len(reports) for n in METRIC_NAMES}


@dataclass
class CVResult:
    folds: list[FoldReport]
    mean: dict[str, float]
    test_folds: list[FoldReport] = field(default_factory=list)
    test_mean: dict[str, float] | None = None
    estimators: list[FusionClassifier] = field(default_factory=list)


class FoldError(RuntimeError):
    pass


def kfold_cv(
    cfg: FusionModelConfig,
    fold_plan: FoldPlan,
    X: np.ndarray,
    y: np.ndarray,
    epochs: int = 50,
    batch_size: int = 32,
    learning_rate: float = 1e-4,
    X_test: np.ndarray | None = None,
    y_test: np.ndarray | None = None,
    n_jobs: int | None = None,
    seed_per_fold: bool = True,
) -> CVResult:
    """Train a fresh model per fold and average the held-out fold metrics.

    ``X``/``y`` are indexed by the positions in ``fold_plan``. Fold ``i`` is
    seeded with ``cfg.seed + i`` (or ``cfg.seed`` for every fold when
    ``seed_per_fold`` is false). When a test set is given every fold's final
    model is also scored on it.
    """
    n_jobs = default_jobs() if n_jobs is None else n_jobs
    y = np.asarray(y)

    def run(i):
        tr = np.array(fold_plan.train_indices(i), dtype=np.int64)
        va = np.array(fold_plan.val_indices(i), dtype=np.int64)
        est = FusionClassifier.from_config(
            replace(cfg, seed=cfg.seed + (FOLD_SEED_OFFSET + i if seed_per_fold else 0)),
            epochs=epochs, batch_size=batch_size, learning_rate=learning_rate,
        )
        try:
            est.fit(X[tr], y[tr], X[va], y[va])
        except Exception as exc:
            raise FoldError(f"fold {i + 1} failed: {exc}") from exc
        report = FoldReport.from_confusion(i + 1, est.confusion(X[va], y[va]), est.history_)
        test = None
        if X_test is not None:
            test = FoldReport.from_confusion(i + 1, est.confusion(X_test, y_test))
        logger.info("fold %d: accuracy %.2f%%", i + 1, report.accuracy)
        return est, report, test

    out = _map(run, list(range(fold_plan.k)), n_jobs)
    reports = [r for _, r, _ in out]
    result = CVResult(reports, mean_report(reports), estimators=[e for e, _, _ in out])
    if X_test is not None:
        result.test_folds = [t for _, _, t in out]
        result.test_mean = mean_report(result.test_folds)
    return result


@dataclass(frozen=True)
class GridPoint:
    dense1_units: int
    dense1_dropout: float
    dense2_units: int
    dense2_dropout: float
    accuracy: float = 0.0
    f1: float = 0.0

    def __post_init__(self):
        for key, allowed in DENSE_GRID.items():
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key}={getattr(self, key)} is not one of {allowed}")

    @property
    def params(self) -> dict:
        return {k: getattr(self, k) for k in DENSE_GRID}

    def key(self) -> tuple:
        return tuple(getattr(self, k) for k in DENSE_GRID)


def grid_points(grid: dict[str, Sequence] | None = None) -> list[dict]:
    grid = dict(DENSE_GRID if grid is None else grid)
    for k, values in grid.items():
        if k not in DENSE_GRID:
            raise ValueError(f"unknown grid key {k!r}")
        if not values:
            raise ValueError(f"grid axis {k!r} is empty")
        bad = [v for v in values if v not in DENSE_GRID[k]]
        if bad:
            raise ValueError(f"grid values {bad} for {k!r} are outside {DENSE_GRID[k]}")
    axes = [grid.get(k, DENSE_GRID[k]) for k in DENSE_GRID]
    return [dict(zip(DENSE_GRID, combo)) for combo in itertools.product(*axes)]


def rank_points(points: Sequence[GridPoint]) -> list[GridPoint]:
    """Best first: accuracy desc, then F1 desc, then config order ascending."""
    return sorted(points, key=lambda g: (-g.accuracy, -g.f1, g.key()))


class GridPointError(RuntimeError):
    pass


def grid_search(
    base_cfg: FusionModelConfig,
    X: np.ndarray,
    y: np.ndarray,
    split: FoldPlan | tuple[Sequence[int], Sequence[int]],
    grid: dict[str, Sequence] | None = None,
    epochs: int = 50,
    batch_size: int = 32,
    learning_rate: float = 1e-4,
    scorer: Callable[[FusionClassifier, int], tuple[float, float]] | None = None,
    n_jobs: int | None = None,
) -> list[GridPoint]:
    """Evaluate every dense-block configuration and rank them.

    ``split`` is either a fold plan (scores are fold means) or a
    ``(train, val)`` pair of positions. Point ``j`` is seeded with
    ``base_cfg.seed + 1000 + j``. ``scorer(estimator, j)`` can replace the
    default train-and-validate step; it returns ``(accuracy, f1)`` in percent.
    """
    n_jobs = default_jobs() if n_jobs is None else n_jobs
    base = FusionClassifier.from_config(base_cfg, epochs=epochs, batch_size=batch_size, learning_rate=learning_rate)
    configs = grid_points(grid)

    def default_score(est: FusionClassifier, j: int) -> tuple[float, float]:
        if isinstance(split, FoldPlan):
            cfg = est.model_config()
            res = kfold_cv(cfg, split, X, y, epochs, batch_size, learning_rate, n_jobs=1)
            return res.mean["accuracy"], res.mean["f1"]
        tr, va = (np.asarray(s, dtype=np.int64) for s in split)
        est.fit(X[tr], y[tr])
        rep = FoldReport.from_confusion(0, est.confusion(X[va], y[va]))
        return rep.accuracy, rep.f1

    score = scorer or default_score

    def run(j):
        params = configs[j]
        est = clone(base).set_params(**params, random_state=base_cfg.seed + GRID_SEED_OFFSET + j)
        try:
            acc, f1 = score(est, j)
        except Exception as exc:
            raise GridPointError(f"grid point {j} {params} failed: {exc}") from exc
        return GridPoint(**params, accuracy=float(acc), f1=float(f1))

    return rank_points(_map(run, list(range(len(configs))), n_jobs))

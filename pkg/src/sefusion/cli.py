"""Command-line entry point: ``sefusion <train|cv|grid|augment|gradcheck|report>``.

Exit codes: 0 success, 1 configuration or data error, 2 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import ConfigError, RunConfig, parse_size
from .data import (
    DatasetError,
    augment_dataset,
    load_batch,
    load_dataset,
    make_folds,
    stratified_split,
    write_plan,
)
from .estimator import FusionClassifier
from .model import CheckpointError, save_checkpoint
from .reporting import (
    MANIFEST_NAME,
    METRICS_HEADER,
    confusion_csv,
    emit_curves,
    fmt_pct,
    metrics_table,
    read_confusion_csv,
    read_manifest,
    read_metrics_table,
    sha256_file,
    write_manifest,
)
from .selection import FoldError, FoldReport, GridPointError, default_jobs, grid_search, kfold_cv
from .training import TrainingError

logger = logging.getLogger("sefusion")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2


def _load(cfg: RunConfig):
    root = cfg.require_dataset()
    idx = load_dataset(root, cfg.positive_class)
    X = load_batch(idx.paths, tuple(cfg.input_size), default_jobs())
    return idx, X, idx.labels


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write(path: Path, text: str, written: list[Path]) -> Path:
    path.write_text(text, encoding="utf-8")
    written.append(path)
    return path


def cmd_train(cfg: RunConfig) -> list[Path]:
    """Single train/val/test run."""
    idx, X, y = _load(cfg)
    out = _out_dir(cfg)
    split = stratified_split(idx, cfg.split_ratios, cfg.seed, cfg.group_by_source)
    tr, va, te = (np.array(s, dtype=np.int64) for s in (split.train, split.val, split.test))
    est = FusionClassifier.from_config(cfg.model_config(), epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.lr)
    est.fit(X[tr], y[tr], X[va] if len(va) else None, y[va] if len(va) else None)

    written: list[Path] = []
    plan = out / "plan.txt"
    write_plan(plan, idx, split)
    written.append(plan)
    rows = [["Split", *METRICS_HEADER[1:]]]
    for name, sel in (("val", va), ("test", te)):
        if not len(sel):
            continue
        cm = est.confusion(X[sel], y[sel])
        rep = FoldReport.from_confusion(0, cm)
        rows.append([name, *(fmt_pct(v) for v in rep.values())])
        _write(out / f"confusion_{name}.csv", confusion_csv(cm), written)
    _write(out / "metrics.csv", "".join(",".join(map(str, r)) + "\n" for r in rows), written)
    written.extend(emit_curves(FoldReport(0, 0, 0, 0, 0, history=est.history_), out, "curves"))
    ckpt = out / "model.sefn"
    save_checkpoint(est.model_, ckpt)
    written.append(ckpt)
    written.append(write_manifest(out, written))
    print("".join(",".join(map(str, r)) + "\n" for r in rows), end="")
    return written


def cmd_cv(cfg: RunConfig, replay: str | None = None) -> list[Path]:
    """k-fold cross-validation (or aggregation of recorded fold metrics)."""
    if cfg.k < 2:
        raise ConfigError(f"k must be at least 2, got {cfg.k}")
    out = _out_dir(cfg)
    written: list[Path] = []
    if replay is not None:
        if not Path(replay).is_file():
            raise ConfigError(f"replay file not found: {replay}")
        try:
            reports, _ = read_metrics_table(replay)
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"cannot parse replay file {replay}: {exc}") from None
        if not reports:
            raise ConfigError(f"replay file {replay} has no fold rows")
        table = metrics_table(reports)
        _write(out / "metrics.csv", table, written)
        written.append(write_manifest(out, written))
        print(table, end="")
        return written

    idx, X, y = _load(cfg)
    split = stratified_split(idx, cfg.split_ratios, cfg.seed, cfg.group_by_source)
    folds = make_folds(idx, split.pool, cfg.k, cfg.seed, cfg.group_by_source)
    te = np.array(split.test, dtype=np.int64)
    res = kfold_cv(
        cfg.model_config(), folds, X, y, cfg.epochs, cfg.batch_size, cfg.lr,
        X_test=X[te] if len(te) else None, y_test=y[te] if len(te) else None,
    )
    plan = out / "plan.txt"
    write_plan(plan, idx, split, folds)
    written.append(plan)
    _write(out / "metrics.csv", metrics_table(res.folds, res.mean), written)
    if res.test_folds:
        _write(out / "test_metrics.csv", metrics_table(res.test_folds, res.test_mean), written)
    for rep, est in zip(res.folds, res.estimators):
        _write(out / f"confusion_fold{rep.fold}.csv", confusion_csv(rep.confusion), written)
        written.extend(emit_curves(rep, out))
        ckpt = out / f"model_fold{rep.fold}.sefn"
        save_checkpoint(est.model_, ckpt)
        written.append(ckpt)
    written.append(write_manifest(out, written))
    print(metrics_table(res.folds, res.mean), end="")
    return written


GRID_HEADER = ["rank", "dense1_units", "dense1_dropout", "dense2_units", "dense2_dropout", "accuracy", "f1"]


def cmd_grid(cfg: RunConfig) -> list[Path]:
    idx, X, y = _load(cfg)
    out = _out_dir(cfg)
    split = stratified_split(idx, cfg.split_ratios, cfg.seed, cfg.group_by_source)
    if cfg.grid_mode == "cv":
        target = make_folds(idx, split.pool, cfg.k, cfg.seed, cfg.group_by_source)
    elif cfg.grid_mode == "split":
        target = (split.train, split.val)
    else:
        raise ConfigError(f"grid_mode must be 'split' or 'cv', got {cfg.grid_mode!r}")
    try:
        ranked = grid_search(cfg.model_config(), X, y, target, cfg.grid or None, cfg.epochs, cfg.batch_size, cfg.lr)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    lines = [",".join(GRID_HEADER)]
    for rank, g in enumerate(ranked, 1):
        lines.append(f"{rank},{g.dense1_units},{g.dense1_dropout},{g.dense2_units},{g.dense2_dropout},"
                     f"{fmt_pct(g.accuracy)},{fmt_pct(g.f1)}")
    written: list[Path] = []
    _write(out / "grid.csv", "\n".join(lines) + "\n", written)
    written.append(write_manifest(out, written))
    print("\n".join(lines))
    return written


def cmd_augment(cfg: RunConfig) -> list[Path]:
    idx = load_dataset(cfg.require_dataset(), cfg.positive_class)
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory is not writable: {out} ({exc})") from None
    files = augment_dataset(idx, out, cfg.augmentation(), default_jobs())
    counts = {}
    for p in files:
        counts[p.parent.name] = counts.get(p.parent.name, 0) + 1
    for name in sorted(counts):
        print(f"{name}: {counts[name]}")
    print(f"total: {len(files)}")
    return files


def cmd_gradcheck(seed: int = 0) -> int:
    results = gradcheck.run_all(seed)
    failed = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:28s} max_rel_error={r.max_rel_error:.3e} tol={r.tol:.0e} {status}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    """Print the metrics table and confusion matrices of a run; verify its manifest."""
    out = Path(cfg.out)
    if not (out / MANIFEST_NAME).is_file():
        raise ConfigError(f"no run manifest in {out}")
    bad = [rel for rel, digest in read_manifest(out).items()
           if not (out / rel).is_file() or sha256_file(out / rel) != digest]
    metrics_path = out / "metrics.csv"
    if metrics_path.is_file():
        with open(metrics_path, newline="", encoding="utf-8") as fh:
            for row in csv.reader(fh):
                print("  ".join(f"{c:>10s}" for c in row))
    for cm_path in sorted(out.glob("confusion_*.csv")):
        cm = read_confusion_csv(cm_path)
        print(f"{cm_path.stem}: TP={cm.tp} TN={cm.tn} FP={cm.fp} FN={cm.fn}")
    if bad:
        print(f"manifest mismatch: {', '.join(bad)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sefusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "cv", "grid", "augment", "gradcheck", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--k", type=int)
        p.add_argument("--input-size", type=parse_size, metavar="HxW")
        p.add_argument("--out", help="output directory")
        p.add_argument("--dataset", help="dataset root directory")
        p.add_argument("--variants", type=int, dest="variants_per_image")
        p.add_argument("--replay", help="recorded fold metrics CSV (cv only)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    return parser


_OVERRIDES = ("seed", "epochs", "batch_size", "lr", "k", "input_size", "out", "dataset", "variants_per_image")


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(*item.split("=", 1))
    for key in _OVERRIDES:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed or 0)
        cfg = load_config(args)
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "cv":
            cmd_cv(cfg, args.replay)
        elif args.command == "grid":
            cmd_grid(cfg)
        elif args.command == "augment":
            cmd_augment(cfg)
        elif args.command == "report":
            return cmd_report(cfg)
    except (ConfigError, DatasetError, CheckpointError, TrainingError, FoldError, GridPointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""CSV tables, SVG training curves, and run manifests."""
from __future__ import annotations

import csv
import hashlib
import io
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .selection import FoldReport, mean_report
from .training import ConfusionMatrix, History

METRICS_HEADER = ["Fold", "Accuracy", "Precision", "Recall", "F1-Score"]
CURVES_HEADER = ["epoch", "train_loss", "val_loss", "train_acc", "val_acc"]
CONFUSION_HEADER = ["actual", "predicted_Others", "predicted_Monkeypox"]


def fmt_pct(x: float) -> str:
    return f"{x:.2f}"


def _csv_text(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def metrics_table(reports: Sequence[FoldReport], mean: dict[str, float] | None = None) -> str:
    """Fold rows plus a ``Mean`` row, percentages to 2 decimals."""
    mean = mean_report(reports) if mean is None else mean
    rows = [METRICS_HEADER]
    for r in reports:
        rows.append([str(r.fold), *(fmt_pct(v) for v in r.values())])
    rows.append(["Mean", *(fmt_pct(mean[k]) for k in ("accuracy", "precision", "recall", "f1"))])
    return _csv_text(rows)


def read_metrics_table(path) -> tuple[list[FoldReport], dict[str, float] | None]:
    """Parse a metrics CSV; returns fold reports and the Mean row if present."""
    reports, mean = [], None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: expected header {METRICS_HEADER}, got {header}")
        for row in reader:
            if not row:
                continue
            vals = [float(v) for v in row[1:5]]
            if row[0] == "Mean":
                mean = dict(zip(("accuracy", "precision", "recall", "f1"), vals))
            else:
                reports.append(FoldReport(int(row[0]), *vals))
    return reports, mean


def confusion_csv(cm: ConfusionMatrix) -> str:
    return _csv_text([
        CONFUSION_HEADER,
        ["Others", cm.tn, cm.fp],
        ["Monkeypox", cm.fn, cm.tp],
    ])


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    (tn, fp), (fn, tp) = ([int(v) for v in r[1:]] for r in rows[1:3])
    return ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)


def curves_csv(h: History) -> str:
    rows = [CURVES_HEADER]
    for i in range(len(h)):
        val_loss = f"{h.val_loss[i]:.6f}" if i < len(h.val_loss) else ""
        val_acc = f"{h.val_acc[i]:.6f}" if i < len(h.val_acc) else ""
        rows.append([i + 1, f"{h.train_loss[i]:.6f}", val_loss, f"{h.train_acc[i]:.6f}", val_acc])
    return _csv_text(rows)


def curves_svg(h: History, title: str = "Training vs validation accuracy", width: int = 480, height: int = 320) -> str:
    """Line chart of train/val accuracy per epoch."""
    if len(h) == 0:
        raise ValueError("cannot plot empty curves")
    left, right, top, bottom = 48, 16, 32, 40
    pw, ph = width - left - right, height - top - bottom
    n = len(h)

    def pts(series):
        out = []
        for i, v in enumerate(series):
            x = left + (pw * i / (n - 1) if n > 1 else pw / 2)
            y = top + ph * (1.0 - v)
            out.append(f"{x:.2f},{y:.2f}")
        return " ".join(out)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        y = top + ph * (1.0 - frac)
        parts.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end" font-size="10">{frac:.1f}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle" font-size="11">epoch (1-{n})</text>')
    series = [("train", h.train_acc, "#1f77b4")]
    if h.val_acc:
        series.append(("validation", h.val_acc, "#d62728"))
    for j, (label, values, color) in enumerate(series):
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts(values)}"/>')
        parts.append(f'<text x="{left + 8}" y="{top + 14 + 14 * j}" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_curves(report: FoldReport, out_dir, stem: str | None = None) -> tuple[Path, Path]:
    stem = stem or f"curves_fold{report.fold}"
    out = Path(out_dir)
    csv_path = out / f"{stem}.csv"
    svg_path = out / f"{stem}.svg"
    csv_path.write_text(curves_csv(report.history), encoding="utf-8")
    svg_path.write_text(curves_svg(report.history, f"Fold {report.fold}: training vs validation accuracy"), encoding="utf-8")
    return csv_path, svg_path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


MANIFEST_NAME = "manifest.txt"


def write_manifest(out_dir, files: Sequence[Path]) -> Path:
    """``sha256sum``-style listing of ``files`` relative to ``out_dir``."""
    out = Path(out_dir)
    lines = [f"{sha256_file(p)}  {Path(p).relative_to(out).as_posix()}" for p in sorted(set(map(Path, files)))]
    target = out / MANIFEST_NAME
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return target


def read_manifest(out_dir) -> dict[str, str]:
    entries = {}
    for line in (Path(out_dir) / MANIFEST_NAME).read_text(encoding="utf-8").splitlines():
        if line.strip():
            digest, rel = line.split("  ", 1)
            entries[rel] = digest
    return entries

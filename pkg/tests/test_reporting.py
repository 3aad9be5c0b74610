import xml.etree.ElementTree as ET

import pytest

from sefusion.reporting import (
    CURVES_HEADER,
    METRICS_HEADER,
    confusion_csv,
    curves_csv,
    curves_svg,
    emit_curves,
    fmt_pct,
    metrics_table,
    read_confusion_csv,
    read_manifest,
    read_metrics_table,
    sha256_file,
    write_manifest,
)
from sefusion.selection import FoldReport
from sefusion.training import ConfusionMatrix, History


def history(n, with_val=True):
    h = History()
    for i in range(n):
        h.train_loss.append(1.0 / (i + 1))
        h.train_acc.append(min(1.0, 0.5 + 0.1 * i))
        if with_val:
            h.val_loss.append(1.2 / (i + 1))
            h.val_acc.append(min(1.0, 0.45 + 0.1 * i))
    return h


def test_fmt_pct():
    assert fmt_pct(96.5225) == "96.52"
    assert fmt_pct(100) == "100.00"


def test_metrics_table_roundtrip(tmp_path):
    reps = [FoldReport(1, 96.87, 95.1234, 97.0, 96.0), FoldReport(2, 95.65, 94.0, 96.5, 95.25)]
    text = metrics_table(reps)
    lines = text.splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert lines[-1].startswith("Mean,96.26,")
    (tmp_path / "m.csv").write_text(text)
    back, mean = read_metrics_table(tmp_path / "m.csv")
    assert [r.values() for r in back] == [tuple(round(v, 2) for v in r.values()) for r in reps]
    assert mean["accuracy"] == 96.26


def test_metrics_table_rejects_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_metrics_table(tmp_path / "m.csv")


def test_confusion_roundtrip(tmp_path):
    cm = ConfusionMatrix(tp=7, tn=9, fp=2, fn=1)
    (tmp_path / "c.csv").write_text(confusion_csv(cm))
    assert read_confusion_csv(tmp_path / "c.csv") == cm


@pytest.mark.parametrize("epochs", [1, 5])
def test_curves_csv_rows(epochs):
    lines = curves_csv(history(epochs)).splitlines()
    assert lines[0] == ",".join(CURVES_HEADER)
    assert len(lines) - 1 == epochs


def test_curves_without_validation():
    lines = curves_csv(history(2, with_val=False)).splitlines()
    assert lines[1].split(",")[2] == ""
    ET.fromstring(curves_svg(history(2, with_val=False)))


def test_svg_parses(tmp_path):
    csv_path, svg_path = emit_curves(FoldReport(3, 0, 0, 0, 0, history=history(4)), tmp_path)
    assert csv_path.name == "curves_fold3.csv"
    root = ET.parse(svg_path).getroot()
    lines = root.findall("{http://www.w3.org/2000/svg}polyline")
    assert len(lines) == 2
    assert all(len(l.get("points").split()) == 4 for l in lines)


def test_svg_single_epoch():
    ET.fromstring(curves_svg(history(1)))
    with pytest.raises(ValueError):
        curves_svg(History())


def test_manifest(tmp_path):
    files = []
    for name in ("a.csv", "b.txt"):
        (tmp_path / name).write_text(name)
        files.append(tmp_path / name)
    write_manifest(tmp_path, files)
    entries = read_manifest(tmp_path)
    assert entries == {"a.csv": sha256_file(tmp_path / "a.csv"), "b.txt": sha256_file(tmp_path / "b.txt")}
    import hashlib

    assert entries["a.csv"] == hashlib.sha256(b"a.csv").hexdigest()

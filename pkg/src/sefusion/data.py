"""Dataset indexing, preprocessing, augmentation, and split/fold planning."""
from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

POSITIVE_CLASS = "Monkeypox"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SPLIT_RATIOS = (0.7, 0.2, 0.1)
_PROVENANCE = re.compile(r"^(?P<stem>.+)_aug\d+$")


class DatasetError(ValueError):
    pass


@dataclass
class DatasetIndex:
    entries: list[tuple[str, int]]
    class_names: dict[int, str] = field(default_factory=lambda: {1: POSITIVE_CLASS, 0: "Others"})
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        paths = [p for p, _ in self.entries]
        if len(set(paths)) != len(paths):
            raise DatasetError("dataset paths must be unique")

    @property
    def class_counts(self) -> dict[int, int]:
        counts = {0: 0, 1: 0}
        for _, y in self.entries:
            counts[y] += 1
        return counts

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.entries]

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.entries], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                return False
            im.verify()
        return True
    except Exception:
        return False


def load_dataset(root_dir, positive_class: str = POSITIVE_CLASS) -> DatasetIndex:
    """Index ``<root>/<ClassName>/<images>``; the ``positive_class`` folder is label 1.

    Undecodable files are skipped, logged, and listed in ``DatasetIndex.skipped``.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if len(class_dirs) != 2:
        raise DatasetError(f"expected exactly 2 class directories under {root}, found {[d.name for d in class_dirs]}")
    names = {d.name.lower(): d for d in class_dirs}
    if positive_class.lower() not in names:
        raise DatasetError(f"positive class directory {positive_class!r} not found under {root}")
    pos_dir = names[positive_class.lower()]
    neg_dir = next(d for d in class_dirs if d != pos_dir)

    entries: list[tuple[str, int]] = []
    skipped: list[str] = []
    for d, label in ((pos_dir, 1), (neg_dir, 0)):
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class directory is empty: {d}")
        for p in files:
            if _decodable(p):
                entries.append((str(p), label))
            else:
                logger.warning("skipping undecodable image %s", p)
                skipped.append(str(p))
    entries.sort(key=lambda e: e[0])
    counts = {y: sum(1 for _, l in entries if l == y) for y in (0, 1)}
    for y, d in ((1, pos_dir), (0, neg_dir)):
        if counts[y] == 0:
            raise DatasetError(f"no decodable images in {d}")
    logger.info("indexed %d images (%d %s, %d %s)", len(entries), counts[1], pos_dir.name, counts[0], neg_dir.name)
    return DatasetIndex(entries, {1: pos_dir.name, 0: neg_dir.name}, skipped)


def read_image(path) -> np.ndarray:
    """Decode a PNG/JPEG file to an RGB uint8 array [H, W, 3]."""
    with Image.open(path) as im:
        if im.format not in ("PNG", "JPEG"):
            raise DatasetError(f"unsupported image format {im.format} for {path}")
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG", optimize=False)


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of [H, W, C] float data with half-pixel centers and edge clamping."""
    h, w = image.shape[:2]
    oh, ow = size

    def coords(n_out, n_in):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(oh, h)
    x0, x1, fx = coords(ow, w)
    img = image.astype(np.float64)
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    fy = fy[:, None, None]
    return top * (1 - fy) + bot * fy


def preprocess(image: np.ndarray, size: tuple[int, int] = (224, 224)) -> np.ndarray:
    """RGB uint8 [H, W, 3] -> float32 [3, h, w] in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DatasetError(f"expected an RGB image [H, W, 3], got shape {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise DatasetError("cannot preprocess a zero-dimension image")
    out = resize_bilinear(image, size) / 255.0
    return np.clip(out, 0.0, 1.0).astype(np.float32).transpose(2, 0, 1).copy()


def load_batch(paths: Sequence[str], size: tuple[int, int], n_jobs: int = 1) -> np.ndarray:
    def one(p):
        return preprocess(read_image(p), size)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            arrays = list(ex.map(one, paths))
    else:
        arrays = [one(p) for p in paths]
    if not arrays:
        return np.zeros((0, 3, *size), dtype=np.float32)
    return np.stack(arrays)


# ---------------------------------------------------------------------------
# augmentation

AUGMENT_OPS = (
    "reflection", "noise", "rotation", "hue", "brightness_jitter",
    "saturation", "translation", "shear", "contrast", "scaling",
)

# (min magnitude, max magnitude); the sign is drawn separately so identity is excluded
DEFAULT_RANGES: dict[str, tuple[float, float]] = {
    "rotation": (1.0, 30.0),  # degrees
    "translation": (0.02, 0.10),  # fraction of side
    "shear": (1.0, 15.0),  # degrees
    "scaling": (0.02, 0.15),  # |scale - 1|
    "brightness_jitter": (0.02, 0.20),
    "contrast": (0.02, 0.20),
    "saturation": (0.02, 0.20),
    "hue": (0.01, 0.10),  # fraction of the hue circle
    "noise": (0.02, 0.02),  # gaussian sigma in [0, 1] units
    "reflection": (1.0, 1.0),
}


@dataclass
class AugmentationSpec:
    ops: tuple[str, ...] = AUGMENT_OPS
    ranges: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_RANGES))
    variants_per_image: int = 14
    seed: int = 0

    def __post_init__(self):
        self.ops = tuple(self.ops)
        if self.variants_per_image < 1:
            raise ValueError("variants_per_image must be at least 1")
        if not self.ops:
            raise ValueError("at least one augmentation op must be enabled")
        for op in self.ops:
            if op not in AUGMENT_OPS:
                raise ValueError(f"unknown augmentation op {op!r}")
            lo, hi = self.ranges[op]
            if not (math.isfinite(lo) and math.isfinite(hi) and 0 <= lo <= hi):
                raise ValueError(f"range for {op!r} must be bounded and ordered, got {(lo, hi)}")


def _rgb_to_hsv(rgb):
    mx = rgb.max(-1)
    mn = rgb.min(-1)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    h = np.select(
        [d == 0, mx == r, mx == g],
        [0.0, ((g - b) / safe) % 6.0, (b - r) / safe + 2.0],
        (r - g) / safe + 4.0,
    ) / 6.0
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], -1)


def _hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], -1)


def _affine(img, matrix, h, w):
    # matrix maps output (y, x) about the center to input coordinates
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - matrix @ center
    return np.stack(
        [ndimage.affine_transform(img[..., c], matrix, offset=offset, order=1, mode="reflect") for c in range(3)],
        -1,
    )


def _apply_op(op: str, img: np.ndarray, mag: float, sign: float, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    if op == "reflection":
        return img[:, ::-1]
    if op == "rotation":
        a = np.deg2rad(sign * mag)
        return _affine(img, np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]]), h, w)
    if op == "shear":
        return _affine(img, np.array([[1.0, 0.0], [np.tan(np.deg2rad(sign * mag)), 1.0]]), h, w)
    if op == "scaling":
        return _affine(img, np.eye(2) / (1.0 + sign * mag), h, w)
    if op == "translation":
        dy, dx = sign * mag * h, rng.choice([-1.0, 1.0]) * mag * w
        return ndimage.shift(img, (dy, dx, 0), order=1, mode="reflect")
    if op == "brightness_jitter":
        return img + sign * mag
    if op == "contrast":
        mean = img.mean()
        return (img - mean) * (1.0 + sign * mag) + mean
    if op == "noise":
        return img + rng.normal(0.0, mag, img.shape)
    hsv = _rgb_to_hsv(np.clip(img, 0, 1))
    if op == "saturation":
        hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + sign * mag), 0, 1)
    elif op == "hue":
        hsv[..., 0] = (hsv[..., 0] + sign * mag) % 1.0
    return _hsv_to_rgb(hsv)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def augment(image: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Return ``spec.variants_per_image`` uint8 variants of an RGB uint8 image.

    Each variant applies a random non-empty subset of ``spec.ops`` in canonical
    order. A variant that would quantize back to the source is pushed off it
    with a brightness shift, so no output equals the input.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    src = np.asarray(image, dtype=np.uint8)
    base = src.astype(np.float64) / 255.0
    out = []
    for _ in range(spec.variants_per_image):
        chosen = [op for op in spec.ops if rng.random() < 0.5]
        if not chosen:
            chosen = [spec.ops[int(rng.integers(len(spec.ops)))]]
        img = base
        for op in chosen:
            lo, hi = spec.ranges[op]
            mag = float(rng.uniform(lo, hi))
            sign = float(rng.choice([-1.0, 1.0]))
            img = _apply_op(op, img, mag, sign, rng)
        variant = _to_uint8(img)
        if np.array_equal(variant, src):
            shift = -0.1 if base.mean() > 0.5 else 0.1
            variant = _to_uint8(img + shift)
        out.append(variant)
    return out


def augment_dataset(index: DatasetIndex, out_dir, spec: AugmentationSpec, n_jobs: int = 1) -> list[Path]:
    """Write ``<out>/<Class>/<stem>_augNN.png`` for every source image.

    Each source gets its own generator seeded from ``(spec.seed, position)``
    so the output does not depend on worker scheduling.
    """
    out_root = Path(out_dir)
    jobs = []
    for i, (path, label) in enumerate(index.entries):
        cls_dir = out_root / index.class_names[label]
        jobs.append((i, Path(path), cls_dir))
    for d in {j[2] for j in jobs}:
        d.mkdir(parents=True, exist_ok=True)

    def run(job):
        i, path, cls_dir = job
        rng = np.random.default_rng([spec.seed, i])
        written = []
        for k, variant in enumerate(augment(read_image(path), spec, rng)):
            target = cls_dir / f"{path.stem}_aug{k:02d}.png"
            write_png(target, variant)
            written.append(target)
        return written

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    return [p for r in results for p in r]


# ---------------------------------------------------------------------------
# splitting


def source_key(path: str) -> str:
    """Provenance group of a file: ``foo_aug03.png`` -> ``<dir>/foo``."""
    p = Path(path)
    m = _PROVENANCE.match(p.stem)
    return str(p.parent / (m.group("stem") if m else p.stem))


def _units(paths: Sequence[str], labels: np.ndarray, group_by_source: bool | None):
    """Group sample positions into atomic units (single files or provenance groups)."""
    if group_by_source is None:
        group_by_source = bool(paths) and all(_PROVENANCE.match(Path(p).stem) for p in paths)
    if not group_by_source:
        return [[i] for i in range(len(paths))], [int(labels[i]) for i in range(len(paths))]
    groups: dict[str, list[int]] = {}
    for i, p in enumerate(paths):
        groups.setdefault(source_key(p), []).append(i)
    units, unit_labels = [], []
    for key in sorted(groups):
        members = groups[key]
        ls = {int(labels[i]) for i in members}
        if len(ls) != 1:
            raise DatasetError(f"provenance group {key!r} mixes labels")
        units.append(members)
        unit_labels.append(ls.pop())
    return units, unit_labels


@dataclass(frozen=True)
class SplitPlan:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    ratios: tuple[float, float, float] = SPLIT_RATIOS
    seed: int = 0

    @property
    def pool(self) -> tuple[int, ...]:
        """Train and validation positions together (the cross-validation pool)."""
        return tuple(sorted(self.train + self.val))


def apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder split of ``n`` items by ``ratios``.

    Every share is floor(r*n) plus at most one of the leftover items, handed
    out by descending fractional remainder (ties: earlier ratio first), so
    each share is within one item of its exact quota.
    """
    quotas = [Fraction(str(r)) * n for r in ratios]
    shares = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - shares[i]), i))
    for i in order[: n - sum(shares)]:
        shares[i] += 1
    return shares


def stratified_split(
    idx: DatasetIndex,
    ratios: Sequence[float] = SPLIT_RATIOS,
    seed: int = 0,
    group_by_source: bool | None = None,
) -> SplitPlan:
    """Per class: shuffle, then cut into train/val/test by :func:`apportion`."""
    r_train, r_val, r_test = (float(r) for r in ratios)
    if min(r_train, r_val, r_test) < 0 or abs(r_train + r_val + r_test - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {tuple(ratios)}")
    units, unit_labels = _units(idx.paths, idx.labels, group_by_source)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for label in (1, 0):
        members = [u for u, y in zip(units, unit_labels) if y == label]
        if len(members) < 10:
            raise DatasetError(f"class {label} has {len(members)} units; at least 10 are needed to split")
        order = rng.permutation(len(members))
        n_train, n_val, _ = apportion(len(members), (r_train, r_val, r_test))
        for rank, j in enumerate(order):
            target = train if rank < n_train else val if rank < n_train + n_val else test
            target.extend(members[j])
    return SplitPlan(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)), (r_train, r_val, r_test), seed)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[tuple[int, ...], ...]  # validation positions per fold
    seed: int = 0

    @property
    def pool(self) -> tuple[int, ...]:
        return tuple(sorted(i for f in self.folds for i in f))

    def train_indices(self, fold: int) -> tuple[int, ...]:
        held = set(self.folds[fold])
        return tuple(i for i in self.pool if i not in held)

    def val_indices(self, fold: int) -> tuple[int, ...]:
        return self.folds[fold]


def make_folds(
    idx: DatasetIndex,
    pool: Sequence[int] | None = None,
    k: int = 4,
    seed: int = 0,
    group_by_source: bool | None = None,
) -> FoldPlan:
    """Stratified round-robin k-fold partition of ``pool`` (default: whole index).

    Each class is shuffled with the seed; positions are dealt to folds
    0..k-1 cyclically, continuing the cycle from one class to the next so
    overall fold sizes differ by at most one unit.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    pool = list(range(len(idx))) if pool is None else sorted(pool)
    paths = [idx.entries[i][0] for i in pool]
    labels = np.array([idx.entries[i][1] for i in pool], dtype=np.int64)
    units, unit_labels = _units(paths, labels, group_by_source)
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for label in (1, 0):
        members = [u for u, y in zip(units, unit_labels) if y == label]
        if len(members) < k:
            raise DatasetError(f"class {label} has {len(members)} units in the pool; need at least k={k}")
        for j in rng.permutation(len(members)):
            folds[cursor % k].extend(pool[i] for i in members[j])
            cursor += 1
    return FoldPlan(k, tuple(tuple(sorted(f)) for f in folds), seed)


# ---------------------------------------------------------------------------
# plan files: "subset,fold,path,label"

PLAN_HEADER = "subset,fold,path,label"


def write_plan(path, idx: DatasetIndex, split: SplitPlan, folds: FoldPlan | None = None) -> None:
    fold_of = {}
    if folds is not None:
        for f, members in enumerate(folds.folds):
            for i in members:
                fold_of[i] = f
    lines = [PLAN_HEADER]
    for subset, members in (("train", split.train), ("val", split.val), ("test", split.test)):
        for i in members:
            p, y = idx.entries[i]
            lines.append(f"{subset},{fold_of.get(i, -1)},{p},{y}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_plan(path) -> tuple[DatasetIndex, SplitPlan, FoldPlan | None]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.strip() == PLAN_HEADER:
            continue
        subset, fold, rest = line.split(",", 2)
        p, y = rest.rsplit(",", 1)
        rows.append((subset, int(fold), p, int(y)))
    ordered = sorted(rows, key=lambda r: r[2])
    idx = DatasetIndex([(p, y) for _, _, p, y in ordered])
    pos = {p: i for i, (p, _) in enumerate(idx.entries)}
    subsets: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    fold_members: dict[int, list[int]] = {}
    for subset, fold, p, _ in rows:
        subsets[subset].append(pos[p])
        if fold >= 0:
            fold_members.setdefault(fold, []).append(pos[p])
    split = SplitPlan(*(tuple(sorted(subsets[s])) for s in ("train", "val", "test")))
    folds = None
    if fold_members:
        k = max(fold_members) + 1
        folds = FoldPlan(k, tuple(tuple(sorted(fold_members.get(f, []))) for f in range(k)))
    return idx, split, folds

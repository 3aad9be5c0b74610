"""Synthetic two-class lesion images for tests and demos."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import write_png


def lesion_image(rng: np.random.Generator, positive: bool, size: int = 64) -> np.ndarray:
    """Skin-toned background with round spots: many small red ones for the
    positive class, a few large pale-brown ones otherwise."""
    yy, xx = np.mgrid[0:size, 0:size]
    skin = np.array([224, 172, 140]) + rng.normal(0, 8, 3)
    img = np.broadcast_to(skin, (size, size, 3)).astype(np.float64).copy()
    img += rng.normal(0, 4, img.shape)
    n_spots = rng.integers(5, 9) if positive else rng.integers(1, 3)
    radius = (0.06, 0.10) if positive else (0.15, 0.25)
    color = np.array([170, 40, 50]) if positive else np.array([190, 150, 110])
    for _ in range(n_spots):
        cy, cx = rng.uniform(0.15, 0.85, 2) * size
        r = rng.uniform(*radius) * size
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[mask] = 0.3 * img[mask] + 0.7 * color
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_dataset(root, n_positive: int = 32, n_negative: int = 32, size: int = 64, seed: int = 0,
                 positive_name: str = "Monkeypox", negative_name: str = "Others") -> Path:
    """Write ``<root>/<positive_name>`` and ``<root>/<negative_name>`` PNG folders."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for name, n, positive in ((positive_name, n_positive, True), (negative_name, n_negative, False)):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            write_png(d / f"{name.lower()}_{i:04d}.png", lesion_image(rng, positive, size))
    return root

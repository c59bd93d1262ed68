"""Synthetic wound-like fixtures standing in for the clinical images."""
from __future__ import annotations

import numpy as np

from .data import CALLUS, FIBRIN, GRANULATION, RgbImage, TissueMask

SKIN = (188, 146, 118)
TISSUE_TINT = {
    FIBRIN: (226, 204, 112),
    GRANULATION: (196, 52, 64),
    CALLUS: (240, 226, 196),
}

# images containing each tissue in the 110-image labeled set
LABELED_OCCURRENCE = {FIBRIN: 74, GRANULATION: 93, CALLUS: 86}


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synthetic_pair(
    rng: np.random.Generator,
    size: tuple[int, int] = (64, 64),
    classes=(FIBRIN, GRANULATION, CALLUS),
    name: str = "",
    noise: float = 6.0,
) -> tuple[RgbImage, TissueMask]:
    """One image with an elliptical blob per requested tissue class.

    Later classes paint over earlier ones; a class that ends up fully
    covered is re-seeded on background pixels so it stays present.
    """
    h, w = size
    labels = np.zeros((h, w), dtype=np.uint8)
    for k in classes:
        ry = rng.uniform(0.12, 0.28) * h
        rx = rng.uniform(0.12, 0.28) * w
        cy = rng.uniform(ry, h - ry)
        cx = rng.uniform(rx, w - rx)
        labels[_ellipse(h, w, cy, cx, ry, rx)] = k
    for k in classes:
        if not (labels == k).any():
            ys, xs = np.nonzero(labels == 0)
            if len(ys) == 0:
                raise ValueError("no background left to re-seed a covered class")
            i = rng.integers(len(ys))
            spot = _ellipse(h, w, ys[i], xs[i], 1.5, 1.5) & (labels == 0)
            labels[spot] = k
    pixels = np.empty((h, w, 3), dtype=np.float64)
    pixels[:] = SKIN
    for k, tint in TISSUE_TINT.items():
        pixels[labels == k] = tint
    pixels += rng.normal(0.0, noise, size=pixels.shape)
    img = RgbImage(np.clip(np.rint(pixels), 0, 255).astype(np.uint8), name)
    return img, TissueMask(labels)


def synthetic_dataset(
    count: int, seed: int = 0, size=(64, 64), prefix: str = "synth"
) -> list[tuple[RgbImage, TissueMask]]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        present = tuple(k for k in (FIBRIN, GRANULATION, CALLUS) if rng.random() < 0.8)
        out.append(synthetic_pair(rng, size, present, name=f"{prefix}_{i:04d}"))
    return out


def occurrence_fixture(seed: int = 0, size=(32, 32), total: int = 110) -> list[tuple[RgbImage, TissueMask]]:
    """Labeled set whose per-tissue image occurrence matches the released counts.

    For `total` other than 110 the counts are scaled proportionally.
    """
    rng = np.random.default_rng(seed)
    present = [set() for _ in range(total)]
    for k, n in LABELED_OCCURRENCE.items():
        n = min(total, round(n * total / 110))
        for idx in rng.choice(total, size=n, replace=False):
            present[idx].add(k)
    return [
        synthetic_pair(rng, size, tuple(sorted(p)), name=f"dfu_{i:04d}")
        for i, p in enumerate(present)
    ]


def synthetic_unlabeled(count: int, seed: int = 1, size=(64, 64), prefix: str = "unl") -> list[RgbImage]:
    return [img for img, _ in synthetic_dataset(count, seed, size, prefix)]

"""Image/mask value types, palette encoding, canvas padding and dataset splits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

BACKGROUND, FIBRIN, GRANULATION, CALLUS = 0, 1, 2, 3
CLASS_NAMES = ("background", "fibrin", "granulation", "callus")
NUM_CLASSES = 4


class DimensionError(ValueError):
    pass


class UnknownColorError(ValueError):
    pass


class UnknownLabelError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class RgbImage:
    pixels: np.ndarray
    name: str = ""
    # (H, W) before padding; None means the pixels are the original
    original_size: Optional[tuple[int, int]] = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DimensionError(f"expected HxWx3 pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise ValueError("channel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class TissueMask:
    labels: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise DimensionError(f"expected HxW labels, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise UnknownLabelError(
                f"labels must lie in [0, {self.num_classes - 1}], "
                f"found range [{lab.min()}, {lab.max()}]"
            )
        lab = lab.astype(np.uint8)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def present_classes(self) -> set[int]:
        return set(np.unique(self.labels).tolist())


@dataclass(frozen=True)
class ClassPalette:
    colors: dict = field(
        default_factory=lambda: {
            BACKGROUND: (0, 0, 0),
            FIBRIN: (255, 0, 0),
            GRANULATION: (0, 255, 0),
            CALLUS: (0, 0, 255),
        }
    )

    def __post_init__(self):
        triples = [tuple(int(v) for v in c) for c in self.colors.values()]
        if len(set(triples)) != len(triples):
            raise ValueError("palette colors must be distinct")
        object.__setattr__(
            self, "colors", {int(k): tuple(int(v) for v in c) for k, c in self.colors.items()}
        )

    def __len__(self) -> int:
        return len(self.colors)

    def lookup_table(self) -> np.ndarray:
        lut = np.zeros((max(self.colors) + 1, 3), dtype=np.uint8)
        for k, c in self.colors.items():
            lut[k] = c
        return lut


DEFAULT_PALETTE = ClassPalette()


@dataclass(frozen=True)
class SplitSpec:
    train_count: int
    val_count: int
    test_count: int
    seed: int = 0

    def __post_init__(self):
        if min(self.train_count, self.val_count, self.test_count) < 0:
            raise SplitError("split counts must be non-negative")

    @property
    def total(self) -> int:
        return self.train_count + self.val_count + self.test_count

    @classmethod
    def from_ratio(cls, total: int, ratio=(70, 15, 15), seed: int = 0) -> "SplitSpec":
        """Val and test get floor(share * total); train takes the remainder.

        110 images at 70:15:15 gives 78/16/16.
        """
        s = sum(ratio)
        val = math.floor(total * ratio[1] / s)
        test = math.floor(total * ratio[2] / s)
        return cls(total - val - test, val, test, seed)


@dataclass
class DatasetPools:
    """Mutable state of the pseudo-label selection loop."""

    L: list = field(default_factory=list)   # labeled (RgbImage, TissueMask) pairs
    U: list = field(default_factory=list)   # unlabeled RgbImage
    T1: dict = field(default_factory=dict)  # name -> pseudo TissueMask
    T2: list = field(default_factory=list)  # (RgbImage, pseudo TissueMask) pairs
    R: list = field(default_factory=list)   # picked name lists, one per inner run
    VL: list = field(default_factory=list)  # best validation loss per inner run
    TV: float = math.inf

    def labeled_names(self) -> set[str]:
        return {img.name for img, _ in self.L}

    def unlabeled_names(self) -> set[str]:
        return {img.name for img in self.U}

    def check_disjoint(self) -> None:
        l_names, u_names = self.labeled_names(), self.unlabeled_names()
        t2_names = {img.name for img, _ in self.T2}
        if len(l_names) != len(self.L) or len(u_names) != len(self.U):
            raise AssertionError("duplicate image names inside a pool")
        if l_names & u_names:
            raise AssertionError(f"L and U overlap: {sorted(l_names & u_names)[:5]}")
        if t2_names & l_names:
            raise AssertionError(f"T2 and L overlap: {sorted(t2_names & l_names)[:5]}")


def pad_to_canvas(
    image: RgbImage, mask: Optional[TissueMask] = None, side: int = 256
) -> tuple[RgbImage, Optional[TissueMask]]:
    """Zero-pad to a side x side canvas with the original centered.

    Odd leftovers go to the bottom/right, so the content sits toward the
    top-left on ties. Padded mask pixels are background.
    """
    h, w = image.shape
    if h > side or w > side:
        raise DimensionError(f"image {image.name!r} is {h}x{w}, exceeds canvas {side}x{side}")
    if mask is not None and mask.shape != (h, w):
        raise DimensionError(f"mask shape {mask.shape} does not match image shape {(h, w)}")
    top, left = (side - h) // 2, (side - w) // 2
    canvas = np.zeros((side, side, 3), dtype=np.uint8)
    canvas[top:top + h, left:left + w] = image.pixels
    orig = image.original_size or (h, w)
    out_img = RgbImage(canvas, image.name, orig)
    out_mask = None
    if mask is not None:
        lab = np.zeros((side, side), dtype=np.uint8)
        lab[top:top + h, left:left + w] = mask.labels
        out_mask = TissueMask(lab, mask.num_classes)
    return out_img, out_mask


def canvas_offsets(original_size: tuple[int, int], side: int) -> tuple[int, int]:
    h, w = original_size
    return (side - h) // 2, (side - w) // 2


def crop_from_canvas(array: np.ndarray, original_size: tuple[int, int]) -> np.ndarray:
    """Inverse of pad_to_canvas for any array whose first two axes are the canvas."""
    side = array.shape[0]
    top, left = canvas_offsets(original_size, side)
    h, w = original_size
    return array[top:top + h, left:left + w]


def encode_mask(color_mask: np.ndarray, palette: ClassPalette = DEFAULT_PALETTE) -> TissueMask:
    color_mask = np.asarray(color_mask)
    if color_mask.ndim != 3 or color_mask.shape[2] != 3:
        raise DimensionError(f"expected HxWx3 color mask, got shape {color_mask.shape}")
    packed = (
        color_mask[..., 0].astype(np.int64) << 16
        | color_mask[..., 1].astype(np.int64) << 8
        | color_mask[..., 2].astype(np.int64)
    )
    labels = np.full(packed.shape, -1, dtype=np.int64)
    for k, (r, g, b) in palette.colors.items():
        labels[packed == (r << 16 | g << 8 | b)] = k
    bad = labels < 0
    if bad.any():
        ys, xs = np.nonzero(bad)
        triples = sorted({tuple(int(v) for v in color_mask[y, x]) for y, x in zip(ys, xs)})
        coords = list(zip(ys[:5].tolist(), xs[:5].tolist()))
        raise UnknownColorError(
            f"{int(bad.sum())} pixels have colors outside the palette: "
            f"{triples[:10]} (first coordinates {coords})"
        )
    return TissueMask(labels, num_classes=max(len(palette), NUM_CLASSES))


def decode_mask(mask: TissueMask, palette: ClassPalette = DEFAULT_PALETTE) -> np.ndarray:
    labels = np.asarray(mask.labels)
    unknown = set(np.unique(labels).tolist()) - set(palette.colors)
    if unknown:
        raise UnknownLabelError(f"labels {sorted(unknown)} have no palette color")
    return palette.lookup_table()[labels]


def make_splits(pairs: Sequence, spec: SplitSpec) -> tuple[list, list, list]:
    if spec.total != len(pairs):
        raise SplitError(
            f"split counts {spec.train_count}+{spec.val_count}+{spec.test_count}"
            f" = {spec.total} do not match {len(pairs)} items"
        )
    order = np.random.default_rng(spec.seed).permutation(len(pairs))
    items = [pairs[i] for i in order]
    a = spec.train_count
    b = a + spec.val_count
    return items[:a], items[a:b], items[b:]


def tissue_occurrence(masks: Sequence[TissueMask]) -> dict[str, int]:
    """Number of masks in which each tissue class appears at least once."""
    counts = {name: 0 for name in CLASS_NAMES[1:]}
    for m in masks:
        present = m.present_classes()
        for k, name in enumerate(CLASS_NAMES[1:], start=1):
            counts[name] += k in present
    return counts


def tissue_pixel_counts(masks: Sequence[TissueMask]) -> dict[str, int]:
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for m in masks:
        counts += np.bincount(m.labels.ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES]
    return {name: int(counts[k]) for k, name in enumerate(CLASS_NAMES)}

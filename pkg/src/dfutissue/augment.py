"""Probabilistic four-set augmentation for paired image/mask samples.

Sets are applied in order and every transform fires independently with
its own probability, so a later set operates on the output of the
earlier ones. Geometric transforms move the image (bilinear) and the mask
(nearest neighbour) with one shared parameter draw; photometric ones
touch the image only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import cv2
import numpy as np

from .data import CALLUS, FIBRIN, RgbImage, TissueMask

AFFINE, PERSPECTIVE, PHOTOMETRIC = "affine", "perspective", "photometric"
KINDS = (AFFINE, PERSPECTIVE, PHOTOMETRIC)


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _warp_affine(arr, matrix, nearest):
    h, w = arr.shape[:2]
    flags = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.warpAffine(arr, matrix, (w, h), flags=flags,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)


class Transform:
    kind = PHOTOMETRIC

    def sample(self, rng: np.random.Generator, shape, params: dict) -> dict:
        return {}

    def image(self, img: np.ndarray, p: dict) -> np.ndarray:
        raise NotImplementedError

    def mask(self, labels: np.ndarray, p: dict) -> np.ndarray:
        return labels


class HorizontalFlip(Transform):
    kind = AFFINE

    def image(self, img, p):
        return np.ascontiguousarray(img[:, ::-1])

    mask = image


class VerticalFlip(Transform):
    kind = AFFINE

    def image(self, img, p):
        return np.ascontiguousarray(img[::-1])

    mask = image


class Transpose(Transform):
    kind = AFFINE

    def image(self, img, p):
        return np.ascontiguousarray(np.swapaxes(img, 0, 1))

    mask = image


class Rotate90(Transform):
    kind = AFFINE

    def sample(self, rng, shape, params):
        return {"k": int(rng.integers(1, 4))}

    def image(self, img, p):
        return np.ascontiguousarray(np.rot90(img, p["k"]))

    mask = image


class Shift(Transform):
    """Integer translation with zero fill."""

    kind = AFFINE

    def sample(self, rng, shape, params):
        frac = min(abs(params.get("max_fraction", 0.0625)), 1.0)
        h, w = shape
        my, mx = int(round(frac * h)), int(round(frac * w))
        return {"dy": int(rng.integers(-my, my + 1)), "dx": int(rng.integers(-mx, mx + 1))}

    def image(self, img, p):
        dy, dx = p["dy"], p["dx"]
        h, w = img.shape[:2]
        out = np.zeros_like(img)
        if abs(dy) >= h or abs(dx) >= w:
            return out
        src_y = slice(max(0, -dy), h - max(0, dy))
        dst_y = slice(max(0, dy), h - max(0, -dy))
        src_x = slice(max(0, -dx), w - max(0, dx))
        dst_x = slice(max(0, dx), w - max(0, -dx))
        out[dst_y, dst_x] = img[src_y, src_x]
        return out

    mask = image


class Rotate(Transform):
    kind = AFFINE

    def sample(self, rng, shape, params):
        limit = abs(params.get("limit", 15.0))
        return {"angle": _uniform(rng, (-limit, limit))}

    def _matrix(self, shape, p):
        h, w = shape[:2]
        return cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), p["angle"], 1.0)

    def image(self, img, p):
        return _warp_affine(img, self._matrix(img.shape, p), nearest=False)

    def mask(self, labels, p):
        return _warp_affine(labels, self._matrix(labels.shape, p), nearest=True)


class Scale(Transform):
    """Zoom about the image center; output keeps the input size."""

    kind = AFFINE

    def sample(self, rng, shape, params):
        lo, hi = params.get("range", (0.9, 1.1))
        return {"factor": max(_uniform(rng, (lo, hi)), 0.05)}

    def _matrix(self, shape, p):
        h, w = shape[:2]
        return cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), 0.0, p["factor"])

    def image(self, img, p):
        return _warp_affine(img, self._matrix(img.shape, p), nearest=False)

    def mask(self, labels, p):
        return _warp_affine(labels, self._matrix(labels.shape, p), nearest=True)


class Perspective(Transform):
    kind = PERSPECTIVE

    def sample(self, rng, shape, params):
        h, w = shape
        lo, hi = params.get("scale", (0.02, 0.06))
        s = min(max(_uniform(rng, (lo, hi)), 0.0), 0.4)
        jitter = rng.uniform(0, s, size=(4, 2)) * np.array([w, h])
        src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
        sign = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]])
        return {"src": src.tolist(), "dst": (src + sign * jitter).tolist()}

    def _warp(self, arr, p, nearest):
        h, w = arr.shape[:2]
        m = cv2.getPerspectiveTransform(np.float32(p["src"]), np.float32(p["dst"]))
        flags = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
        return cv2.warpPerspective(arr, m, (w, h), flags=flags,
                                   borderMode=cv2.BORDER_CONSTANT, borderValue=0)

    def image(self, img, p):
        return self._warp(img, p, nearest=False)

    def mask(self, labels, p):
        return self._warp(labels, p, nearest=True)


def _to_u8(x):
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


class Brightness(Transform):
    def sample(self, rng, shape, params):
        lim = params.get("limit", 0.2)
        return {"beta": _uniform(rng, (-lim, lim))}

    def image(self, img, p):
        return _to_u8(img.astype(np.float64) + 255.0 * p["beta"])


class Contrast(Transform):
    def sample(self, rng, shape, params):
        lim = params.get("limit", 0.2)
        return {"alpha": 1.0 + _uniform(rng, (-lim, lim))}

    def image(self, img, p):
        x = img.astype(np.float64)
        mean = x.mean()
        return _to_u8((x - mean) * p["alpha"] + mean)


class Gamma(Transform):
    def sample(self, rng, shape, params):
        lo, hi = params.get("range", (0.8, 1.2))
        return {"gamma": max(_uniform(rng, (lo, hi)), 1e-3)}

    def image(self, img, p):
        lut = _to_u8(255.0 * (np.arange(256) / 255.0) ** p["gamma"])
        return lut[img]


class HueSaturation(Transform):
    def sample(self, rng, shape, params):
        return {
            "hue": _uniform(rng, (-params.get("hue_shift", 10), params.get("hue_shift", 10))),
            "sat": _uniform(rng, (-params.get("sat_shift", 20), params.get("sat_shift", 20))),
            "val": _uniform(rng, (-params.get("val_shift", 10), params.get("val_shift", 10))),
        }

    def image(self, img, p):
        hsv = cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2HSV).astype(np.float64)
        hsv[..., 0] = np.mod(hsv[..., 0] + p["hue"], 180.0)
        hsv[..., 1] += p["sat"]
        hsv[..., 2] += p["val"]
        hsv[..., 0] = np.clip(np.rint(hsv[..., 0]), 0, 179)
        return cv2.cvtColor(_to_u8(hsv), cv2.COLOR_HSV2RGB)


class GaussianBlur(Transform):
    def sample(self, rng, shape, params):
        lo, hi = params.get("ksize", (3, 7))
        k = int(rng.integers(lo, hi + 1))
        return {"ksize": max(k | 1, 1)}

    def image(self, img, p):
        k = p["ksize"]
        return cv2.GaussianBlur(np.ascontiguousarray(img), (k, k), 0)


class GaussianNoise(Transform):
    def sample(self, rng, shape, params):
        std = _uniform(rng, params.get("std", (3.0, 12.0)))
        return {"std": std, "seed": int(rng.integers(2**31))}

    def image(self, img, p):
        noise = np.random.default_rng(p["seed"]).normal(0.0, p["std"], size=img.shape)
        return _to_u8(img.astype(np.float64) + noise)


class Clahe(Transform):
    def sample(self, rng, shape, params):
        return {"clip_limit": max(_uniform(rng, params.get("clip_limit", (1.0, 4.0))), 0.01),
                "grid": int(params.get("grid", 8))}

    def image(self, img, p):
        lab = cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2LAB)
        clahe = cv2.createCLAHE(clipLimit=p["clip_limit"], tileGridSize=(p["grid"], p["grid"]))
        lab[..., 0] = clahe.apply(np.ascontiguousarray(lab[..., 0]))
        return cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)


class ColorJitter(Transform):
    def sample(self, rng, shape, params):
        g = params.get("gain", 0.1)
        s = params.get("saturation", 0.2)
        return {"gains": rng.uniform(1 - g, 1 + g, size=3).tolist(),
                "saturation": _uniform(rng, (1 - s, 1 + s))}

    def image(self, img, p):
        x = img.astype(np.float64) * np.asarray(p["gains"])
        gray = x @ np.array([0.299, 0.587, 0.114])
        x = gray[..., None] + p["saturation"] * (x - gray[..., None])
        return _to_u8(x)


REGISTRY: dict[str, Transform] = {
    "horizontal_flip": HorizontalFlip(),
    "vertical_flip": VerticalFlip(),
    "shift": Shift(),
    "rotate": Rotate(),
    "scale": Scale(),
    "transpose": Transpose(),
    "rotate90": Rotate90(),
    "brightness": Brightness(),
    "contrast": Contrast(),
    "gamma": Gamma(),
    "hue_saturation": HueSaturation(),
    "perspective": Perspective(),
    "gaussian_blur": GaussianBlur(),
    "gaussian_noise": GaussianNoise(),
    "clahe": Clahe(),
    "color_jitter": ColorJitter(),
}


@dataclass(frozen=True)
class TransformSpec:
    name: str
    kind: str
    probability: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in REGISTRY:
            raise ValueError(f"unknown transform {self.name!r}")
        if self.kind != REGISTRY[self.name].kind:
            raise ValueError(f"{self.name} is a {REGISTRY[self.name].kind} transform, not {self.kind}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability of {self.name} must lie in [0, 1]")

    @property
    def geometric(self) -> bool:
        return self.kind != PHOTOMETRIC


@dataclass(frozen=True)
class AugmentationPipeline:
    sets: tuple

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(tuple(s) for s in self.sets))

    def transforms(self) -> list[TransformSpec]:
        return [t for s in self.sets for t in s]

    def with_probability(self, p: float) -> "AugmentationPipeline":
        return AugmentationPipeline(
            [[TransformSpec(t.name, t.kind, p, t.params) for t in s] for s in self.sets]
        )

    def to_dict(self) -> dict:
        return {"sets": [[{"name": t.name, "kind": t.kind, "probability": t.probability,
                           "params": t.params} for t in s] for s in self.sets]}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPipeline":
        return cls([[TransformSpec(t["name"], t["kind"], float(t["probability"]), dict(t.get("params", {})))
                     for t in s] for s in d["sets"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AugmentationPipeline":
        return cls.from_dict(json.loads(text))


def build_default_pipeline() -> AugmentationPipeline:
    """Flips and shifts fire more often than scaling and rotation."""
    T = TransformSpec
    return AugmentationPipeline([
        [T("horizontal_flip", AFFINE, 0.5), T("vertical_flip", AFFINE, 0.5),
         T("shift", AFFINE, 0.5, {"max_fraction": 0.0625})],
        [T("rotate", AFFINE, 0.2, {"limit": 15.0}), T("scale", AFFINE, 0.2, {"range": [0.9, 1.1]}),
         T("transpose", AFFINE, 0.3)],
        [T("brightness", PHOTOMETRIC, 0.3, {"limit": 0.2}), T("contrast", PHOTOMETRIC, 0.3, {"limit": 0.2}),
         T("gamma", PHOTOMETRIC, 0.2, {"range": [0.8, 1.2]}),
         T("hue_saturation", PHOTOMETRIC, 0.2, {"hue_shift": 10, "sat_shift": 20, "val_shift": 10}),
         T("perspective", PERSPECTIVE, 0.2, {"scale": [0.02, 0.06]})],
        [T("gaussian_blur", PHOTOMETRIC, 0.2, {"ksize": [3, 7]}),
         T("gaussian_noise", PHOTOMETRIC, 0.2, {"std": [3.0, 12.0]}),
         T("clahe", PHOTOMETRIC, 0.2, {"clip_limit": [1.0, 4.0], "grid": 8}),
         T("color_jitter", PHOTOMETRIC, 0.2, {"gain": 0.1, "saturation": 0.2})],
    ])


def apply_arrays(
    pipeline: AugmentationPipeline,
    img: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    fired: Optional[list] = None,
) -> tuple[np.ndarray, np.ndarray]:
    if img.shape[:2] != labels.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {labels.shape} differ in size")
    for tset in pipeline.sets:
        for spec in tset:
            if rng.random() >= spec.probability:
                continue
            t = REGISTRY[spec.name]
            p = t.sample(rng, img.shape[:2], spec.params)
            img = t.image(img, p)
            if spec.geometric:
                labels = t.mask(labels, p)
            if fired is not None:
                fired.append(spec.name)
    return img, labels


def apply(
    pipeline: AugmentationPipeline,
    image: RgbImage,
    mask: TissueMask,
    rng: np.random.Generator,
    fired: Optional[list] = None,
) -> tuple[RgbImage, TissueMask]:
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in size")
    img, lab = apply_arrays(pipeline, np.asarray(image.pixels), np.asarray(mask.labels), rng, fired)
    return RgbImage(img, image.name, image.original_size), TissueMask(lab, mask.num_classes)


def minority_oversample(
    train_pairs: Sequence[tuple[RgbImage, TissueMask]],
    pipeline: AugmentationPipeline,
    factor: int,
    target_classes=(FIBRIN, CALLUS),
    seed: int = 0,
    max_retries: int = 5,
) -> list[tuple[RgbImage, TissueMask]]:
    """Replace every pair containing a target tissue by `factor` augmented copies.

    A copy whose transforms pushed all target pixels off the canvas is
    redrawn up to `max_retries` times, then falls back to the original.
    Pairs without target tissue pass through unchanged.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    targets = set(target_classes)
    per_pair = np.random.SeedSequence(seed).spawn(len(train_pairs))
    out = []
    for (image, mask), pair_seed in zip(train_pairs, per_pair):
        if not targets & mask.present_classes():
            out.append((image, mask))
            continue
        for c, copy_seed in enumerate(pair_seed.spawn(factor)):
            rng = np.random.default_rng(copy_seed)
            copy = (image, mask)
            for _ in range(max_retries + 1):
                aug_img, aug_mask = apply(pipeline, image, mask, rng)
                if targets & aug_mask.present_classes():
                    copy = (RgbImage(aug_img.pixels, f"{image.name}#aug{c}", image.original_size), aug_mask)
                    break
            else:
                copy = (RgbImage(image.pixels, f"{image.name}#aug{c}", image.original_size), mask)
            out.append(copy)
    return out

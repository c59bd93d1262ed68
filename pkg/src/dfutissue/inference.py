"""Prediction on arbitrary-size images and palette overlays."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .data import DEFAULT_PALETTE, ClassPalette, RgbImage, crop_from_canvas, pad_to_canvas
from .trainer import images_to_tensor


def predict_labels(model, images: Sequence[RgbImage], side: int = 256, batch_size: int = 8) -> list[np.ndarray]:
    """Pad each image to the canvas, take the per-pixel argmax, crop back to the original size."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            chunk = images[i:i + batch_size]
            padded = [pad_to_canvas(RgbImage(im.pixels, im.name), None, side)[0] for im in chunk]
            logits = model(images_to_tensor([p.pixels for p in padded], dtype))
            for im, lab in zip(chunk, logits.argmax(1).numpy().astype(np.uint8)):
                out.append(np.ascontiguousarray(crop_from_canvas(lab, im.shape)))
    return out


def overlay(pixels: np.ndarray, labels: np.ndarray, palette: ClassPalette = DEFAULT_PALETTE,
            opacity: float = 0.5) -> np.ndarray:
    """Blend palette colors over tissue pixels (round half up); background stays untouched."""
    pixels = np.asarray(pixels)
    colors = palette.lookup_table()[labels].astype(np.float64)
    blended = np.floor((1.0 - opacity) * pixels + opacity * colors + 0.5)
    out = pixels.copy()
    tissue = labels > 0
    out[tissue] = np.clip(blended[tissue], 0, 255).astype(np.uint8)
    return out

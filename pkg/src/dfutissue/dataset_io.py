"""On-disk dataset layout: padded PNGs, indexed + color masks and a manifest.

    <root>/images/<name>.png      padded RGB
    <root>/masks/<name>.png       indexed labels (authoritative)
    <root>/masks_rgb/<name>.png   palette colors, for people
    <root>/unlabeled/<name>.png   padded RGB without labels
    <root>/manifest.json          original sizes and split assignment
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .data import (DEFAULT_PALETTE, ClassPalette, RgbImage, SplitSpec, TissueMask, decode_mask,
                   encode_mask, make_splits, pad_to_canvas)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class EmptyInputError(ValueError):
    pass


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_labels_or_colors(path) -> np.ndarray:
    """Indexed/greyscale PNG -> HxW array; anything else -> HxWx3 RGB."""
    with Image.open(path) as im:
        if im.mode in ("P", "L", "I", "I;16"):
            return np.asarray(im)  # palette PNGs yield their indices
        return np.asarray(im.convert("RGB"))


def write_png(path, array: np.ndarray, text: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    info = PngInfo()
    for k, v in sorted((text or {}).items()):
        info.add_text(str(k), str(v))
    Image.fromarray(np.ascontiguousarray(array)).save(path, pnginfo=info)


def read_png_text(path) -> dict:
    with Image.open(path) as im:
        return dict(getattr(im, "text", {}))


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _fit(pixels: np.ndarray, labels: Optional[np.ndarray], side: int):
    h, w = pixels.shape[:2]
    scale = side / max(h, w)
    size = (max(1, int(round(w * scale))), max(1, int(round(h * scale))))
    pixels = cv2.resize(pixels, size, interpolation=cv2.INTER_AREA)
    if labels is not None:
        labels = cv2.resize(labels, size, interpolation=cv2.INTER_NEAREST)
    return pixels, labels


def load_pair(image_path, mask_path, palette: ClassPalette = DEFAULT_PALETTE):
    pixels = read_rgb(image_path)
    raw = read_labels_or_colors(mask_path)
    try:
        mask = TissueMask(raw) if raw.ndim == 2 else encode_mask(raw, palette)
    except ValueError as exc:
        raise type(exc)(f"{mask_path}: {exc}") from exc
    if mask.shape != pixels.shape[:2]:
        raise ValueError(f"{mask_path}: mask {mask.shape} does not match image {pixels.shape[:2]}")
    return RgbImage(pixels, Path(image_path).stem), mask


def prepare_dataset(in_dir, out_dir, side: int = 256, seed: int = 0, ratio=(70, 15, 15),
                    resize: bool = False, palette: ClassPalette = DEFAULT_PALETTE,
                    text: Optional[dict] = None) -> dict:
    """Pad, index and split a raw `images/` + `masks/` (+ `unlabeled/`) directory."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"input directory {in_dir} does not exist")
    image_paths = _list_images(in_dir / "images")
    unlabeled_paths = _list_images(in_dir / "unlabeled")
    if not image_paths and not unlabeled_paths:
        raise EmptyInputError(f"no images found under {in_dir}/images or {in_dir}/unlabeled")
    masks = {p.stem: p for p in _list_images(in_dir / "masks")}
    text = dict(text or {})

    records = []
    for ip in image_paths:
        if ip.stem not in masks:
            raise FileNotFoundError(f"no mask for image {ip.name} in {in_dir / 'masks'}")
        img, mask = load_pair(ip, masks[ip.stem], palette)
        if resize and max(img.shape) > side:
            px, lab = _fit(np.asarray(img.pixels), np.asarray(mask.labels), side)
            img, mask = RgbImage(px, img.name), TissueMask(lab)
        pimg, pmask = pad_to_canvas(img, mask, side)
        write_png(out_dir / "images" / f"{img.name}.png", pimg.pixels, text)
        write_png(out_dir / "masks" / f"{img.name}.png", pmask.labels, text)
        write_png(out_dir / "masks_rgb" / f"{img.name}.png", decode_mask(pmask, palette), text)
        records.append({"name": img.name, "original_size": list(img.shape)})

    train, val, test = make_splits(records, SplitSpec.from_ratio(len(records), ratio, seed))
    for split, items in (("train", train), ("val", val), ("test", test)):
        for r in items:
            r["split"] = split

    unlabeled = []
    for up in unlabeled_paths:
        img = RgbImage(read_rgb(up), up.stem)
        if resize and max(img.shape) > side:
            img = RgbImage(_fit(np.asarray(img.pixels), None, side)[0], img.name)
        pimg, _ = pad_to_canvas(img, None, side)
        write_png(out_dir / "unlabeled" / f"{img.name}.png", pimg.pixels, text)
        unlabeled.append({"name": img.name, "original_size": list(img.shape)})

    manifest = {
        "side": side,
        "seed": seed,
        "ratio": list(ratio),
        "palette": {str(k): list(v) for k, v in palette.colors.items()},
        "images": sorted(records, key=lambda r: r["name"]),
        "unlabeled": unlabeled,
        "counts": {"train": len(train), "val": len(val), "test": len(test), "unlabeled": len(unlabeled)},
        **text,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `prepare` first")
    return json.loads(path.read_text())


def load_split(root, split: str) -> list[tuple[RgbImage, TissueMask]]:
    root = Path(root)
    manifest = read_manifest(root)
    out = []
    for r in manifest["images"]:
        if r["split"] != split:
            continue
        mask_path = root / "masks" / f"{r['name']}.png"
        if not mask_path.exists():
            raise FileNotFoundError(f"ground truth {mask_path} missing")
        pixels = read_rgb(root / "images" / f"{r['name']}.png")
        labels = read_labels_or_colors(mask_path)
        out.append((RgbImage(pixels, r["name"], tuple(r["original_size"])), TissueMask(labels)))
    return out


def load_unlabeled(root) -> list[RgbImage]:
    root = Path(root)
    return [RgbImage(read_rgb(root / "unlabeled" / f"{r['name']}.png"), r["name"], tuple(r["original_size"]))
            for r in read_manifest(root)["unlabeled"]]


def write_raw_dataset(pairs, out_dir, unlabeled=(), palette: ClassPalette = DEFAULT_PALETTE) -> Path:
    """Write pairs in the raw input layout `prepare` expects (color masks)."""
    out_dir = Path(out_dir)
    for img, mask in pairs:
        write_png(out_dir / "images" / f"{img.name}.png", img.pixels)
        write_png(out_dir / "masks" / f"{img.name}.png", decode_mask(mask, palette))
    for img in unlabeled:
        write_png(out_dir / "unlabeled" / f"{img.name}.png", img.pixels)
    return out_dir

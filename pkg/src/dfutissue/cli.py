"""Command-line entry point: prepare, train, ssl-train, infer, eval, augment-preview.

Exit codes: 0 success, 1 usage or general error, 2 non-finite loss,
3 unlabeled pool smaller than the per-run pick.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset_io
from .augment import apply
from .config import ExperimentConfig
from .data import DatasetPools, RgbImage, crop_from_canvas
from .encoder import load_pretrained
from .inference import overlay, predict_labels
from .losses import semi_supervised_loss
from .metrics import aggregate_report, confusion_counts
from .ssl import PoolUnderflowError, train_semi_supervised, write_round_log
from .trainer import (NonFiniteLossError, load_checkpoint, save_checkpoint, seed_everything,
                      train_supervised)

log = logging.getLogger("dfutissue")

EXIT_OK, EXIT_ERROR, EXIT_NONFINITE, EXIT_UNDERFLOW = 0, 1, 2, 3
DETERMINISTIC_ENV = "DFUTISSUE_DETERMINISTIC"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _deterministic() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "1") not in ("0", "false", "no")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(getattr(args, "config", None), getattr(args, "set", None) or ())
    if getattr(args, "data", None):
        cfg.dataset["root"] = args.data
    return cfg


def _model_from_checkpoint(ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    if not (ckpt_dir / "best.pt").exists() or not (ckpt_dir / "best.json").exists():
        raise UsageError(f"no checkpoint (best.pt + best.json) in {ckpt_dir}")
    ckpt, meta = load_checkpoint(ckpt_dir)
    if "experiment" not in meta:
        raise UsageError(f"{ckpt_dir}/best.json lacks the experiment config")
    cfg = ExperimentConfig.from_dict(meta["experiment"])
    model = cfg.build_model()
    try:
        model.load_state_dict(ckpt.state_dict)
    except RuntimeError as exc:
        raise UsageError(f"checkpoint/config mismatch: {str(exc).splitlines()[0]}") from exc
    return model, cfg, ckpt


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash, "seed": cfg.seed}


def cmd_prepare(args) -> int:
    manifest = dataset_io.prepare_dataset(args.in_dir, args.out_dir, side=args.side, seed=args.seed,
                                          ratio=tuple(args.ratio), resize=args.resize,
                                          text={"seed": args.seed})
    c = manifest["counts"]
    print(f"prepared {c['train']}/{c['val']}/{c['test']} train/val/test, {c['unlabeled']} unlabeled "
          f"-> {args.out_dir}")
    return EXIT_OK


def _build_model(cfg: ExperimentConfig):
    model = cfg.build_model()
    if cfg.pretrained:
        missing = load_pretrained(model.encoder, cfg.pretrained)
        if missing:
            log.warning("%d encoder keys unmatched when loading %s", len(missing), cfg.pretrained)
    return model


def cmd_train(args) -> int:
    cfg = _load_config(args)
    root = cfg.dataset["root"]
    seed_everything(cfg.seed, _deterministic())
    model = _build_model(cfg)
    train_set = dataset_io.load_split(root, "train")
    val_set = dataset_io.load_split(root, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    ckpt = train_supervised(model, train_set, val_set, cfg.train, cfg.loss, pipeline=cfg.pipeline(),
                            out_dir=out, checkpoint_extra={"experiment": cfg.to_dict(), **_stamp(cfg)})
    print(f"best checkpoint: epoch {ckpt.epoch}, val loss {ckpt.val_loss:.5f}, val IoU {ckpt.val_iou:.4f}")
    return EXIT_OK


def cmd_ssl_train(args) -> int:
    model, ckpt_cfg, _ = _model_from_checkpoint(args.checkpoint)
    cfg = _load_config(args) if args.config or args.set else ckpt_cfg
    if args.data:
        cfg.dataset["root"] = args.data
    if cfg.model_dict() != ckpt_cfg.model_dict():
        raise UsageError("checkpoint/config mismatch: model sections differ")
    root = cfg.dataset["root"]
    seed_everything(cfg.seed, _deterministic())
    pools = DatasetPools(L=dataset_io.load_split(root, "train"), U=dataset_io.load_unlabeled(root))
    val_set = dataset_io.load_split(root, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    stamp = _stamp(cfg)

    def train_fn(m, pairs, val):
        return train_supervised(m, pairs, val, cfg.train, cfg.loss, pipeline=cfg.pipeline(),
                                loss_fn=lambda p, t: semi_supervised_loss(p, t, cfg.loss))

    def on_round(rnd, result):
        write_round_log(result.history, out / "rounds.csv", stamp)

    result = train_semi_supervised(model, pools, val_set, cfg.ssl, cfg.train, cfg.loss,
                                   train_fn=train_fn, on_round=on_round)
    write_round_log(result.history, out / "rounds.csv", stamp)
    (out / "picked_names.json").write_text(json.dumps(
        {**stamp, "R": result.picked_names(), "rounds_completed": result.rounds_completed,
         "stopped_early": result.stopped_early}, indent=2, sort_keys=True) + "\n")
    save_checkpoint(result.checkpoint, out, {"experiment": cfg.to_dict(), **stamp})
    print(f"ssl finished after {result.rounds_completed} rounds; |L|={len(pools.L)} |U|={len(pools.U)}; "
          f"best val loss {result.checkpoint.best_val_loss:.5f}")
    return EXIT_OK


def _image_paths(spec) -> list[Path]:
    p = Path(spec)
    if p.is_dir():
        return sorted(q for q in p.iterdir() if q.suffix.lower() in dataset_io.IMAGE_SUFFIXES)
    if p.exists():
        return [p]
    raise UsageError(f"{spec} does not exist")


def cmd_infer(args) -> int:
    model, cfg, _ = _model_from_checkpoint(args.checkpoint)
    paths = _image_paths(args.images)
    images = [RgbImage(dataset_io.read_rgb(p), p.stem) for p in paths]
    preds = predict_labels(model, images, side=cfg.dataset.get("side", 256))
    out, stamp = Path(args.out), _stamp(cfg)
    for im, lab in zip(images, preds):
        dataset_io.write_png(out / "masks" / f"{im.name}.png", lab, stamp)
        dataset_io.write_png(out / "overlays" / f"{im.name}.png",
                             overlay(np.asarray(im.pixels), lab, opacity=args.opacity), stamp)
    print(f"wrote {len(images)} masks and overlays to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, _ = _model_from_checkpoint(args.checkpoint)
    root = args.data or cfg.dataset["root"]
    pairs = dataset_io.load_split(root, args.split)
    if not pairs:
        raise UsageError(f"split {args.split!r} of {root} has no labeled images")
    side = pairs[0][0].shape[0]
    uncropped = [RgbImage(img.pixels, img.name) for img, _ in pairs]
    preds = predict_labels(model, uncropped, side=side)
    counts = []
    for (img, mask), pred in zip(pairs, preds):
        size = img.original_size or img.shape
        counts.append(confusion_counts(crop_from_canvas(pred, size), crop_from_canvas(mask.labels, size)))
    report = aggregate_report(counts)
    report.meta = {**_stamp(cfg), "split": args.split}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"metrics_{args.split}.json").write_text(report.to_json() + "\n")
    (out / f"metrics_{args.split}.csv").write_text(report.to_csv())
    o = report.overall
    print(f"{args.split}: IoU {o['iou']:.4f} precision {o['precision']:.4f} recall {o['recall']:.4f} "
          f"DSC {o['dsc']:.4f}")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    cfg = _load_config(args)
    pipeline = cfg.pipeline()
    if args.probability is not None:
        pipeline = pipeline.with_probability(args.probability)
    image, mask = dataset_io.load_pair(args.image, args.mask)
    out, stamp = Path(args.out), {**_stamp(cfg), "seed": args.seed}
    for i, child in enumerate(np.random.SeedSequence(args.seed).spawn(args.count)):
        img, m = apply(pipeline, image, mask, np.random.default_rng(child))
        dataset_io.write_png(out / f"aug_{i:03d}_image.png", img.pixels, stamp)
        dataset_io.write_png(out / f"aug_{i:03d}_overlay.png",
                             overlay(np.asarray(img.pixels), np.asarray(m.labels)), stamp)
    print(f"wrote {args.count} augmented samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfutissue", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="experiment JSON")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config field (repeatable)")

    sp = sub.add_parser("prepare", help="pad, index and split a raw dataset")
    sp.add_argument("in_dir")
    sp.add_argument("out_dir")
    sp.add_argument("--side", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ratio", type=int, nargs=3, default=[70, 15, 15])
    sp.add_argument("--resize", action="store_true", help="downscale images larger than the canvas")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="supervised training")
    config_args(sp)
    sp.add_argument("--data", help="prepared dataset root (overrides dataset.root)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ssl-train", help="pseudo-label selection rounds from a supervised checkpoint")
    config_args(sp)
    sp.add_argument("--checkpoint", required=True, help="directory holding best.pt/best.json")
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ssl_train)

    sp = sub.add_parser("infer", help="predict masks and overlays")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", required=True, help="image file or directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--opacity", type=float, default=0.5)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="metrics report on a split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("augment-preview", help="write augmented samples of one pair")
    config_args(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--probability", type=float, help="force every transform to this probability")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_augment_preview)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except PoolUnderflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNDERFLOW
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

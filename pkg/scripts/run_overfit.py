"""Sanity check: the tiny hybrid model should memorise a handful of synthetic images."""
import argparse
import logging
import time

import torch

from dfutissue.decoder import DecoderConfig, HybridSegmenter
from dfutissue.encoder import MitConfig
from dfutissue.metrics import aggregate_report, confusion_counts
from dfutissue.synthetic import synthetic_dataset
from dfutissue.trainer import TrainConfig, pairs_to_batch, seed_everything, train_supervised


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--images", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", default="pscse", choices=("none", "scse", "pscse"))
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    seed_everything(args.seed)
    pairs = synthetic_dataset(args.images, args.seed, (args.size, args.size))
    model = HybridSegmenter(MitConfig.tiny(), DecoderConfig.tiny(args.mode))
    cfg = TrainConfig(epochs=args.epochs, patience=args.epochs, batch_size=args.images,
                      learning_rate=args.lr, augment=False, seed=args.seed)
    start = time.perf_counter()
    ckpt = train_supervised(model, pairs, pairs, cfg)
    model.eval()
    with torch.no_grad():
        x, y = pairs_to_batch(pairs)
        pred = model(x).argmax(1).numpy()
    report = aggregate_report([confusion_counts(a, b) for a, b in zip(pred, y.numpy())])
    print(f"{len(ckpt.history)} epochs in {time.perf_counter() - start:.1f}s; "
          f"train DSC {report.overall['dsc']:.4f}, IoU {report.overall['iou']:.4f}")


if __name__ == "__main__":
    main()

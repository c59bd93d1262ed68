"""Compare decoder gating variants (no SE, scSE, P-scSE) on a synthetic split.

Every variant trains from the same seed and data; the script prints one
line per variant with validation loss and test metrics. At desk scale the
differences are noise-dominated; the point is a runnable harness.
"""
import argparse
import json
import logging

from dfutissue.data import SplitSpec, make_splits
from dfutissue.decoder import DecoderConfig, HybridSegmenter
from dfutissue.encoder import MitConfig
from dfutissue.inference import predict_labels
from dfutissue.metrics import aggregate_report, confusion_counts
from dfutissue.synthetic import synthetic_dataset
from dfutissue.trainer import TrainConfig, seed_everything, train_supervised


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--images", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write the results here")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)

    pairs = synthetic_dataset(args.images, args.seed, (args.size, args.size))
    train, val, test = make_splits(pairs, SplitSpec.from_ratio(len(pairs), seed=args.seed))
    rows = []
    for mode in ("none", "scse", "pscse"):
        seed_everything(args.seed)
        # threshold 16 so the widest tiny stages take the max-out branch
        dec = DecoderConfig(widths=(32, 16, 16), mode=mode, maxout_threshold=16, se_reduction=4)
        model = HybridSegmenter(MitConfig.tiny(), dec)
        cfg = TrainConfig(epochs=args.epochs, patience=args.epochs, batch_size=8, learning_rate=3e-3,
                          seed=args.seed)
        ckpt = train_supervised(model, train, val, cfg)
        model.load_state_dict(ckpt.state_dict)
        preds = predict_labels(model, [img for img, _ in test], side=args.size)
        report = aggregate_report([confusion_counts(pr, m.labels) for pr, (_, m) in zip(preds, test)])
        row = {"mode": mode, "val_loss": ckpt.best_val_loss, **report.overall}
        rows.append(row)
        print(f"{mode:6s} val loss {row['val_loss']:.4f}  test IoU {row['iou']:.4f}  DSC {row['dsc']:.4f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()

"""Supervised training loop, checkpointing and weight-decay/scheduler/optimizer grid search."""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import itertools
import json
import logging
import math
import os
import random
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import augment as aug
from .data import NUM_CLASSES, RgbImage, TissueMask
from .losses import LossConfig, one_hot, supervised_loss
from .metrics import aggregate_report, confusion_counts

log = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])


class EmptyDatasetError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 16
    patience: int = 50
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    scheduler: str = "plateau"        # "plateau" | "poly"
    optimizer: str = "adam"           # "adam" | "sgd"
    seed: int = 0
    augment: bool = True
    oversample_factor: int = 1
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    poly_power: float = 0.9
    momentum: float = 0.9

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience > self.epochs:
            raise ValueError("patience cannot exceed epochs")
        if self.scheduler not in ("plateau", "poly"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def default_grid() -> dict:
    return {
        "weight_decay": [1e-2, 1e-3, 1e-4, 1e-5],
        "scheduler": ["plateau", "poly"],
        "optimizer": ["adam", "sgd"],
    }


@dataclass
class Checkpoint:
    state_dict: dict
    epoch: int
    val_loss: float
    val_iou: float
    best_val_loss: float = math.inf
    config_hash: str = ""
    history: list = field(default_factory=list)

    def sidecar(self) -> dict:
        return {"epoch": self.epoch, "val_loss": self.val_loss, "val_iou": self.val_iou,
                "best_val_loss": self.best_val_loss, "config_hash": self.config_hash}


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _atomic_write(path: Path, writer: Callable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, directory, extra: Optional[dict] = None, stem: str = "best") -> Path:
    """Weights to <stem>.pt, metadata to <stem>.json; each file replaced atomically."""
    directory = Path(directory)
    weights = directory / f"{stem}.pt"
    _atomic_write(weights, lambda fh: torch.save(ckpt.state_dict, fh))
    meta = {**ckpt.sidecar(), **(extra or {})}
    _atomic_write(directory / f"{stem}.json",
                  lambda fh: fh.write(json.dumps(meta, indent=2, sort_keys=True).encode()))
    return weights


def load_checkpoint(directory, stem: str = "best") -> tuple[Checkpoint, dict]:
    directory = Path(directory)
    meta = json.loads((directory / f"{stem}.json").read_text())
    state = torch.load(directory / f"{stem}.pt", map_location="cpu", weights_only=True)
    ckpt = Checkpoint(state, meta["epoch"], meta["val_loss"], meta["val_iou"],
                      meta.get("best_val_loss", math.inf), meta.get("config_hash", ""))
    return ckpt, meta


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    x = np.stack([np.asarray(im, dtype=np.float64) / 255.0 for im in images])
    x = (x - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(x.transpose(0, 3, 1, 2).copy()).to(dtype)


def pairs_to_batch(pairs, dtype=torch.float32):
    x = images_to_tensor([img.pixels for img, _ in pairs], dtype)
    y = torch.from_numpy(np.stack([np.asarray(m.labels, dtype=np.int64) for _, m in pairs]))
    return x, y


def _batches(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def evaluate(model, pairs, loss_fn, num_classes: int = NUM_CLASSES, batch_size: int = 16):
    """Mean loss (weighted by batch size) and micro foreground IoU."""
    model.eval()
    total, counts = 0.0, []
    with torch.no_grad():
        for chunk in _batches(list(pairs), batch_size):
            x, y = pairs_to_batch(chunk, next(model.parameters()).dtype)
            probs = torch.softmax(model(x), dim=1)
            total += float(loss_fn(probs, one_hot(y, num_classes, probs.dtype))) * len(chunk)
            pred = probs.argmax(1).numpy()
            counts += [confusion_counts(p, t, num_classes) for p, t in zip(pred, y.numpy())]
    report = aggregate_report(counts)
    iou = report.overall["iou"]
    return total / len(pairs), (0.0 if math.isnan(iou) else iou)


def make_optimizer(model, cfg: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def make_scheduler(optimizer, cfg: TrainConfig):
    if cfg.scheduler == "plateau":
        return torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience)
    return torch.optim.lr_scheduler.PolynomialLR(optimizer, total_iters=cfg.epochs, power=cfg.poly_power)


EPOCH_LOG_FIELDS = ("epoch", "train_loss", "val_loss", "val_iou", "lr", "checkpoint")


def write_epoch_log(history: list, path, header: Optional[dict] = None) -> None:
    buf = io.StringIO()
    for key, value in sorted((header or {}).items()):
        buf.write(f"# {key}={value}\n")
    w = csv.DictWriter(buf, fieldnames=EPOCH_LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    _atomic_write(Path(path), lambda fh: fh.write(buf.getvalue().encode()))


def train_supervised(
    model: torch.nn.Module,
    train_set: Sequence[tuple[RgbImage, TissueMask]],
    val_set: Sequence[tuple[RgbImage, TissueMask]],
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    loss_fn: Optional[Callable] = None,
    pipeline: Optional[aug.AugmentationPipeline] = None,
    out_dir=None,
    checkpoint_extra: Optional[dict] = None,
    num_classes: int = NUM_CLASSES,
) -> Checkpoint:
    """Train until `patience` epochs pass without a lower val loss or a higher val IoU.

    The best checkpoint is replaced whenever either criterion improves. If
    `out_dir` is given it is also written there (atomically) together with
    an epoch CSV log.
    """
    if not train_set or not val_set:
        raise EmptyDatasetError("training and validation sets must be non-empty")
    if loss_fn is None:
        loss_fn = lambda p, t: supervised_loss(p, t, loss_cfg)  # noqa: E731
    if cfg.augment and pipeline is None:
        pipeline = aug.build_default_pipeline()
    train_set = list(train_set)
    if cfg.oversample_factor > 1 and pipeline is not None:
        train_set = aug.minority_oversample(train_set, pipeline, cfg.oversample_factor, seed=cfg.seed)

    dtype = next(model.parameters()).dtype
    optimizer = make_optimizer(model, cfg)
    scheduler = make_scheduler(optimizer, cfg)
    shuffler = torch.Generator().manual_seed(cfg.seed)
    extra = {"config": cfg.to_dict(), **(checkpoint_extra or {})}
    chash = config_hash(extra)

    best: Optional[Checkpoint] = None
    best_loss, best_iou, stale = math.inf, -math.inf, 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = torch.randperm(len(train_set), generator=shuffler).tolist()
        running, seen = 0.0, 0
        for b, idx in enumerate(_batches(order, cfg.batch_size)):
            chunk = [train_set[i] for i in idx]
            if pipeline is not None and cfg.augment:
                chunk = [aug.apply(pipeline, img, m, rng) for img, m in chunk]
            x, y = pairs_to_batch(chunk, dtype)
            probs = torch.softmax(model(x), dim=1)
            loss = loss_fn(probs, one_hot(y, num_classes, dtype))
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite training loss {loss.item()} at epoch {epoch}, batch {b} "
                    f"(images {[img.name for img, _ in chunk]})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += loss.item() * len(idx)
            seen += len(idx)

        val_loss, val_iou = evaluate(model, val_set, loss_fn, num_classes, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}")
        if cfg.scheduler == "plateau":
            scheduler.step(val_loss)
        else:
            scheduler.step()

        improved = val_loss < best_loss or val_iou > best_iou
        best_loss, best_iou = min(best_loss, val_loss), max(best_iou, val_iou)
        if improved:
            stale = 0
            best = Checkpoint(copy.deepcopy(model.state_dict()), epoch, val_loss, val_iou,
                              best_loss, chash)
            if out_dir is not None:
                save_checkpoint(best, out_dir, extra)
        else:
            stale += 1
        history.append({"epoch": epoch, "train_loss": running / seen, "val_loss": val_loss,
                        "val_iou": val_iou, "lr": optimizer.param_groups[0]["lr"],
                        "checkpoint": int(improved)})
        log.info("epoch %d train %.5f val %.5f iou %.4f%s", epoch, running / seen, val_loss,
                 val_iou, " *" if improved else "")
        if out_dir is not None:
            write_epoch_log(history, Path(out_dir) / "epochs.csv", {"config_hash": chash, "seed": cfg.seed})
        if stale >= cfg.patience:
            break

    best.best_val_loss = best_loss
    best.history = history
    return best


def expand_grid(grid: dict, base: TrainConfig = TrainConfig()) -> list[TrainConfig]:
    if not grid:
        raise ValueError("grid must contain at least one parameter")
    keys = sorted(grid)
    return [dataclasses.replace(base, **dict(zip(keys, values)))
            for values in itertools.product(*(grid[k] for k in keys))]


def hyperparameter_search(
    grid: dict,
    train_set,
    val_set,
    model_factory: Optional[Callable[[], torch.nn.Module]] = None,
    base: TrainConfig = TrainConfig(),
    run_fn: Optional[Callable[[TrainConfig], float]] = None,
    out_path=None,
    **train_kwargs,
) -> tuple[TrainConfig, list[dict]]:
    """Exhaustive search; returns the config with the lowest best-val-loss and the full table.

    `run_fn(cfg) -> best val loss` replaces the default (fresh model from
    `model_factory`, then `train_supervised`).
    """
    configs = expand_grid(grid, base)
    if run_fn is None:
        if model_factory is None:
            raise ValueError("model_factory is required without run_fn")

        def run_fn(cfg):
            seed_everything(cfg.seed)
            return train_supervised(model_factory(), train_set, val_set, cfg, **train_kwargs).best_val_loss

    results = []
    for cfg in configs:
        score = float(run_fn(cfg))
        results.append({**{k: getattr(cfg, k) for k in sorted(grid)}, "best_val_loss": score})
        log.info("grid %s -> %.6f", results[-1], score)
    best_i = min(range(len(configs)), key=lambda i: results[i]["best_val_loss"])
    if out_path is not None:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(results[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(results)
        _atomic_write(Path(out_path), lambda fh: fh.write(buf.getvalue().encode()))
    return configs[best_i], results

"""Pseudo-label self-training: rounds of K candidate batches, keep the best one.

Each round pseudo-labels the unlabeled pool with the current model, then
for each of K runs draws n images, fine-tunes from the round's starting
weights on labeled + drawn pseudo-labeled images and records the best
validation loss. The batch from the run with the lowest loss moves into
the labeled pool for good. The loop stops at the first round whose
minimum does not beat the best loss seen so far, or after E rounds.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import DatasetPools, RgbImage, TissueMask
from .losses import LossConfig, semi_supervised_loss
from .trainer import Checkpoint, TrainConfig, _atomic_write, _batches, images_to_tensor, train_supervised

log = logging.getLogger(__name__)


class PoolUnderflowError(ValueError):
    pass


@dataclass(frozen=True)
class SslConfig:
    rounds: int = 10     # E
    runs: int = 5        # K
    pick: int = 50       # n
    seed: int = 0

    def __post_init__(self):
        if self.runs < 1 or self.rounds < 1 or self.pick < 1:
            raise ValueError("rounds, runs and pick must all be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SslConfig":
        return cls(**d)


@dataclass
class SslResult:
    checkpoint: Checkpoint
    pools: DatasetPools
    history: list = field(default_factory=list)   # one row per inner run
    rounds_completed: int = 0
    stopped_early: bool = False

    def picked_names(self) -> list[list[str]]:
        return [row["names"] for row in self.history]


def generate_pseudo_labels(model, images: Sequence[RgbImage], batch_size: int = 8) -> dict[str, TissueMask]:
    """Per-pixel argmax of the model's class distribution for every image."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = {}
    with torch.no_grad():
        for chunk in _batches(list(images), batch_size):
            probs = torch.softmax(model(images_to_tensor([im.pixels for im in chunk], dtype)), dim=1)
            for im, lab in zip(chunk, probs.argmax(1).numpy()):
                out[im.name] = TissueMask(lab.astype(np.uint8), probs.shape[1])
    return out


def write_round_log(history: list, path, header: Optional[dict] = None) -> None:
    buf = io.StringIO()
    for key, value in sorted((header or {}).items()):
        buf.write(f"# {key}={value}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "run", "train_size", "best_val_loss", "selected", "names"])
    for row in history:
        w.writerow([row["round"], row["run"], row["train_size"], repr(row["best_val_loss"]),
                    int(row["selected"]), json.dumps(row["names"])])
    _atomic_write(Path(path), lambda fh: fh.write(buf.getvalue().encode()))


def train_semi_supervised(
    model: torch.nn.Module,
    pools: DatasetPools,
    val_set,
    ssl_cfg: SslConfig = SslConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    train_fn: Optional[Callable] = None,
    predict_fn: Optional[Callable] = None,
    on_round: Optional[Callable] = None,
) -> SslResult:
    """Run the selection loop in place on `pools` starting from `model`'s weights.

    `train_fn(model, train_pairs, val_set) -> Checkpoint` and
    `predict_fn(model, images) -> {name: TissueMask}` can be swapped for
    stubs. Every inner run starts from the same weights: the incoming
    model in round 1, afterwards the previous round's winning run.
    Returns the checkpoint of the round that set the best loss.
    """
    if train_fn is None:
        def train_fn(m, pairs, val):
            return train_supervised(m, pairs, val, train_cfg,
                                    loss_fn=lambda p, t: semi_supervised_loss(p, t, loss_cfg))
    predict_fn = predict_fn or generate_pseudo_labels
    n = ssl_cfg.pick
    if len(pools.U) < n:
        raise PoolUnderflowError(f"unlabeled pool has {len(pools.U)} images, need {n}")

    rng = np.random.default_rng(ssl_cfg.seed)
    start_state = copy.deepcopy(model.state_dict())
    best: Optional[Checkpoint] = None
    history = []
    result = SslResult(None, pools, history)

    for rnd in range(1, ssl_cfg.rounds + 1):
        if len(pools.U) < n:
            raise PoolUnderflowError(f"round {rnd}: unlabeled pool has {len(pools.U)} images, need {n}")
        model.load_state_dict(start_state)
        pools.T1 = dict(predict_fn(model, pools.U))
        by_name = {im.name: im for im in pools.U}
        u_names = [im.name for im in pools.U]
        round_best: Optional[Checkpoint] = None
        for run in range(1, ssl_cfg.runs + 1):
            names = [u_names[i] for i in rng.choice(len(u_names), size=n, replace=False)]
            pools.T2 = [(by_name[nm], pools.T1[nm]) for nm in names]
            pools.R.append(names)
            pools.check_disjoint()
            model.load_state_dict(start_state)
            train_pairs = list(pools.L) + list(pools.T2)
            ckpt = train_fn(model, train_pairs, val_set)
            pools.VL.append(float(ckpt.best_val_loss))
            if round_best is None or pools.VL[-1] < min(pools.VL[:-1]):
                round_best = ckpt
            history.append({"round": rnd, "run": run, "train_size": len(train_pairs),
                            "best_val_loss": pools.VL[-1], "names": names, "selected": False})
            log.info("round %d run %d: %d images, best val loss %.6f", rnd, run, len(train_pairs), pools.VL[-1])
            pools.T2 = []

        m_idx = int(np.argmin(pools.VL))
        m_vl = pools.VL[m_idx]
        history[-ssl_cfg.runs + m_idx]["selected"] = True
        chosen = set(pools.R[m_idx])
        moved = [(im, pools.T1[im.name]) for im in pools.U if im.name in chosen]
        pools.U = [im for im in pools.U if im.name not in chosen]
        pools.L = list(pools.L) + moved
        pools.check_disjoint()
        start_state = round_best.state_dict
        result.rounds_completed = rnd
        if on_round is not None:
            on_round(rnd, result)

        if pools.TV > m_vl:
            pools.TV = m_vl
            best = round_best
        else:
            result.stopped_early = True
            break
        pools.T1, pools.VL, pools.R = {}, [], []

    # a NaN minimum in round 1 never beats TV; fall back to that round's winner
    result.checkpoint = best or round_best
    model.load_state_dict(result.checkpoint.state_dict)
    return result

"""Dice, focal and dynamic cross-entropy losses on per-pixel class distributions.

Every function takes softmax probabilities [B, C, H, W] and one-hot (or
soft) targets of the same shape.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0
    log_clamp: float = 1e-7
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    dice_include_background: bool = True
    detach_dynamic_weight: bool = False

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must lie in [0, 1]")
        if self.dice_smooth <= 0 or self.log_clamp <= 0:
            raise ValueError("dice_smooth and log_clamp must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def _check(probs, targets):
    if probs.shape != targets.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    if probs.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] tensors, got {probs.ndim} dims")


def one_hot(labels: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """[B, H, W] integer labels -> [B, C, H, W] one-hot."""
    return F.one_hot(labels.long(), num_classes).permute(0, 3, 1, 2).to(dtype)


def _clamped_log(x, eps):
    return torch.log(x.clamp(min=eps, max=1.0))


def dice_loss(probs, targets, smooth: float = 1.0, include_background: bool = True):
    """1 - soft DSC, computed per sample and class then averaged."""
    _check(probs, targets)
    if not include_background:
        probs, targets = probs[:, 1:], targets[:, 1:]
    dims = (2, 3)
    inter = (probs * targets).sum(dims)
    denom = probs.sum(dims) + targets.sum(dims)
    dsc = (2.0 * inter + smooth) / (denom + smooth)
    return 1.0 - dsc.mean()


def focal_loss(probs, targets, gamma: float = 2.0, alpha: float = 0.25, eps: float = 1e-7):
    _check(probs, targets)
    p_t = (probs * targets).sum(1)
    return (-alpha * (1.0 - p_t) ** gamma * _clamped_log(p_t, eps)).mean()


def cross_entropy(probs, targets, eps: float = 1e-7):
    _check(probs, targets)
    return -(targets * _clamped_log(probs, eps)).sum(1).mean()


def dynamic_weights(probs):
    """Per-pixel confidence: the largest class probability, in [1/C, 1]."""
    return probs.max(dim=1).values


def dynamic_cross_entropy(probs, pseudo_targets, eps: float = 1e-7, detach_weight: bool = False):
    """Confidence-weighted mix of forward and reverse cross-entropy.

    Confident pixels lean on the usual CE against the pseudo-label; unsure
    ones on the reverse term, which penalises spreading mass where the
    pseudo-label has none. Logs are clamped to [eps, 1].
    """
    _check(probs, pseudo_targets)
    w = dynamic_weights(probs)
    if detach_weight:
        w = w.detach()
    forward = (pseudo_targets * _clamped_log(probs, eps)).sum(1)
    reverse = (probs * _clamped_log(pseudo_targets, eps)).sum(1)
    return -(w * forward + (1.0 - w) * reverse).mean()


def supervised_loss(probs, targets, cfg: LossConfig = LossConfig()):
    return (dice_loss(probs, targets, cfg.dice_smooth, cfg.dice_include_background)
            + focal_loss(probs, targets, cfg.focal_gamma, cfg.focal_alpha, cfg.log_clamp))


def semi_supervised_loss(probs, pseudo_targets, cfg: LossConfig = LossConfig()):
    dl = dice_loss(probs, pseudo_targets, cfg.dice_smooth, cfg.dice_include_background)
    fl = focal_loss(probs, pseudo_targets, cfg.focal_gamma, cfg.focal_alpha, cfg.log_clamp)
    dce = dynamic_cross_entropy(probs, pseudo_targets, cfg.log_clamp, cfg.detach_dynamic_weight)
    return cfg.lambda1 * dl + cfg.lambda2 * fl + cfg.lambda3 * dce

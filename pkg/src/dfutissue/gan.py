"""Losses and discriminator for the adversarial semi-supervised baseline."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

EPS = 1e-7


@dataclass(frozen=True)
class GanLossWeights:
    lambda_adv_supervised: float = 0.01
    lambda_adv_semi: float = 0.1
    t_semi: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.t_semi < 1.0:
            raise ValueError("t_semi must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GanLossWeights":
        return cls(**d)


def adversarial_loss(conf, eps: float = EPS):
    """-sum over pixels of log D(.), averaged over the batch."""
    per_pixel = -torch.log(conf.clamp(min=eps, max=1.0))
    return per_pixel.flatten(1).sum(1).mean()


def _bce(p, target, eps):
    p = p.clamp(min=eps, max=1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def discriminator_loss(real_conf, fake_conf, eps: float = EPS):
    """BCE of real pairs against ones plus fake pairs against zeros (pixel means)."""
    return _bce(real_conf, torch.ones_like(real_conf), eps) + _bce(fake_conf, torch.zeros_like(fake_conf), eps)


def gan_supervised_total(ce_loss, adv_loss, lambda_adv: float):
    return ce_loss + lambda_adv * adv_loss


def masked_semi_ce(probs, pseudo_targets, conf, t_semi: float, eps: float = EPS):
    """Cross-entropy against pseudo-labels, summed over pixels the discriminator trusts.

    `pseudo_targets` is one-hot [B, C, H, W]; `conf` is [B, 1, H, W].
    """
    if probs.shape != pseudo_targets.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(pseudo_targets.shape)}")
    keep = (conf > t_semi).to(probs.dtype)
    ce = -(pseudo_targets * torch.log(probs.clamp(min=eps, max=1.0))).sum(1, keepdim=True)
    return (keep * ce).sum()


def gan_semi_total(masked_ce, adv_loss, lambda_adv: float):
    return masked_ce + lambda_adv * adv_loss


class Discriminator(nn.Module):
    """Five strided 4x4 convolutions; input is image and class map stacked on channels.

    Returns a per-pixel confidence map in (0, 1) at the input resolution.
    """

    def __init__(self, in_channels: int = 3 + 4, width: int = 64):
        super().__init__()
        chans = [in_channels, width, width * 2, width * 4, width * 8]
        layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        layers.append(nn.Conv2d(chans[-1], 1, 4, stride=2, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, image, class_map):
        logits = self.net(torch.cat([image, class_map], dim=1))
        logits = F.interpolate(logits, size=image.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(logits)

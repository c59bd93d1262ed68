"""CNN up-sampling decoder with squeeze-and-excitation gating, and the full hybrid model."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import GeometryError, MitConfig, MitEncoder


class SeMode(str, enum.Enum):
    NONE = "none"
    SCSE = "scse"
    PSCSE = "pscse"


class ChannelSE(nn.Module):
    """cSE: global average pool -> bottleneck -> sigmoid gate per channel."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def gate(self, x):
        return torch.sigmoid(self.fc2(F.relu(self.fc1(F.adaptive_avg_pool2d(x, 1)))))

    def forward(self, x):
        return x * self.gate(x)


class SpatialSE(nn.Module):
    """sSE: 1x1 convolution over channels -> sigmoid gate per pixel."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 1)

    def gate(self, x):
        return torch.sigmoid(self.conv(x))

    def forward(self, x):
        return x * self.gate(x)


class PScSE(nn.Module):
    """Parallel scSE: cse+sse, plus max(cse, sse) when there are enough channels.

    With `maxout=False` (or fewer channels than `threshold`) this is plain scSE.
    """

    def __init__(self, channels: int, reduction: int = 16, threshold: float = 32, maxout: bool = True):
        super().__init__()
        self.cse = ChannelSE(channels, reduction)
        self.sse = SpatialSE(channels)
        self.use_maxout = maxout and channels >= threshold

    def scse(self, x):
        return self.cse(x) + self.sse(x)

    def forward(self, x):
        c, s = self.cse(x), self.sse(x)
        if not self.use_maxout:
            return c + s
        return (c + s) + torch.max(c, s)


def make_se(mode: SeMode, channels: int, reduction: int = 16, threshold: float = 32) -> nn.Module:
    mode = SeMode(mode)
    if mode is SeMode.NONE:
        return nn.Identity()
    return PScSE(channels, reduction, threshold, maxout=mode is SeMode.PSCSE)


class ConvReluBn(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, conventional_order: bool = False):
        conv = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        if conventional_order:
            super().__init__(conv, nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True))
        else:
            super().__init__(conv, nn.ReLU(inplace=True), nn.BatchNorm2d(out_ch))


class DecoderStage(nn.Module):
    """upsample x2 -> concat skip -> SE gating -> 3x3 conv block."""

    def __init__(self, below_ch, skip_ch, out_ch, mode=SeMode.PSCSE, threshold=32,
                 reduction=16, conventional_order=False):
        super().__init__()
        self.attention = make_se(mode, below_ch + skip_ch, reduction, threshold)
        self.conv = ConvReluBn(below_ch + skip_ch, out_ch, conventional_order)

    def forward(self, x_below, skip):
        h, w = x_below.shape[-2:]
        if skip.shape[-2:] != (2 * h, 2 * w):
            raise GeometryError(
                f"skip spatial size {tuple(skip.shape[-2:])} must be twice {(h, w)}")
        x = F.interpolate(x_below, scale_factor=2, mode="bilinear", align_corners=False)
        x = torch.cat([x, skip], dim=1)
        return self.conv(self.attention(x))


@dataclass(frozen=True)
class DecoderConfig:
    widths: tuple = (256, 128, 64)
    mode: str = SeMode.PSCSE.value
    maxout_threshold: float = 32
    se_reduction: int = 16
    num_classes: int = 4
    conventional_order: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "mode", SeMode(self.mode).value)
        if self.maxout_threshold < 0:
            raise ValueError("maxout threshold must be >= 0")
        if len(self.widths) != 3:
            raise ValueError("decoder needs three stage widths")

    @classmethod
    def tiny(cls, mode=SeMode.PSCSE) -> "DecoderConfig":
        return cls(widths=(32, 16, 16), mode=SeMode(mode).value)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        if math.isinf(self.maxout_threshold):
            d["maxout_threshold"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        d = dict(d)
        if d.get("maxout_threshold") == "inf":
            d["maxout_threshold"] = math.inf
        return cls(**d)


class HybridSegmenter(nn.Module):
    """Transformer encoder, three skip stages bottom-up, then a x4 upsampling head."""

    def __init__(self, encoder_cfg: MitConfig = MitConfig(), decoder_cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.encoder_cfg, self.decoder_cfg = encoder_cfg, decoder_cfg
        self.encoder = MitEncoder(encoder_cfg)
        dims = encoder_cfg.embed_dims
        w = decoder_cfg.widths
        kw = dict(mode=decoder_cfg.mode, threshold=decoder_cfg.maxout_threshold,
                  reduction=decoder_cfg.se_reduction, conventional_order=decoder_cfg.conventional_order)
        self.stages = nn.ModuleList([
            DecoderStage(dims[3], dims[2], w[0], **kw),
            DecoderStage(w[0], dims[1], w[1], **kw),
            DecoderStage(w[1], dims[0], w[2], **kw),
        ])
        self.head_up = encoder_cfg.patch_strides[0]
        self.head = nn.Sequential(ConvReluBn(w[2], w[2], decoder_cfg.conventional_order),
                                  nn.Conv2d(w[2], decoder_cfg.num_classes, 1))

    def forward(self, image):
        f1, f2, f3, f4 = self.encoder(image)
        x = self.stages[0](f4, f3)
        x = self.stages[1](x, f2)
        x = self.stages[2](x, f1)
        x = F.interpolate(x, scale_factor=self.head_up, mode="bilinear", align_corners=False)
        return self.head(x)


def hybrid_forward(image, encoder_cfg: MitConfig = MitConfig(), decoder_cfg: DecoderConfig = DecoderConfig(),
                   model: Optional[HybridSegmenter] = None):
    model = model or HybridSegmenter(encoder_cfg, decoder_cfg).to(image.dtype)
    return model(image)

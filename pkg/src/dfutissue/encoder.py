"""Hierarchical Mix-Transformer encoder.

Each of the four stages is an overlapping strided convolution that turns
the feature map into tokens, followed by transformer blocks made of
reduced-sequence self-attention and a Mix-FFN whose depthwise 3x3
convolution supplies the positional signal (no positional table).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class MitConfig:
    embed_dims: tuple = (64, 128, 320, 512)
    depths: tuple = (3, 4, 18, 3)
    num_heads: tuple = (1, 2, 5, 8)
    reduction_ratios: tuple = (8, 4, 2, 1)
    patch_kernels: tuple = (7, 3, 3, 3)
    patch_strides: tuple = (4, 2, 2, 2)
    patch_paddings: tuple = (3, 1, 1, 1)
    mlp_ratio: int = 4
    in_channels: int = 3
    drop_path_rate: float = 0.1
    qkv_bias: bool = True

    def __post_init__(self):
        for name in ("embed_dims", "depths", "num_heads", "reduction_ratios",
                     "patch_kernels", "patch_strides", "patch_paddings"):
            value = tuple(getattr(self, name))
            if len(value) != 4:
                raise ValueError(f"{name} needs one entry per stage, got {value}")
            object.__setattr__(self, name, value)
        for i in range(4):
            if self.patch_strides[i] >= self.patch_kernels[i]:
                raise GeometryError(
                    f"stage {i + 1}: stride {self.patch_strides[i]} must be smaller than "
                    f"kernel {self.patch_kernels[i]} for overlapping patches"
                )
            if self.embed_dims[i] % self.num_heads[i]:
                raise ValueError(f"stage {i + 1}: dim {self.embed_dims[i]} not divisible by {self.num_heads[i]} heads")
            if self.reduction_ratios[i] < 1:
                raise ValueError("reduction ratios must be >= 1")

    @classmethod
    def b3(cls) -> "MitConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "MitConfig":
        return cls(embed_dims=(8, 16, 24, 32), depths=(1, 1, 1, 1), num_heads=(1, 2, 2, 4),
                   drop_path_rate=0.0)

    @property
    def total_stride(self) -> int:
        return math.prod(self.patch_strides)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "MitConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int):
        super().__init__()
        if stride >= kernel:
            raise GeometryError(f"stride {stride} must be smaller than kernel {kernel}")
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.proj = nn.Conv2d(in_ch, out_ch, kernel, stride, padding)
        self.norm = nn.LayerNorm(out_ch)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        oh, ow = self.output_size(*x.shape[-2:])
        if oh < 1 or ow < 1:
            raise GeometryError(f"input {tuple(x.shape[-2:])} too small for kernel {self.kernel}")
        x = self.proj(x)
        b, c, h, w = x.shape
        return self.norm(x.flatten(2).transpose(1, 2)), h, w


def overlap_patch_embed(x, kernel: int, stride: int, pad: int, out_channels: int):
    """Functional form with freshly initialised weights; returns (tokens, H', W')."""
    embed = OverlapPatchEmbed(x.shape[1], out_channels, kernel, stride, pad).to(x.dtype)
    return embed(x)


class EfficientSelfAttention(nn.Module):
    """Multi-head attention whose keys/values are shortened from N to ceil(N/R).

    Groups of R consecutive tokens are concatenated into one vector of size
    C*R and projected back to C. A sequence whose length is not a multiple
    of R is zero-padded; every reduced position still covers at least one
    real token, so nothing needs masking.
    """

    def __init__(self, dim: int, num_heads: int = 1, reduction: int = 1, qkv_bias: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"embedding dim {dim} not divisible by {num_heads} heads")
        if reduction < 1:
            raise ValueError("reduction ratio must be >= 1")
        self.dim, self.num_heads, self.reduction = dim, num_heads, reduction
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim, bias=qkv_bias)
        self.kv = nn.Linear(dim, 2 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        if reduction > 1:
            self.sr = nn.Linear(dim * reduction, dim)
            self.sr_norm = nn.LayerNorm(dim)
        self.last_attention: Optional[torch.Tensor] = None
        self.keep_attention = False

    def reduce(self, x):
        if self.reduction == 1:
            return x
        b, n, c = x.shape
        r = self.reduction
        pad = (-n) % r
        if pad:
            x = F.pad(x, (0, 0, 0, pad))
        x = x.reshape(b, (n + pad) // r, c * r)
        return self.sr_norm(self.sr(x))

    def forward(self, x, h: Optional[int] = None, w: Optional[int] = None):
        b, n, c = x.shape
        if c != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {c}")
        hd = c // self.num_heads
        q = self.q(x).reshape(b, n, self.num_heads, hd).transpose(1, 2)
        kv = self.kv(self.reduce(x))
        m = kv.shape[1]
        k, v = kv.reshape(b, m, 2, self.num_heads, hd).permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        if self.keep_attention:
            self.last_attention = attn
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


def efficient_self_attention(tokens, reduction: int, heads: int, return_attention: bool = False):
    att = EfficientSelfAttention(tokens.shape[-1], heads, reduction).to(tokens.dtype)
    att.keep_attention = return_attention
    out = att(tokens)
    return (out, att.last_attention) if return_attention else out


class MixFFN(nn.Module):
    """x + fc2(GELU(dwconv3x3(fc1(norm(x))))) over the H'xW' token grid."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, 1, 1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h: int, w: int):
        b, n, c = x.shape
        if n != h * w:
            raise ValueError(f"token count {n} does not match grid {h}x{w}")
        y = self.fc1(self.norm(x))
        y = y.transpose(1, 2).reshape(b, -1, h, w)
        y = self.dwconv(y).flatten(2).transpose(1, 2)
        return x + self.fc2(F.gelu(y))


def mix_ffn(tokens, h: int, w: int, mlp_ratio: int = 4):
    ffn = MixFFN(tokens.shape[-1], tokens.shape[-1] * mlp_ratio).to(tokens.dtype)
    return ffn(tokens, h, w)


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        noise = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * noise / keep


class MitBlock(nn.Module):
    def __init__(self, dim, heads, reduction, mlp_ratio=4, drop_path=0.0, qkv_bias=True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, heads, reduction, qkv_bias)
        self.ffn = MixFFN(dim, dim * mlp_ratio)
        self.drop_path = DropPath(drop_path)

    def forward(self, x, h, w):
        x = x + self.drop_path(self.attn(self.norm1(x), h, w))
        # MixFFN carries its own residual; route only the increment through drop-path
        return x + self.drop_path(self.ffn(x, h, w) - x)


class MitEncoder(nn.Module):
    def __init__(self, config: MitConfig = MitConfig()):
        super().__init__()
        self.config = config
        dpr = torch.linspace(0, config.drop_path_rate, sum(config.depths)).tolist()
        self.patch_embeds = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        in_ch, cursor = config.in_channels, 0
        for i in range(4):
            dim = config.embed_dims[i]
            self.patch_embeds.append(OverlapPatchEmbed(
                in_ch, dim, config.patch_kernels[i], config.patch_strides[i], config.patch_paddings[i]))
            self.stages.append(nn.ModuleList([
                MitBlock(dim, config.num_heads[i], config.reduction_ratios[i], config.mlp_ratio,
                         dpr[cursor + j], config.qkv_bias)
                for j in range(config.depths[i])
            ]))
            self.norms.append(nn.LayerNorm(dim))
            in_ch, cursor = dim, cursor + config.depths[i]
        self.apply(_init_weights)

    def forward(self, x) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if h % self.config.total_stride or w % self.config.total_stride:
            raise GeometryError(f"input size {h}x{w} must be divisible by {self.config.total_stride}")
        pyramid = []
        for embed, blocks, norm in zip(self.patch_embeds, self.stages, self.norms):
            tokens, gh, gw = embed(x)
            for blk in blocks:
                tokens = blk(tokens, gh, gw)
            tokens = norm(tokens)
            x = tokens.transpose(1, 2).reshape(tokens.shape[0], -1, gh, gw)
            pyramid.append(x)
        return pyramid


def encoder_forward(image, config: MitConfig = MitConfig(), encoder: Optional[MitEncoder] = None):
    """Four feature maps at 1/4, 1/8, 1/16 and 1/32 of the input resolution."""
    encoder = encoder or MitEncoder(config).to(image.dtype)
    return encoder(image)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def load_pretrained(encoder: MitEncoder, path: str, strict: bool = False) -> list[str]:
    """Load externally obtained encoder weights; returns the keys left unmatched."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    if "state_dict" in state:
        state = state["state_dict"]
    result = encoder.load_state_dict(state, strict=strict)
    return list(result.missing_keys) + list(result.unexpected_keys)

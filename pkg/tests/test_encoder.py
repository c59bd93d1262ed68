import pytest
import torch
from torch import nn

from dfutissue.encoder import (EfficientSelfAttention, GeometryError, MitConfig, MitEncoder, MixFFN,
                               OverlapPatchEmbed, efficient_self_attention, encoder_forward, mix_ffn,
                               overlap_patch_embed)

from .conftest import central_difference, relative_error


def test_patch_embed_stage1_shape():
    tokens, h, w = overlap_patch_embed(torch.randn(1, 3, 256, 256), 7, 4, 3, 64)
    assert (h, w) == (64, 64)
    assert tokens.shape == (1, 4096, 64)


def test_patch_embed_small_input():
    tokens, h, w = overlap_patch_embed(torch.randn(2, 3, 4, 4), 3, 2, 1, 8)
    assert (h, w) == (2, 2)
    assert tokens.shape == (2, 4, 8)


def test_patch_embed_rejects_non_overlapping_stride():
    with pytest.raises(GeometryError):
        OverlapPatchEmbed(3, 8, 3, 3, 1)


def test_attention_reduces_keys_to_n_over_r():
    torch.manual_seed(0)
    out, attn = efficient_self_attention(torch.randn(1, 4096, 16), reduction=8, heads=2, return_attention=True)
    assert out.shape == (1, 4096, 16)
    assert attn.shape == (1, 2, 4096, 512)
    assert torch.allclose(attn.sum(-1), torch.ones(()), atol=1e-6)


def test_attention_r1_is_full_attention():
    _, attn = efficient_self_attention(torch.randn(2, 30, 8), reduction=1, heads=1, return_attention=True)
    assert attn.shape == (2, 1, 30, 30)


def test_attention_pads_ragged_sequences():
    att = EfficientSelfAttention(8, 2, 4)
    att.keep_attention = True
    out = att(torch.randn(1, 10, 8))
    assert out.shape == (1, 10, 8)
    assert att.last_attention.shape[-1] == 3
    assert torch.allclose(att.last_attention.sum(-1), torch.ones(()), atol=1e-6)


def test_attention_head_divisibility():
    with pytest.raises(ValueError):
        EfficientSelfAttention(10, 3)


def test_attention_matches_explicit_formula():
    torch.manual_seed(1)
    att = EfficientSelfAttention(6, 2, 2).double()
    x = torch.randn(1, 8, 6, dtype=torch.float64)
    # independent computation: reshape groups of 2 tokens, project, normalise
    red = att.sr_norm(att.sr(x.reshape(1, 4, 12)))
    q = att.q(x).reshape(1, 8, 2, 3).transpose(1, 2)
    k, v = att.kv(red).reshape(1, 4, 2, 2, 3).permute(2, 0, 3, 1, 4)
    a = torch.softmax(q @ k.transpose(-1, -2) / 3 ** 0.5, -1)
    ref = att.proj((a @ v).transpose(1, 2).reshape(1, 8, 6))
    assert torch.allclose(att(x), ref, atol=1e-12)


def test_attention_parameter_gradients_match_finite_differences():
    torch.manual_seed(2)
    att = EfficientSelfAttention(4, 2, 2).double()
    x = torch.randn(1, 2, 4, dtype=torch.float64)
    for p in att.parameters():
        def f(val, p=p):
            with torch.no_grad():
                saved = p.detach().clone()
                p.copy_(val)
            out = (att(x) ** 2).sum()
            with torch.no_grad():
                p.copy_(saved)
            return out
        att.zero_grad()
        (att(x) ** 2).sum().backward()
        numeric = central_difference(f, p.detach())
        assert relative_error(p.grad, numeric) < 1e-6


def test_mix_ffn_shape_and_grid_check():
    x = torch.randn(2, 12, 8)
    assert mix_ffn(x, 3, 4).shape == x.shape
    with pytest.raises(ValueError):
        mix_ffn(x, 3, 3)


def test_mix_ffn_zero_weights_is_identity():
    ffn = MixFFN(8, 32)
    for p in ffn.parameters():
        nn.init.zeros_(p)
    x = torch.randn(1, 20, 8)
    assert torch.equal(ffn(x, 4, 5), x)


def test_mix_ffn_position_comes_from_zero_padding():
    # rows periodic in the row index: rolling by one row only changes
    # outputs whose 3x3 neighbourhood crosses the grid border
    torch.manual_seed(3)
    ffn = MixFFN(4, 8).double()
    x = torch.randn(1, 6, 6, 4, dtype=torch.float64)
    rolled = torch.roll(x, 1, dims=1)
    y = ffn(x.reshape(1, 36, 4), 6, 6).reshape(1, 6, 6, 4)
    y_rolled = ffn(rolled.reshape(1, 36, 4), 6, 6).reshape(1, 6, 6, 4)
    expected = torch.roll(y, 1, dims=1)
    assert torch.allclose(y_rolled[:, 2:5], expected[:, 2:5], atol=1e-12)
    for r in (0, 1, 5):
        assert not torch.allclose(y_rolled[:, r], expected[:, r])


def test_encoder_has_no_positional_parameters():
    enc = MitEncoder(MitConfig.tiny())
    assert not any("pos" in name for name, _ in enc.named_parameters())
    # every stage must also accept a second resolution without any resizing
    assert [f.shape[-1] for f in enc(torch.randn(1, 3, 64, 96))] == [24, 12, 6, 3]


def test_tiny_encoder_pyramid_and_batch():
    cfg = MitConfig.tiny()
    feats = encoder_forward(torch.randn(3, 3, 64, 64), cfg)
    assert [tuple(f.shape) for f in feats] == [(3, 8, 16, 16), (3, 16, 8, 8), (3, 24, 4, 4), (3, 32, 2, 2)]


def test_encoder_rejects_indivisible_input():
    with pytest.raises(GeometryError):
        MitEncoder(MitConfig.tiny())(torch.randn(1, 3, 48, 40))


def test_encoder_is_deterministic():
    torch.manual_seed(4)
    enc = MitEncoder(MitConfig.tiny()).eval()
    x = torch.randn(2, 3, 64, 64)
    a, b = enc(x), enc(x)
    assert all(torch.equal(p, q) for p, q in zip(a, b))


@pytest.mark.slow
def test_b3_pyramid():
    cfg = MitConfig.b3()
    with torch.no_grad():
        feats = encoder_forward(torch.randn(1, 3, 256, 256), cfg)
    assert [tuple(f.shape[1:]) for f in feats] == [(64, 64, 64), (128, 32, 32), (320, 16, 16), (512, 8, 8)]


def test_config_round_trip_and_validation():
    cfg = MitConfig.b3()
    assert MitConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.total_stride == 32
    with pytest.raises(ValueError):
        MitConfig(num_heads=(3, 2, 5, 8))
    with pytest.raises(GeometryError):
        MitConfig(patch_strides=(7, 2, 2, 2))

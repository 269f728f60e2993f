import pytest
import torch

from profact.checkpoint import save_checkpoint, state_arrays
from profact.encoder import (
    EfficientSelfAttention,
    EncoderConfig,
    HierarchicalEncoder,
    MixFFN,
    OverlapPatchEmbed,
    import_backbone_weights,
)
from profact.errors import ShapeMismatch
from util import fd_check_input


def test_config_rejects_decreasing_channels():
    with pytest.raises(ValueError):
        EncoderConfig(stage_channels=(64, 32, 160, 256))


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        EncoderConfig(stage_channels=(30, 64, 160, 256), attention_heads=(4, 2, 5, 8))


def test_patch_embed_stage1_quarters_resolution():
    embed = OverlapPatchEmbed(3, 16, patch=7, stride=4)
    out = embed(torch.rand(1, 3, 64, 64))
    assert out.shape == (1, 16, 16, 16)


def test_patch_embed_stage2_halves_resolution():
    embed = OverlapPatchEmbed(16, 32, patch=3, stride=2)
    out = embed(torch.rand(2, 16, 32, 32))
    assert out.shape == (2, 32, 16, 16)


def test_patch_embed_minimum_input():
    embed = OverlapPatchEmbed(3, 8, patch=7, stride=4)
    assert embed(torch.rand(1, 3, 32, 32)).shape == (1, 8, 8, 8)


def test_patch_embed_rejects_indivisible_dims():
    embed = OverlapPatchEmbed(3, 8, patch=7, stride=4)
    with pytest.raises(ShapeMismatch):
        embed(torch.rand(1, 3, 30, 30))


def test_attention_preserves_shape():
    attn = EfficientSelfAttention(8, heads=2, reduction_ratio=1)
    x = torch.rand(1, 8, 16, 16)
    assert attn(x).shape == x.shape


def test_attention_rows_sum_to_one():
    attn = EfficientSelfAttention(8, heads=2, reduction_ratio=2)
    probs = attn.attention_weights(torch.rand(2, 8, 8, 8))
    sums = probs.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


def test_attention_gradient_matches_finite_differences():
    attn = EfficientSelfAttention(8, heads=2, reduction_ratio=2).double()
    x = torch.rand(1, 8, 8, 8, dtype=torch.float64)
    err = fd_check_input(lambda t: attn(t).mean(), x, n=10, h=1e-3, seed=0)
    assert err < 1e-3


def test_mix_ffn_preserves_shape():
    ffn = MixFFN(8, expansion=2)
    x = torch.rand(2, 8, 8, 8)
    assert ffn(x).shape == x.shape


def test_mix_ffn_zero_weights_is_identity():
    ffn = MixFFN(8, expansion=2)
    with torch.no_grad():
        ffn.fc1.weight.zero_(); ffn.fc1.bias.zero_()
        ffn.dwconv.weight.zero_(); ffn.dwconv.bias.zero_()
        ffn.fc2.weight.zero_(); ffn.fc2.bias.zero_()
    x = torch.rand(1, 8, 8, 8)
    assert torch.equal(ffn(x), x)


def test_mix_ffn_gradient_matches_finite_differences():
    ffn = MixFFN(6, expansion=2).double()
    x = torch.rand(1, 6, 8, 8, dtype=torch.float64)
    err = fd_check_input(lambda t: ffn(t).mean(), x, n=10, h=1e-3, seed=1)
    assert err < 1e-3


def test_encode_levels_follow_the_scale_rule():
    encoder = HierarchicalEncoder(EncoderConfig.tiny())
    encoder.eval()
    for size in (256, 128):
        with torch.no_grad():
            levels = encoder(torch.rand(1, 3, size, size))
        expected = [size // 4, size // 8, size // 16, size // 32]
        assert [f.shape[-1] for f in levels] == expected
        assert [f.shape[-2] for f in levels] == expected
        assert [f.shape[1] for f in levels] == list(encoder.cfg.stage_channels)


def test_encode_is_deterministic_in_eval_mode():
    encoder = HierarchicalEncoder(EncoderConfig.tiny())
    encoder.eval()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a = encoder(x)
        b = encoder(x)
    for fa, fb in zip(a, b):
        assert torch.equal(fa, fb)


def test_encode_rejects_non_multiple_of_32():
    encoder = HierarchicalEncoder(EncoderConfig.tiny())
    with pytest.raises(ShapeMismatch):
        encoder(torch.rand(1, 3, 48, 48))


def test_encoder_runs_on_varied_resolutions_without_retuning():
    encoder = HierarchicalEncoder(EncoderConfig.tiny())
    encoder.eval()
    with torch.no_grad():
        for size in (32, 64, 96, 160):
            levels = encoder(torch.rand(1, 3, size, size))
            assert levels[-1].shape[-1] == size // 32


def test_encoder_outputs_are_finite():
    encoder = HierarchicalEncoder(EncoderConfig.tiny())
    encoder.eval()
    with torch.no_grad():
        levels = encoder(torch.rand(2, 3, 64, 64))
    for f in levels:
        assert torch.isfinite(f).all()


def test_backbone_weight_import_round_trip(tmp_path):
    torch.manual_seed(11)
    source = HierarchicalEncoder(EncoderConfig.tiny())
    path = tmp_path / "backbone.ckpt"
    save_checkpoint(path, state_arrays(source))

    torch.manual_seed(99)
    target = HierarchicalEncoder(EncoderConfig.tiny())
    report = import_backbone_weights(target, path)
    assert not report["missing"]
    assert not report["unexpected"]

    source.eval(); target.eval()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a = source(x)
        b = target(x)
    for fa, fb in zip(a, b):
        assert torch.equal(fa, fb)

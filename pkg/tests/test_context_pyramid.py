import pytest
import torch
import torch.nn.functional as F

from profact.context_pyramid import (
    ChannelLayerNorm,
    ContextBlock,
    ContextSpatialPyramid,
    CspmConfig,
    DilatedPyramid,
)
from util import fd_check_input, fd_check_params


def test_config_rejects_duplicate_rates():
    with pytest.raises(ValueError):
        CspmConfig(dilation_rates=(1, 2, 2))


def test_context_block_preserves_shape():
    block = ContextBlock(8)
    x = torch.rand(2, 8, 8, 8)
    assert block(x).shape == x.shape


def test_context_block_all_zero_weights_gives_zero_output():
    block = ContextBlock(8)
    with torch.no_grad():
        for conv in (block.static, block.attn_embed, block.attn_project, block.value):
            conv.weight.zero_()
            conv.bias.zero_()
    out = block(torch.rand(1, 8, 8, 8))
    assert torch.equal(out, torch.zeros_like(out))


def test_context_block_reduces_to_static_path_when_attention_is_zeroed():
    # Zeroing the two attention convolutions and the value embedding must leave
    # exactly the static branch.
    block = ContextBlock(8)
    with torch.no_grad():
        for conv in (block.attn_embed, block.attn_project, block.value):
            conv.weight.zero_()
            conv.bias.zero_()
    x = torch.rand(1, 8, 8, 8)
    assert torch.equal(block(x), block.static(x))


def test_context_block_gradient_matches_finite_differences():
    block = ContextBlock(6).double()
    x = torch.rand(1, 6, 8, 8, dtype=torch.float64)
    err = fd_check_input(lambda t: block(t).mean(), x, n=10, h=1e-3, seed=2)
    assert err < 1e-3


def test_context_block_parameter_gradients_match_finite_differences():
    block = ContextBlock(6).double()
    x = torch.rand(1, 6, 8, 8, dtype=torch.float64)
    err = fd_check_params(lambda: block(x).mean(), list(block.parameters()), n=10, seed=3)
    assert err < 1e-3


def test_pyramid_preserves_shape():
    pyramid = DilatedPyramid(8, rates=(1, 2, 3))
    x = torch.rand(1, 8, 8, 8)
    assert pyramid(x).shape == x.shape


def test_pyramid_single_branch_equivalence_with_identity_fuse():
    # Fuse weights picking out the dilated branch reproduce that branch alone,
    # recomputed independently from the raw convolution parameters.
    torch.manual_seed(4)
    pyramid = DilatedPyramid(4, rates=(1,))
    with torch.no_grad():
        pyramid.fuse.weight.zero_()
        pyramid.fuse.bias.zero_()
        for c in range(4):
            pyramid.fuse.weight[c, 4 + c, 0, 0] = 1.0  # second slot = rate-1 branch
    x = torch.rand(1, 4, 8, 8)
    out = pyramid(x)
    conv = pyramid.branches[0]
    expected = F.gelu(F.conv2d(x, conv.weight, conv.bias, padding=1))
    assert torch.allclose(out, expected, atol=1e-6)


def test_pyramid_zero_padding_separates_border_from_interior():
    torch.manual_seed(5)
    conv = torch.nn.Conv2d(1, 1, 3, padding=2, dilation=2)
    with torch.no_grad():
        conv.weight.fill_(1.0)
        conv.bias.zero_()
    out = conv(torch.ones(1, 1, 9, 9))[0, 0]
    interior = out[2:-2, 2:-2]
    assert torch.allclose(interior, torch.full_like(interior, 9.0))
    assert (out[0] < 9.0).all() and (out[:, 0] < 9.0).all()


def test_pyramid_gradients_reach_every_branch():
    pyramid = DilatedPyramid(8, rates=(1, 2, 3))
    x = torch.rand(2, 8, 8, 8)
    pyramid(x).sum().backward()
    assert pyramid.point.weight.grad.norm() > 0
    for branch in pyramid.branches:
        assert branch.weight.grad.norm() > 0


def test_full_module_shapes_across_pyramid_levels():
    cfg = CspmConfig()
    for channels, size in ((16, 16), (32, 8), (64, 4), (128, 2)):
        module = ContextSpatialPyramid(channels, cfg)
        x = torch.rand(1, channels, size, size)
        assert module(x).shape == x.shape


def test_full_module_eval_determinism():
    module = ContextSpatialPyramid(8)
    module.eval()
    x = torch.rand(1, 8, 8, 8)
    with torch.no_grad():
        assert torch.equal(module(x), module(x))


def test_full_module_is_finite_on_wide_range_inputs():
    module = ContextSpatialPyramid(8)
    x = torch.empty(2, 8, 8, 8).uniform_(-10.0, 10.0)
    assert torch.isfinite(module(x)).all()


def test_channel_layer_norm_normalizes_channels():
    norm = ChannelLayerNorm(16)
    x = torch.rand(2, 16, 4, 4) * 5 + 3
    out = norm(x)
    assert torch.allclose(out.mean(dim=1), torch.zeros(2, 4, 4), atol=1e-5)


def test_softmax_ablation_flag_changes_the_attention():
    torch.manual_seed(6)
    raw = ContextBlock(8, CspmConfig(attention_softmax=False))
    soft = ContextBlock(8, CspmConfig(attention_softmax=True))
    soft.load_state_dict(raw.state_dict())
    x = torch.rand(1, 8, 8, 8)
    assert not torch.allclose(raw(x), soft(x))

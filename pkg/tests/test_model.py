import numpy as np
import pytest
import torch
import torch.nn as nn
from scipy import ndimage

from profact.errors import ShapeMismatch
from profact.losses import total_loss
from profact.model import (
    ForgeryLocalizer,
    HamConfig,
    HolisticAttention,
    ModelConfig,
    gaussian_kernel_2d,
)
from util import fd_check_params


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return ForgeryLocalizer(ModelConfig.tiny())


def test_ham_config_validation():
    with pytest.raises(ValueError):
        HamConfig(gaussian_kernel_size=6)
    with pytest.raises(ValueError):
        HamConfig(gaussian_sigma=0.0)


def test_gaussian_kernel_is_normalized():
    kernel = gaussian_kernel_2d(7, 1.0)
    assert kernel.shape == (7, 7)
    assert torch.allclose(kernel.sum(), torch.tensor(1.0))
    assert torch.argmax(kernel) == 24  # center of a 7x7


def test_ham_zero_map_stays_zero():
    ham = HolisticAttention()
    out = ham(torch.zeros(1, 1, 32, 32))
    assert torch.equal(out, torch.zeros_like(out))


def test_ham_output_dominates_downsampled_map():
    ham = HolisticAttention()
    for seed in range(100):
        coarse = torch.rand(1, 1, 32, 32, generator=torch.Generator().manual_seed(seed))
        with torch.no_grad():
            down = ham.downsample(coarse)
            out = ham(coarse)
        assert (out >= down - 1e-7).all()


def test_ham_stays_in_unit_range_at_initialization():
    ham = HolisticAttention()
    coarse = torch.rand(2, 1, 64, 64)
    with torch.no_grad():
        out = ham(coarse)
    assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-6


def test_ham_enlarges_single_pixel_support():
    ham = HolisticAttention(HamConfig(gaussian_kernel_size=7, gaussian_sigma=1.0))
    coarse = torch.zeros(1, 1, 32, 32)
    coarse[0, 0, 17, 13] = 1.0
    with torch.no_grad():
        down = ham.downsample(coarse)[0, 0].numpy()
        out = ham(coarse)[0, 0].numpy()
    down_support = down > 1e-10
    out_support = out > 1e-10
    # Oracle: the blur spreads the downsampled support by the kernel footprint.
    expected = ndimage.binary_dilation(down_support, structure=np.ones((7, 7)))
    assert down_support.any()
    assert out_support.sum() > down_support.sum()
    assert np.array_equal(out_support, expected | down_support)


class _ConstantGate(nn.Module):
    def __init__(self, value: float):
        super().__init__()
        self.value = value

    def forward(self, coarse):
        b, _, h, w = coarse.shape
        return torch.full((b, 1, h // 2, w // 2), self.value)


def test_feedback_fuse_identity_and_annihilation(tiny_model):
    stage2 = torch.rand(1, tiny_model.cfg.encoder.stage_channels[1], 8, 8)
    coarse = torch.rand(1, 1, 64, 64)
    tiny_model.attention = _ConstantGate(1.0)
    assert torch.equal(tiny_model.feedback_fuse(coarse, stage2), stage2)
    tiny_model.attention = _ConstantGate(0.0)
    fused = tiny_model.feedback_fuse(coarse, stage2)
    assert torch.equal(fused, torch.zeros_like(fused))


def test_feedback_fuse_attenuates_when_gate_below_one(tiny_model):
    stage2 = torch.rand(1, tiny_model.cfg.encoder.stage_channels[1], 8, 8)
    coarse = torch.rand(1, 1, 64, 64) * 0.7
    with torch.no_grad():
        fused = tiny_model.feedback_fuse(coarse, stage2)
        gate = tiny_model.attention(coarse)
    assert gate.max() <= 1.0 + 1e-6
    assert fused.norm() <= stage2.norm() + 1e-6
    assert (fused.abs() <= stage2.abs() + 1e-6).all()


def test_refine_produces_scaled_features_and_bounded_map(tiny_model):
    c2 = tiny_model.cfg.encoder.stage_channels[1]
    fused = torch.rand(1, c2, 8, 8)  # 1/8 of a 64-input
    tiny_model.eval()
    with torch.no_grad():
        feat3, feat4, refined = tiny_model.refine(fused, (64, 64))
    assert feat3.shape[-2:] == (4, 4)
    assert feat4.shape[-2:] == (2, 2)
    assert refined.shape == (1, 1, 64, 64)
    assert refined.min() > 0.0 and refined.max() < 1.0
    with torch.no_grad():
        again = tiny_model.refine(fused, (64, 64))[2]
    assert torch.equal(refined, again)


def test_forward_contract_shapes_and_range(tiny_model):
    tiny_model.eval()
    with torch.no_grad():
        coarse, refined = tiny_model(torch.rand(2, 3, 64, 64))
    for out in (coarse, refined):
        assert out.shape == (2, 1, 64, 64)
        assert out.min() > 0.0 and out.max() < 1.0


def test_forward_rejects_bad_sizes(tiny_model):
    with pytest.raises(ShapeMismatch):
        tiny_model(torch.rand(1, 3, 48, 48))


def test_gradient_reaches_first_stage_through_the_feedback_path(tiny_model):
    # Dropping the coarse-branch loss, gradient still reaches stage-1 weights
    # via the refined branch (through the gate and the re-encoded stages).
    x = torch.rand(1, 3, 64, 64)
    target = torch.zeros(1, 1, 64, 64)
    target[:, :, 20:40, 20:40] = 1.0
    _, refined = tiny_model(x)
    loss = total_loss(refined, refined, target) * 0.5  # refined branch only
    loss.backward()
    stage1_params = list(tiny_model.encoder.stages[0].parameters())
    grads = [p.grad for p in stage1_params if p.grad is not None]
    assert grads, "stage-1 received no gradient"
    assert max(g.abs().max().item() for g in grads) > 0.0


def test_total_loss_gradient_reaches_both_decoder_branches(tiny_model):
    x = torch.rand(1, 3, 64, 64)
    target = torch.zeros(1, 1, 64, 64)
    target[:, :, 10:30, 10:30] = 1.0
    coarse, refined = tiny_model(x)
    total_loss(coarse, refined, target).backward()
    coarse_grads = [p.grad for p in tiny_model.coarse_decoder.parameters()]
    refine_grads = [p.grad for p in tiny_model.refine_decoder.parameters()]
    assert all(g is not None for g in coarse_grads)
    assert all(g is not None for g in refine_grads)
    assert max(g.abs().max().item() for g in coarse_grads) > 0.0
    assert max(g.abs().max().item() for g in refine_grads) > 0.0


def test_batched_forward_equals_single_passes(tiny_model):
    tiny_model.eval()
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        coarse_b, refined_b = tiny_model(x)
        coarse_0, refined_0 = tiny_model(x[:1])
        coarse_1, refined_1 = tiny_model(x[1:])
    assert (coarse_b[0] - coarse_0[0]).abs().max() < 1e-5
    assert (coarse_b[1] - coarse_1[0]).abs().max() < 1e-5
    assert (refined_b[0] - refined_0[0]).abs().max() < 1e-5
    assert (refined_b[1] - refined_1[0]).abs().max() < 1e-5


def test_refinement_weights_are_disjoint_from_coarse_stages(tiny_model):
    refine_keys = {
        name for name, _ in tiny_model.named_parameters()
        if name.startswith(("refine_stage3", "refine_stage4", "refine_enhance", "refine_decoder"))
    }
    coarse_keys = {
        name for name, _ in tiny_model.named_parameters()
        if name.startswith(("encoder", "coarse_enhance", "coarse_decoder"))
    }
    assert refine_keys and coarse_keys
    assert not (refine_keys & coarse_keys)
    refine_ids = {id(p) for n, p in tiny_model.named_parameters() if n in refine_keys}
    coarse_ids = {id(p) for n, p in tiny_model.named_parameters() if n in coarse_keys}
    assert not (refine_ids & coarse_ids)


def test_end_to_end_gradients_match_finite_differences():
    torch.manual_seed(3)
    model = ForgeryLocalizer(ModelConfig.tiny()).double()
    model.eval()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    target = torch.zeros(1, 1, 32, 32, dtype=torch.float64)
    target[:, :, 8:20, 10:24] = 1.0

    def scalar():
        coarse, refined = model(x)
        return total_loss(coarse, refined, target)

    err = fd_check_params(scalar, list(model.parameters()), n=10, h=1e-3, seed=4)
    assert err < 1e-2


def test_predict_crops_back_to_original_size(tiny_model):
    rng = np.random.default_rng(8)
    image = rng.random((70, 50, 3)).astype(np.float32)
    coarse, refined = tiny_model.predict(image)
    assert coarse.shape == (70, 50)
    assert refined.shape == (70, 50)
    assert 0.0 < coarse.min() and coarse.max() < 1.0
    again = tiny_model.predict(image)[1]
    assert np.array_equal(refined, again)

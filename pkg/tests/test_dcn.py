import pytest
import torch
import torch.nn.functional as F

from helpers import central_diff, rel_err
from foodseg.dcn import (
    CENTER, BasicBlock, DCNBackbone, DCNv3, bilinear_gather, bilinear_sample, dcn_config, dcn_v3,
)
from foodseg.upernet import build_segmentor, count_parameters


def _feature(h=3, w=4, c=2, seed=0):
    return torch.randn(h, w, c, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_bilinear_integer_point():
    f = _feature()
    assert torch.equal(bilinear_sample(f, (2, 1)), f[2, 1])


def test_bilinear_cell_midpoint():
    f = _feature()
    torch.testing.assert_close(bilinear_sample(f, (0.5, 1.5)), f[0:2, 1:3].reshape(-1, 2).mean(0))


def test_bilinear_far_outside_is_zero():
    assert torch.equal(bilinear_sample(_feature(), (-5, -5)), torch.zeros(2, dtype=torch.float64))


def test_bilinear_matches_grid_sample():
    g = torch.Generator().manual_seed(1)
    h, w, c = 5, 7, 3
    f = torch.randn(1, h, w, c, generator=g, dtype=torch.float64)
    y = torch.rand(1, 200, generator=g, dtype=torch.float64) * (h + 2) - 1.5
    x = torch.rand(1, 200, generator=g, dtype=torch.float64) * (w + 2) - 1.5
    ours = bilinear_gather(f, y, x)
    grid = torch.stack([2 * x / (w - 1) - 1, 2 * y / (h - 1) - 1], dim=-1).view(1, 1, 200, 2)
    ref = F.grid_sample(f.permute(0, 3, 1, 2), grid, mode="bilinear", padding_mode="zeros",
                        align_corners=True)[0, :, 0].t()
    torch.testing.assert_close(ours[0], ref, atol=1e-12, rtol=0)


def _dense_oracle(x, groups, group_weight, group_bias, out_weight, out_bias):
    """Per-group W_g applied to the zero-padded 3x3 neighbourhood mean."""
    b, h, w, c = x.shape
    cg = c // groups
    cols = F.unfold(x.permute(0, 3, 1, 2), 3, padding=1).view(b, c, 9, h, w)
    mean = cols.mean(2).permute(0, 2, 3, 1)  # B x H x W x C
    outs = []
    for g in range(groups):
        outs.append(mean[..., g * cg:(g + 1) * cg] @ group_weight[g].t())
    y = torch.cat(outs, -1) + group_bias
    return y @ out_weight.t() + out_bias


def _weights(c, cout, groups, seed, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(groups, cout // groups, c // groups, generator=g, dtype=dtype),
            torch.randn(cout, generator=g, dtype=dtype),
            torch.randn(cout, cout, generator=g, dtype=dtype),
            torch.randn(cout, generator=g, dtype=dtype))


@pytest.mark.parametrize("seed", range(3))
def test_zero_offset_matches_dense_oracle(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 6, 6, 8, generator=g, dtype=torch.float64)
    w = _weights(8, 8, 2, seed + 10)
    offset = torch.zeros(2, 6, 6, 2, 9, 2, dtype=torch.float64)
    logits = torch.full((2, 6, 6, 2, 9), 0.7, dtype=torch.float64)
    out = dcn_v3(x, offset, logits, *w)
    assert (out - _dense_oracle(x, 2, *w)).abs().max() < 1e-5


def test_module_at_init_is_dense_oracle():
    torch.manual_seed(0)
    layer = DCNv3(8, groups=2)
    x = torch.randn(1, 6, 6, 8)
    ref = _dense_oracle(x, 2, layer.group_weight, layer.group_bias, layer.output_proj.weight,
                        layer.output_proj.bias)
    assert (layer(x) - ref).abs().max() < 1e-5


def test_single_pixel_input():
    g = torch.Generator().manual_seed(2)
    x = torch.randn(1, 1, 1, 4, generator=g, dtype=torch.float64)
    gw, gb, _, _ = _weights(4, 4, 2, 3)
    logits = torch.randn(1, 1, 1, 2, 9, generator=g, dtype=torch.float64)
    out = dcn_v3(x, torch.zeros(1, 1, 1, 2, 9, 2, dtype=torch.float64), logits, gw, torch.zeros(4))
    m = torch.softmax(logits, -1)[0, 0, 0, :, CENTER]
    expected = torch.cat([m[k] * gw[k] @ x[0, 0, 0, 2 * k:2 * k + 2] for k in range(2)])
    torch.testing.assert_close(out[0, 0, 0], expected)


def _off_lattice_offsets(shape, seed):
    g = torch.Generator().manual_seed(seed)
    frac = torch.rand(shape, generator=g, dtype=torch.float64) * 0.7 + 0.15
    return frac - torch.randint(0, 2, shape, generator=g).double()


class _Problem:
    def __init__(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        self.x = torch.randn(1, 6, 6, 8, generator=g, dtype=torch.float64)
        self.offset = _off_lattice_offsets((1, 6, 6, 2, 9, 2), seed + 1)
        self.logits = torch.randn(1, 6, 6, 2, 9, generator=g, dtype=torch.float64)
        self.gw, self.gb, self.ow, self.ob = _weights(8, 8, 2, seed + 2)
        self.target = torch.randn(1, 6, 6, 8, generator=g, dtype=torch.float64)

    def loss(self):
        return (dcn_v3(self.x, self.offset, self.logits, self.gw, self.gb, self.ow, self.ob) * self.target).sum()


@pytest.mark.parametrize("name", ["x", "offset", "logits", "gw", "ow"])
def test_gradients_match_finite_differences(name):
    prob = _Problem()
    tensor = getattr(prob, name)
    tensor.requires_grad_(True)
    prob.loss().backward()
    analytic = tensor.grad.clone()
    tensor.requires_grad_(False)
    numeric = central_diff(prob.loss, tensor)
    assert rel_err(analytic, numeric) < 1e-3


def test_modulation_sums_to_one():
    torch.manual_seed(3)
    layer = DCNv3(16, groups=4)
    torch.nn.init.normal_(layer.mask.weight, std=1.0)
    m = layer.modulation(torch.randn(2, 5, 5, 16))
    assert m.shape == (2, 5, 5, 4, 9)
    assert (m.sum(-1) - 1).abs().max() < 1e-6


def test_offset_bound_clamps():
    layer = DCNv3(4, groups=2, offset_bound=0.5)
    torch.nn.init.constant_(layer.offset.bias, 3.0)
    offset, _ = layer.branch(torch.randn(1, 3, 3, 4))
    assert offset.abs().max() == 0.5


def test_zero_sublayers_give_identity():
    blk = BasicBlock(8, 2)
    for lin in (blk.dcn.output_proj, blk.ffn.fc2):
        torch.nn.init.zeros_(lin.weight)
        torch.nn.init.zeros_(lin.bias)
    x = torch.randn(2, 4, 4, 8)
    assert torch.equal(blk(x), x)


def test_block_composition():
    torch.manual_seed(4)
    bb = DCNBackbone(dcn_config("toy", depths=(2, 1, 1, 1)))
    stage = bb.stages[0]
    x = torch.randn(1, 8, 8, 32)
    torch.testing.assert_close(stage(x), stage[1](stage[0](x)))
    assert stage[0](x).shape == x.shape


@pytest.mark.parametrize("size,expected", [(64, [16, 8, 4, 2]), (512, [128, 64, 32, 16])])
def test_pyramid_shapes(size, expected):
    torch.manual_seed(0)
    bb = DCNBackbone(dcn_config("toy")).eval()
    with torch.no_grad():
        pyr = bb(torch.randn(1, 3, size, size))
    assert [f.shape[-1] for f in pyr] == expected
    assert [f.shape[1] for f in pyr] == [32, 64, 128, 256]


def test_input_not_divisible_by_32():
    with pytest.raises(ValueError, match="divisible by 32"):
        DCNBackbone(dcn_config("toy"))(torch.randn(1, 3, 48, 48))


def test_backbone_deterministic():
    torch.manual_seed(0)
    bb = DCNBackbone(dcn_config("toy")).eval()
    x = torch.randn(1, 3, 64, 64)
    assert all(torch.equal(a, b) for a, b in zip(bb(x), bb(x)))


def test_groups_must_divide_channels():
    with pytest.raises(ValueError):
        dcn_config("toy", groups=(3, 4, 8, 16))


def test_base_preset_parameter_count():
    with torch.device("meta"):
        model = build_segmentor("dcn", 104, dcn=dcn_config("base"), channels=512)
    total = count_parameters(model)
    assert abs(total - 128e6) / 128e6 <= 0.10

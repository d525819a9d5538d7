"""InternImage-style backbone on a pure-PyTorch DCN-v3 operator.

Tensors inside the backbone are channels-last (B x H x W x C); the returned
feature pyramid is channels-first for the decoder.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .vit import DropPath

# 3x3 sampling grid, row-major: k = (dy + 1) * 3 + (dx + 1)
KERNEL_POINTS = torch.tensor([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=torch.float64)
NUM_POINTS = 9
CENTER = 4


def bilinear_gather(feature: torch.Tensor, y: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Sample ``feature`` (B x H x W x C) at fractional points ``y``, ``x`` (B x P).

    Each of the four integer neighbours that lies outside the map contributes
    zero. Differentiable in the feature and in the coordinates (except on the
    integer lattice, where the bilinear weights have kinks).
    """
    b, h, w, c = feature.shape
    flat = feature.reshape(b, h * w, c)
    y0 = torch.floor(y)
    x0 = torch.floor(x)
    wy1 = y - y0
    wx1 = x - x0
    wy0 = 1 - wy1
    wx0 = 1 - wx1
    y0 = y0.long()
    x0 = x0.long()
    out = feature.new_zeros(b, y.shape[1], c)
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            idx = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1)).unsqueeze(-1).expand(-1, -1, c)
            vals = torch.gather(flat, 1, idx)
            weight = (wy * wx * valid.to(wy.dtype)).unsqueeze(-1)
            out = out + weight * vals
    return out


def bilinear_sample(feature: torch.Tensor, point) -> torch.Tensor:
    """Single-point convenience: ``feature`` H x W x C at (y, x) -> C-vector."""
    y, x = (float(v) for v in point)
    yt = torch.tensor([[y]], dtype=feature.dtype)
    xt = torch.tensor([[x]], dtype=feature.dtype)
    return bilinear_gather(feature[None], yt, xt)[0, 0]


def dcn_v3_aggregate(x: torch.Tensor, offset: torch.Tensor, mask_logits: torch.Tensor,
                     groups: int) -> torch.Tensor:
    """Modulated deformable aggregation before the per-group weights.

    x: B x H x W x C; offset: B x H x W x G x 9 x 2 as (dy, dx);
    mask_logits: B x H x W x G x 9. Returns B x H x W x G x C/G with
    out[p, g] = sum_k softmax_k(mask_logits)[p, g, k] * x_g(p + p_k + offset[p, g, k]).
    """
    b, h, w, c = x.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    cg = c // groups
    m = torch.softmax(mask_logits, dim=-1)
    base_y = torch.arange(h, dtype=x.dtype).view(1, h, 1, 1, 1)
    base_x = torch.arange(w, dtype=x.dtype).view(1, 1, w, 1, 1)
    kp = KERNEL_POINTS.to(x.dtype)
    py = base_y + kp[:, 0].view(1, 1, 1, 1, NUM_POINTS) + offset[..., 0]
    px = base_x + kp[:, 1].view(1, 1, 1, 1, NUM_POINTS) + offset[..., 1]
    # B x H x W x G x K -> (B*G) x (H*W*K)
    py = py.permute(0, 3, 1, 2, 4).reshape(b * groups, h * w * NUM_POINTS)
    px = px.permute(0, 3, 1, 2, 4).reshape(b * groups, h * w * NUM_POINTS)
    xg = x.reshape(b, h, w, groups, cg).permute(0, 3, 1, 2, 4).reshape(b * groups, h, w, cg)
    samples = bilinear_gather(xg, py, px).reshape(b, groups, h, w, NUM_POINTS, cg)
    mw = m.permute(0, 3, 1, 2, 4).unsqueeze(-1)  # B x G x H x W x K x 1
    out = (samples * mw).sum(dim=4)  # B x G x H x W x Cg
    return out.permute(0, 2, 3, 1, 4)


def group_linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Per-group matrix: x ... x G x Cin/G, weight G x Cout/G x Cin/G -> ... x Cout."""
    out = torch.einsum("...gi,goi->...go", x, weight)
    out = out.reshape(*out.shape[:-2], -1)
    return out if bias is None else out + bias


def dcn_v3(x: torch.Tensor, offset: torch.Tensor, mask_logits: torch.Tensor, group_weight: torch.Tensor,
           group_bias=None, out_weight=None, out_bias=None) -> torch.Tensor:
    """Functional DCN-v3: aggregate, apply W_g per group, concat, output projection."""
    groups = group_weight.shape[0]
    y = group_linear(dcn_v3_aggregate(x, offset, mask_logits, groups), group_weight, group_bias)
    if out_weight is not None:
        y = F.linear(y, out_weight, out_bias)
    return y


class DCNv3(nn.Module):
    """DCN-v3 layer with its offset/modulation branch (depthwise 3x3 -> LN -> GELU -> linear)."""

    def __init__(self, channels: int, out_channels: int | None = None, groups: int = 4,
                 offset_scale: float = 1.0, offset_bound: float | None = None):
        super().__init__()
        out_channels = out_channels or channels
        if channels % groups or out_channels % groups:
            raise ValueError(f"channels {channels}/{out_channels} not divisible by groups {groups}")
        self.groups = groups
        self.offset_scale = offset_scale
        self.offset_bound = offset_bound
        self.dw_conv = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.dw_norm = nn.LayerNorm(channels)
        self.offset = nn.Linear(channels, groups * NUM_POINTS * 2)
        self.mask = nn.Linear(channels, groups * NUM_POINTS)
        self.group_weight = nn.Parameter(torch.empty(groups, out_channels // groups, channels // groups))
        self.group_bias = nn.Parameter(torch.zeros(out_channels))
        self.output_proj = nn.Linear(out_channels, out_channels)
        self.reset_parameters()

    def reset_parameters(self):
        # zero offsets and uniform modulation at init: a plain 3x3 box filter
        for lin in (self.offset, self.mask):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        fan_in = self.group_weight.shape[-1]
        nn.init.trunc_normal_(self.group_weight, std=fan_in ** -0.5)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def branch(self, x):
        b, h, w, _ = x.shape
        q = self.dw_conv(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        q = F.gelu(self.dw_norm(q))
        offset = self.offset(q).reshape(b, h, w, self.groups, NUM_POINTS, 2) * self.offset_scale
        if self.offset_bound is not None:
            offset = offset.clamp(-self.offset_bound, self.offset_bound)
        mask_logits = self.mask(q).reshape(b, h, w, self.groups, NUM_POINTS)
        return offset, mask_logits

    def modulation(self, x):
        """Softmax-normalized modulation scalars B x H x W x G x 9."""
        return torch.softmax(self.branch(x)[1], dim=-1)

    def forward(self, x):
        offset, mask_logits = self.branch(x)
        return dcn_v3(x, offset, mask_logits, self.group_weight, self.group_bias,
                      self.output_proj.weight, self.output_proj.bias)


class FFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class BasicBlock(nn.Module):
    """x += DCN(LN(x)); x += FFN(LN(x))."""

    def __init__(self, dim: int, groups: int, mlp_ratio: float = 4.0, drop_path: float = 0.0,
                 offset_scale: float = 1.0, offset_bound: float | None = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.dcn = DCNv3(dim, groups=groups, offset_scale=offset_scale, offset_bound=offset_bound)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, int(dim * mlp_ratio))
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        x = x + self.drop_path(self.dcn(self.norm1(x)))
        x = x + self.drop_path(self.ffn(self.norm2(x)))
        return x


class ConvLN(nn.Module):
    """Strided 3x3 conv (channels-last in/out) followed by LayerNorm."""

    def __init__(self, cin: int, cout: int, stride: int = 2, act: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.LayerNorm(cout)
        self.act = act

    def forward(self, x):
        x = self.norm(self.conv(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1))
        return F.gelu(x) if self.act else x


@dataclass
class DCNConfig:
    channels: tuple = (32, 64, 128, 256)
    depths: tuple = (1, 1, 2, 1)
    groups: tuple = (2, 4, 8, 16)
    mlp_ratio: float = 4.0
    drop_path: float = 0.0
    offset_scale: float = 1.0
    offset_bound: float | None = None

    def __post_init__(self):
        self.channels, self.depths, self.groups = tuple(self.channels), tuple(self.depths), tuple(self.groups)
        if not len(self.channels) == len(self.depths) == len(self.groups) == 4:
            raise ValueError("DCN backbone has exactly four stages")
        for c, g in zip(self.channels, self.groups):
            if c % g:
                raise ValueError(f"stage channels {c} not divisible by groups {g}")

    def to_dict(self) -> dict:
        return asdict(self)


DCN_PRESETS = {
    "toy": dict(channels=(32, 64, 128, 256), depths=(1, 1, 2, 1), groups=(2, 4, 8, 16)),
    # InternImage-B layout
    "base": dict(channels=(112, 224, 448, 896), depths=(4, 4, 21, 4), groups=(7, 14, 28, 56),
                 drop_path=0.4),
}


def dcn_config(name: str, **overrides) -> DCNConfig:
    return DCNConfig(**{**DCN_PRESETS[name], **overrides})


@dataclass
class FeaturePyramid:
    features: list = field(default_factory=list)  # four B x C x H x W maps, strides 4/8/16/32
    strides: tuple = (4, 8, 16, 32)

    def __iter__(self):
        return iter(self.features)

    def __len__(self):
        return len(self.features)

    def __getitem__(self, i):
        return self.features[i]


class DCNBackbone(nn.Module):
    def __init__(self, config: DCNConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.stem = nn.Sequential(ConvLN(3, c[0] // 2, act=True), ConvLN(c[0] // 2, c[0]))
        total = sum(config.depths)
        rates = [config.drop_path * i / max(total - 1, 1) for i in range(total)]
        self.stages = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        k = 0
        for i in range(4):
            self.stages.append(nn.Sequential(*[
                BasicBlock(c[i], config.groups[i], config.mlp_ratio, rates[k + j],
                           config.offset_scale, config.offset_bound)
                for j in range(config.depths[i])]))
            k += config.depths[i]
            if i < 3:
                self.downsamples.append(ConvLN(c[i], c[i + 1]))
        self.out_norms = nn.ModuleList(nn.LayerNorm(ch) for ch in c)

    @property
    def out_channels(self) -> tuple:
        return self.config.channels

    def forward(self, images) -> FeaturePyramid:
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} must be divisible by 32")
        x = self.stem(images.permute(0, 2, 3, 1))
        outs = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            outs.append(self.out_norms[i](x).permute(0, 3, 1, 2).contiguous())
            if i < 3:
                x = self.downsamples[i](x)
        return FeaturePyramid(outs)


def backbone_forward(images, backbone: DCNBackbone) -> FeaturePyramid:
    return backbone(images)

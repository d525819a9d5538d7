"""UperNet decode head, auxiliary FCN head, and the two segmentors (ViT / DCN)."""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dcn import DCNBackbone, DCNConfig, FeaturePyramid
from .vit import ViTConfig, ViTEncoder, default_taps


class ConvModule(nn.Sequential):
    def __init__(self, cin: int, cout: int, kernel: int = 1):
        super().__init__(nn.Conv2d(cin, cout, kernel, padding=kernel // 2, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


def resize(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class PPM(nn.Module):
    def __init__(self, cin: int, channels: int, scales=(1, 2, 3, 6)):
        super().__init__()
        self.scales = tuple(scales)
        self.branches = nn.ModuleList(ConvModule(cin, channels, 1) for _ in self.scales)

    def forward(self, x):
        size = x.shape[-2:]
        return [resize(branch(F.adaptive_avg_pool2d(x, s)), size)
                for s, branch in zip(self.scales, self.branches)]


class UPerHead(nn.Module):
    """Pyramid pooling on the deepest level + top-down FPN, fused at stride 4."""

    def __init__(self, in_channels: Sequence[int], channels: int, num_classes: int,
                 pool_scales=(1, 2, 3, 6), dropout: float = 0.1):
        super().__init__()
        if len(in_channels) != 4:
            raise ValueError("UperNet expects four feature levels")
        self.num_classes = num_classes
        self.ppm = PPM(in_channels[-1], channels, pool_scales)
        self.bottleneck = ConvModule(in_channels[-1] + len(pool_scales) * channels, channels, 3)
        self.lateral_convs = nn.ModuleList(ConvModule(c, channels, 1) for c in in_channels[:-1])
        self.fpn_convs = nn.ModuleList(ConvModule(channels, channels, 3) for _ in in_channels[:-1])
        self.fpn_bottleneck = ConvModule(len(in_channels) * channels, channels, 3)
        self.dropout = nn.Dropout2d(dropout) if dropout else nn.Identity()
        self.cls = nn.Conv2d(channels, num_classes, 1)

    def forward(self, feats) -> torch.Tensor:
        feats = list(feats)
        if len(feats) != 4 or any(f is None for f in feats):
            raise ValueError(f"UperNet needs 4 feature levels, got {len(feats)}")
        top = feats[-1]
        laterals = [conv(f) for conv, f in zip(self.lateral_convs, feats[:-1])]
        laterals.append(self.bottleneck(torch.cat([top, *self.ppm(top)], dim=1)))
        for i in range(len(laterals) - 1, 0, -1):
            laterals[i - 1] = laterals[i - 1] + resize(laterals[i], laterals[i - 1].shape[-2:])
        outs = [conv(lat) for conv, lat in zip(self.fpn_convs, laterals[:-1])] + [laterals[-1]]
        size = outs[0].shape[-2:]
        fused = self.fpn_bottleneck(torch.cat([outs[0]] + [resize(o, size) for o in outs[1:]], dim=1))
        return self.cls(self.dropout(fused))


class FCNHead(nn.Module):
    def __init__(self, cin: int, channels: int, num_classes: int, dropout: float = 0.1):
        super().__init__()
        self.conv = ConvModule(cin, channels, 3)
        self.dropout = nn.Dropout2d(dropout) if dropout else nn.Identity()
        self.cls = nn.Conv2d(channels, num_classes, 1)

    def forward(self, x):
        return self.cls(self.dropout(self.conv(x)))


class Resample(nn.Sequential):
    """Move a stride-``src`` map to stride ``dst`` (powers of two): transposed convs up, max-pool down."""

    def __init__(self, dim: int, src: int, dst: int):
        layers: list[nn.Module] = []
        if dst < src:
            n = int(round(math.log2(src // dst)))
            if 2 ** n * dst != src:
                raise ValueError(f"cannot resample stride {src} -> {dst}")
            for i in range(n):
                layers.append(nn.ConvTranspose2d(dim, dim, 2, stride=2))
                if i < n - 1:
                    layers += [nn.BatchNorm2d(dim), nn.GELU()]
        elif dst > src:
            if dst % src:
                raise ValueError(f"cannot resample stride {src} -> {dst}")
            layers.append(nn.MaxPool2d(dst // src))
        super().__init__(*layers)


class ViTPyramid(nn.Module):
    """Taps four encoder depths and resamples them to strides 4/8/16/32."""

    strides = (4, 8, 16, 32)

    def __init__(self, config: ViTConfig, taps: Sequence[int] | None = None):
        super().__init__()
        self.encoder = ViTEncoder(config)
        self.taps = tuple(taps or default_taps(config.depth))
        d = config.embed_dim
        self.tap_norms = nn.ModuleList(nn.LayerNorm(d, eps=1e-6) for _ in self.taps)
        self.resamplers = nn.ModuleList(Resample(d, config.patch_size, s) for s in self.strides)

    @property
    def out_channels(self) -> tuple:
        return (self.encoder.config.embed_dim,) * 4

    def forward(self, images) -> FeaturePyramid:
        _, outs, (gh, gw) = self.encoder.forward_features(images, taps=self.taps)
        feats = []
        for tok, norm, rs in zip(outs, self.tap_norms, self.resamplers):
            b, n, d = tok.shape
            fmap = norm(tok).transpose(1, 2).reshape(b, d, gh, gw)
            feats.append(rs(fmap))
        return FeaturePyramid(feats)


class Segmentor(nn.Module):
    def __init__(self, backbone: nn.Module, num_classes: int, channels: int = 512,
                 aux: bool = True, aux_channels: int | None = None, dropout: float = 0.1):
        super().__init__()
        self.backbone = backbone
        self.num_classes = num_classes
        cins = backbone.out_channels
        self.decode_head = UPerHead(cins, channels, num_classes, dropout=dropout)
        self.aux_head = FCNHead(cins[2], aux_channels or channels // 2, num_classes, dropout) if aux else None

    def forward(self, images, with_aux: bool = False):
        size = images.shape[-2:]
        feats = self.backbone(images)
        logits = resize(self.decode_head(feats), size)
        if with_aux:
            aux = resize(self.aux_head(feats[2]), size) if self.aux_head is not None else None
            return logits, aux
        return logits


def upernet_decode(features, head: UPerHead, size) -> torch.Tensor:
    """Decode a pyramid to B x C x H x W logits at ``size``."""
    return resize(head(features), size)


def build_segmentor(backbone: str, num_classes: int, vit: ViTConfig | None = None,
                    dcn: DCNConfig | None = None, channels: int = 512, aux: bool = True,
                    dropout: float = 0.1) -> Segmentor:
    if backbone == "vit":
        bb = ViTPyramid(vit or ViTConfig())
    elif backbone == "dcn":
        bb = DCNBackbone(dcn or DCNConfig())
    else:
        raise ValueError(f"unknown backbone {backbone!r} (expected 'vit' or 'dcn')")
    return Segmentor(bb, num_classes, channels=channels, aux=aux, dropout=dropout)


def seg_loss(logits: torch.Tensor, mask: torch.Tensor, aux_logits: torch.Tensor | None = None,
             aux_weight: float = 0.4) -> torch.Tensor:
    """Mean per-pixel cross-entropy (+ weighted auxiliary cross-entropy)."""
    if logits.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape[-2:])} and mask {tuple(mask.shape[-2:])} not aligned")
    c = logits.shape[1]
    if int(mask.max()) >= c or int(mask.min()) < 0:
        raise ValueError(f"mask contains class ids outside [0, {c})")
    loss = F.cross_entropy(logits, mask)
    if aux_logits is not None and aux_weight:
        loss = loss + aux_weight * F.cross_entropy(aux_logits, mask)
    return loss


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

"""Plain ViT encoder: patch embedding, learned absolute positions, pre-norm blocks."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ViTConfig:
    img_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    in_chans: int = 3
    drop_path: float = 0.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.img_size % self.patch_size:
            raise ValueError(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.img_size // self.patch_size
        return g, g

    def to_dict(self) -> dict:
        return asdict(self)


VIT_PRESETS = {
    "toy": dict(img_size=64, patch_size=8, embed_dim=64, depth=4, num_heads=4),
    "base": dict(img_size=224, patch_size=16, embed_dim=768, depth=12, num_heads=12),
    "large": dict(img_size=224, patch_size=16, embed_dim=1024, depth=24, num_heads=16),
}


def vit_config(name: str, **overrides) -> ViTConfig:
    return ViTConfig(**{**VIT_PRESETS[name], **overrides})


@dataclass
class PatchSequence:
    tokens: torch.Tensor  # B x N x D
    grid: tuple[int, int]
    mask: torch.Tensor | None = None  # B x N bool

    def __post_init__(self):
        n = self.tokens.shape[-2]
        if n != self.grid[0] * self.grid[1]:
            raise ValueError(f"{n} tokens do not fill a {self.grid} grid")
        if self.mask is not None and self.mask.shape[-1] > n:
            raise ValueError("more mask flags than patches")


def patchify(images: torch.Tensor, patch_size: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """B x C x H x W -> B x N x (p*p*C), row-major over the patch grid."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.permute(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, patch_size * patch_size * c)
    return x, (gh, gw)


def interpolate_pos_embed(pos: torch.Tensor, new_grid: Sequence[int]) -> torch.Tensor:
    """Bicubic resize of a (g*g) x D or g x g x D positional table to ``new_grid``."""
    squeeze = pos.dim() == 2
    if squeeze:
        n, d = pos.shape
        g = math.isqrt(n)
        if g * g != n:
            raise ValueError(f"position table of {n} entries is not a square grid")
        pos = pos.reshape(g, g, d)
    gh, gw = int(new_grid[0]), int(new_grid[1])
    if pos.shape[:2] == (gh, gw):
        out = pos.clone()
    else:
        grid = pos.permute(2, 0, 1)[None]
        out = F.interpolate(grid, size=(gh, gw), mode="bicubic", align_corners=False)[0].permute(1, 2, 0)
    return out.reshape(gh * gw, -1) if squeeze else out


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, in_chans: int, embed_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(patch_size * patch_size * in_chans, embed_dim)

    def forward(self, images):
        patches, grid = patchify(images, self.patch_size)
        return self.proj(patches), grid


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def _weights(self, q, k):
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)

    def attention_weights(self, x):
        """B x heads x N x N row-stochastic matrices."""
        q, k, _ = self._split(x)
        return self._weights(q, k)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self._split(x)
        out = (self._weights(q, k) @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = x.new_empty(x.shape[0], *([1] * (x.dim() - 1))).bernoulli_(1 - self.p)
        return x * keep / (1 - self.p)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0, drop_path: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        x = x + self.drop_path(self.attn(self.norm1(x)))
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return x


class ViTEncoder(nn.Module):
    """Stack of pre-norm transformer blocks over patch tokens (no CLS token).

    ``forward_features`` returns the final-normed tokens plus the raw outputs
    of any requested intermediate blocks (1-based depths) for dense heads.
    """

    def __init__(self, config: ViTConfig):
        super().__init__()
        self.config = config
        gh, gw = config.grid
        self.patch_embed = PatchEmbed(config.patch_size, config.in_chans, config.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(gh * gw, config.embed_dim))
        rates = [config.drop_path * i / max(config.depth - 1, 1) for i in range(config.depth)]
        self.blocks = nn.ModuleList(
            Block(config.embed_dim, config.num_heads, config.mlp_ratio, r) for r in rates)
        self.norm = nn.LayerNorm(config.embed_dim, eps=1e-6)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def pos_embed_for(self, grid) -> torch.Tensor:
        if tuple(grid) == self.config.grid:
            return self.pos_embed
        return interpolate_pos_embed(self.pos_embed, grid)

    def patchify_embed(self, images, mask=None, mask_token=None) -> PatchSequence:
        """Project patches; masked rows are swapped for ``mask_token`` before positions are added."""
        tokens, grid = self.patch_embed(images)
        if mask is not None:
            tokens = substitute_mask(tokens, mask, mask_token)
        return PatchSequence(tokens + self.pos_embed_for(grid), grid, mask)

    def encode(self, tokens: torch.Tensor, taps: Sequence[int] = ()) -> tuple[torch.Tensor, list]:
        outs = []
        for i, blk in enumerate(self.blocks, start=1):
            tokens = blk(tokens)
            if i in taps:
                outs.append(tokens)
        return self.norm(tokens), outs

    def forward_features(self, images, taps: Sequence[int] = (), mask=None, mask_token=None):
        seq = self.patchify_embed(images, mask, mask_token)
        feats, outs = self.encode(seq.tokens, taps)
        return feats, outs, seq.grid

    def forward(self, images):
        return self.forward_features(images)[0]


def substitute_mask(tokens: torch.Tensor, mask: torch.Tensor, mask_token: torch.Tensor) -> torch.Tensor:
    if mask.shape != tokens.shape[:2]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match tokens {tuple(tokens.shape[:2])}")
    w = mask.unsqueeze(-1).to(tokens.dtype)
    return tokens * (1 - w) + mask_token.to(tokens.dtype) * w


def default_taps(depth: int) -> tuple[int, ...]:
    """Four evenly spaced block indices (1-based) ending at the last block."""
    return tuple(max(1, round(depth * k / 4)) for k in (1, 2, 3, 4))


def load_pos_compatible(model: ViTEncoder, state: dict) -> None:
    """Load encoder weights, resizing the position table if the grid changed."""
    state = dict(state)
    pos = state.get("pos_embed")
    if pos is not None and pos.shape != model.pos_embed.shape:
        state["pos_embed"] = interpolate_pos_embed(pos, model.config.grid)
    model.load_state_dict(state)

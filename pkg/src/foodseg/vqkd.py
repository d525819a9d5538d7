"""Vector-quantized knowledge distillation tokenizer.

A ViT encoder maps patches into a low-dimensional space, each vector is
snapped to its most cosine-similar code, and a small transformer decoder
reconstructs a frozen teacher's patch features from the code vectors. The
codebook is maintained by EMA rather than by gradient.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .optim import AdamW, check_finite, param_groups
from .vit import Block, ViTConfig, ViTEncoder

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# codebook + quantizer

class Codebook(nn.Module):
    """K unit-norm code vectors plus EMA statistics (all buffers, never trained by SGD)."""

    def __init__(self, num_codes: int = 8192, dim: int = 32, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        embed = F.normalize(torch.randn(num_codes, dim, generator=g), dim=1)
        self.register_buffer("embed", embed)
        self.register_buffer("count", torch.ones(num_codes))
        self.register_buffer("vecsum", embed.clone())
        self.register_buffer("unused", torch.zeros(num_codes, dtype=torch.long))

    @property
    def num_codes(self) -> int:
        return self.embed.shape[0]

    @property
    def dim(self) -> int:
        return self.embed.shape[1]


def l2_normalize(vectors: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norms = vectors.norm(dim=-1, keepdim=True)
    if (norms <= eps).any():
        raise ValueError("cannot quantize a zero-norm vector")
    return vectors / norms


def quantize(vectors: torch.Tensor, codebook) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest code by cosine similarity; ties go to the lowest index.

    ``vectors`` is ... x d; returns (codes ..., quantized ... x d). The
    quantized output is the raw code vector (no straight-through here).
    """
    embed = codebook.embed if isinstance(codebook, Codebook) else codebook
    if embed.shape[0] == 0:
        raise ValueError("empty codebook")
    flat = l2_normalize(vectors.reshape(-1, vectors.shape[-1]))
    sims = flat @ embed.t()
    codes = sims.argmax(dim=1)  # first maximum on ties
    quantized = embed[codes]
    return codes.reshape(vectors.shape[:-1]), quantized.reshape(vectors.shape)


@torch.no_grad()
def update_codebook_ema(codebook: Codebook, assignments: torch.Tensor, vectors: torch.Tensor,
                        decay: float = 0.99, dead_after: int = 200, eps: float = 1e-5,
                        generator: torch.Generator | None = None) -> Codebook:
    """One EMA step from a batch of (code index, vector) assignments, in place.

    count <- g*count + (1-g)*n, vecsum <- g*vecsum + (1-g)*sum(v), code <- unit(vecsum/count).
    Codes idle for ``dead_after`` consecutive calls are re-seeded from a random
    batch vector.
    """
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    k = codebook.num_codes
    assignments = assignments.reshape(-1)
    vectors = vectors.reshape(-1, codebook.dim).to(codebook.embed.dtype)
    onehot = F.one_hot(assignments, k).to(vectors.dtype)
    n = onehot.sum(0)
    sums = onehot.t() @ vectors

    codebook.count.mul_(decay).add_(n, alpha=1 - decay)
    codebook.vecsum.mul_(decay).add_(sums, alpha=1 - decay)
    centers = codebook.vecsum / codebook.count.clamp(min=eps).unsqueeze(1)
    norms = centers.norm(dim=1, keepdim=True)
    # unassigned codes keep their vecsum/count direction, so only touched codes are rewritten
    ok = (norms.squeeze(1) > eps) & (n > 0) & (decay < 1.0)
    codebook.embed[ok] = centers[ok] / norms[ok]

    codebook.unused.add_(1)
    codebook.unused[n > 0] = 0
    if dead_after and vectors.shape[0]:
        dead = (codebook.unused >= dead_after).nonzero().squeeze(1)
        if dead.numel():
            pick = torch.randint(vectors.shape[0], (dead.numel(),), generator=generator)
            fresh = F.normalize(vectors[pick], dim=1)
            codebook.embed[dead] = fresh
            codebook.vecsum[dead] = fresh
            codebook.count[dead] = 1.0
            codebook.unused[dead] = 0
    return codebook


# --------------------------------------------------------------------------
# teacher

class TeacherAdapter(Protocol):
    """Frozen feature source: images B x 3 x H x W -> B x N x dim on ``grid``."""

    dim: int
    grid: tuple[int, int]

    def __call__(self, images: torch.Tensor) -> torch.Tensor: ...


class RandomTeacher(nn.Module):
    """Frozen, randomly initialized ViT used as a desk-scale distillation target."""

    def __init__(self, config: ViTConfig, seed: int = 1234):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = ViTEncoder(config)
            # wider init than the trainable default so features depend on content
            for m in self.encoder.modules():
                if isinstance(m, nn.Linear):
                    nn.init.normal_(m.weight, std=m.in_features ** -0.5)
            nn.init.normal_(self.encoder.pos_embed, std=0.1)
        self.dim = config.embed_dim
        self.grid = config.grid
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    @torch.no_grad()
    def forward(self, images):
        return self.encoder(images)


# --------------------------------------------------------------------------
# tokenizer

@dataclass
class TokenizerConfig:
    encoder: ViTConfig = field(default_factory=lambda: ViTConfig(img_size=224, patch_size=16))
    teacher: ViTConfig | None = None
    num_codes: int = 8192
    code_dim: int = 32
    decoder_dim: int | None = None
    decoder_depth: int = 1
    beta: float = 1.0
    decay: float = 0.99
    dead_after: int = 200
    lr: float = 5e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.99)
    batch_size: int = 16
    steps: int = 500
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        d = dict(d)
        d["encoder"] = ViTConfig(**d["encoder"]) if isinstance(d.get("encoder"), dict) else d.get("encoder", ViTConfig())
        if isinstance(d.get("teacher"), dict):
            d["teacher"] = ViTConfig(**d["teacher"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def teacher_config(self) -> ViTConfig:
        if self.teacher is not None:
            return self.teacher
        e = self.encoder
        return ViTConfig(img_size=e.img_size, patch_size=e.patch_size, embed_dim=e.embed_dim,
                         depth=e.depth, num_heads=e.num_heads)


TOKENIZER_PRESETS = {
    # 32x32 images, 4x4 grid, 64 codes
    "toy": dict(encoder=dict(img_size=32, patch_size=8, embed_dim=64, depth=2, num_heads=4),
                num_codes=64, code_dim=32, decay=0.9, dead_after=50, lr=2e-3, batch_size=16,
                steps=500),
    # ViT-B/16 tokenizer with an 8192-entry codebook at 224x224
    "base": dict(encoder=dict(img_size=224, patch_size=16, embed_dim=768, depth=12, num_heads=12),
                 teacher=dict(img_size=224, patch_size=16, embed_dim=768, depth=12, num_heads=12),
                 num_codes=8192, code_dim=32, decoder_depth=3, steps=100 * 101000 // 16),
}


def tokenizer_config(name: str, **overrides) -> TokenizerConfig:
    return TokenizerConfig.from_dict({**TOKENIZER_PRESETS[name], **overrides})


@dataclass
class TokenSequence:
    codes: torch.Tensor  # N (long)
    grid: tuple[int, int]

    def __post_init__(self):
        if self.codes.numel() != self.grid[0] * self.grid[1]:
            raise ValueError(f"{self.codes.numel()} codes for grid {self.grid}")

    def token_set(self) -> set[int]:
        return set(self.codes.reshape(-1).tolist())


class VQKDTokenizer(nn.Module):
    def __init__(self, config: TokenizerConfig, teacher_dim: int | None = None):
        super().__init__()
        self.config = config
        enc = config.encoder
        self.encoder = ViTEncoder(enc)
        self.proj = nn.Sequential(nn.Linear(enc.embed_dim, enc.embed_dim), nn.Tanh(),
                                  nn.Linear(enc.embed_dim, config.code_dim))
        self.codebook = Codebook(config.num_codes, config.code_dim, seed=config.seed)
        dec_dim = config.decoder_dim or enc.embed_dim
        gh, gw = enc.grid
        self.decoder_in = nn.Linear(config.code_dim, dec_dim)
        self.decoder_pos = nn.Parameter(torch.zeros(gh * gw, dec_dim))
        self.decoder_blocks = nn.ModuleList(
            Block(dec_dim, dec_dim // 64 if dec_dim % 64 == 0 else 1) for _ in range(config.decoder_depth))
        self.decoder_norm = nn.LayerNorm(dec_dim, eps=1e-6)
        self.decoder_out = nn.Linear(dec_dim, teacher_dim or config.teacher_config().embed_dim)
        nn.init.trunc_normal_(self.decoder_pos, std=0.02)

    @property
    def grid(self) -> tuple[int, int]:
        return self.config.encoder.grid

    def encode(self, images) -> torch.Tensor:
        """Continuous, L2-normalized code-space vectors B x N x code_dim."""
        size = self.config.encoder.img_size
        if images.shape[-2:] != (size, size):
            raise ValueError(f"tokenizer expects {size}x{size} images, got {tuple(images.shape[-2:])}")
        return l2_normalize(self.proj(self.encoder(images)))

    def decode(self, quantized):
        x = self.decoder_in(quantized) + self.decoder_pos
        for blk in self.decoder_blocks:
            x = blk(x)
        return self.decoder_out(self.decoder_norm(x))

    def forward(self, images):
        z = self.encode(images)
        codes, q = quantize(z, self.codebook)
        q_st = z + (q - z).detach()
        return self.decode(q_st), z, q, codes

    @torch.no_grad()
    def tokenize(self, images) -> torch.Tensor:
        """B x N code indices."""
        codes, _ = quantize(self.encode(images), self.codebook)
        return codes


def tokenize_image(tokenizer: VQKDTokenizer, image: torch.Tensor) -> TokenSequence:
    """Tokenize one 3 x H x W image."""
    was_training = tokenizer.training
    tokenizer.eval()
    try:
        codes = tokenizer.tokenize(image[None])[0]
    finally:
        tokenizer.train(was_training)
    return TokenSequence(codes, tokenizer.grid)


def vqkd_loss(decoded, teacher_feats, z, q, beta: float = 1.0):
    """(total, reconstruction, commitment); teacher features are treated as constants."""
    teacher_feats = teacher_feats.detach()
    recon = (1 - F.cosine_similarity(decoded, teacher_feats, dim=-1)).mean()
    commit = (z - q.detach()).pow(2).sum(-1).mean()
    return recon + beta * commit, recon, commit


class VQKDTrainer:
    """Owns tokenizer, teacher and optimizer; ``step`` is single-writer."""

    def __init__(self, config: TokenizerConfig, teacher: TeacherAdapter | None = None):
        self.config = config
        torch.manual_seed(config.seed)
        self.teacher = teacher if teacher is not None else RandomTeacher(config.teacher_config(), seed=config.seed + 1)
        if tuple(self.teacher.grid) != config.encoder.grid:
            raise ValueError(f"teacher grid {self.teacher.grid} != tokenizer grid {config.encoder.grid}")
        self.tokenizer = VQKDTokenizer(config, teacher_dim=self.teacher.dim)
        self.optimizer = AdamW(param_groups(self.tokenizer, config.weight_decay), lr=config.lr,
                               betas=config.betas)
        self.generator = torch.Generator().manual_seed(config.seed + 2)
        self.iteration = 0

    def losses(self, images):
        decoded, z, q, codes = self.tokenizer(images)
        target = self.teacher(images)
        return vqkd_loss(decoded, target, z, q, self.config.beta), z, codes

    def step(self, images) -> dict:
        """One optimizer step plus one EMA codebook update; returns pre-update losses."""
        self.tokenizer.train()
        (total, recon, commit), z, codes = self.losses(images)
        check_finite(total, f"tokenizer step {self.iteration + 1}")
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        update_codebook_ema(self.tokenizer.codebook, codes.detach(), z.detach(), self.config.decay,
                            self.config.dead_after, generator=self.generator)
        self.iteration += 1
        return dict(iteration=self.iteration, loss=total.item(), recon=recon.item(),
                    commit=commit.item(), used=int(codes.unique().numel()))

    def save(self, path) -> None:
        save_tokenizer(self.tokenizer, path)


def vqkd_train_step(trainer: VQKDTrainer, images) -> dict:
    return trainer.step(images)


def save_tokenizer(tokenizer: VQKDTokenizer, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": "vqkd_tokenizer", "config": tokenizer.config.to_dict(),
                "teacher_dim": tokenizer.decoder_out.out_features,
                "state_dict": tokenizer.state_dict()}, path)


def load_tokenizer(path) -> VQKDTokenizer:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "vqkd_tokenizer":
        raise ValueError(f"{path} is not a tokenizer checkpoint")
    tok = VQKDTokenizer(TokenizerConfig.from_dict(ckpt["config"]), teacher_dim=ckpt["teacher_dim"])
    tok.load_state_dict(ckpt["state_dict"])
    tok.eval()
    return tok


def train_tokenizer(config: TokenizerConfig, images: torch.Tensor, out_dir=None,
                    teacher: TeacherAdapter | None = None, log_every: int = 50,
                    callback=None) -> tuple[VQKDTrainer, list[dict]]:
    """Train on an in-memory N x 3 x H x W image tensor with seeded batch sampling.

    ``callback(trainer, record)`` runs after every step.
    """
    trainer = VQKDTrainer(config, teacher)
    g = torch.Generator().manual_seed(config.seed + 3)
    history = []
    for _ in range(config.steps):
        idx = torch.randint(images.shape[0], (min(config.batch_size, images.shape[0]),), generator=g)
        rec = trainer.step(images[idx])
        history.append(rec)
        if callback is not None:
            callback(trainer, rec)
        if log_every and rec["iteration"] % log_every == 0:
            log.info("tokenizer it %d loss %.4f recon %.4f commit %.4f codes %d",
                     rec["iteration"], rec["loss"], rec["recon"], rec["commit"], rec["used"])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        trainer.save(out_dir / "tokenizer.pt")
        write_log(history, out_dir / "tokenizer_log.csv")
        (out_dir / "tokenizer_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    return trainer, history


def write_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["iteration"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


@torch.no_grad()
def codebook_usage(tokenizer: VQKDTokenizer, images: torch.Tensor, batch_size: int = 64) -> float:
    """Fraction of codes assigned at least once over ``images``."""
    tokenizer.eval()
    used = torch.zeros(tokenizer.codebook.num_codes, dtype=torch.bool)
    for i in range(0, images.shape[0], batch_size):
        used[tokenizer.tokenize(images[i:i + batch_size]).reshape(-1)] = True
    return used.float().mean().item()


# --------------------------------------------------------------------------
# token IoU

def token_iou(a, b) -> float:
    """|A & B| / |A | B| over the distinct code indices of two token sequences."""
    sa = a.token_set() if isinstance(a, TokenSequence) else set(a)
    sb = b.token_set() if isinstance(b, TokenSequence) else set(b)
    union = sa | sb
    if not union:
        raise ValueError("token IoU of two empty sets is undefined")
    return len(sa & sb) / len(union)


def token_iou_matrix(sequences: Sequence, diagonal: float | None = None) -> list[list[float | None]]:
    """Pairwise token IoU; the diagonal holds ``diagonal`` (None renders as '-')."""
    if len(sequences) < 2:
        raise ValueError("need at least two token sequences")
    n = len(sequences)
    m: list[list[float | None]] = [[diagonal] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            m[i][j] = m[j][i] = token_iou(sequences[i], sequences[j])
    return m


def matrix_to_csv(matrix, names: Sequence[str], digits: int = 3) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([""] + list(names))
    for name, row in zip(names, matrix):
        writer.writerow([name] + ["-" if v is None else f"{v:.{digits}f}" for v in row])
    return buf.getvalue()

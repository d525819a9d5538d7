"""Masked image modeling: predict frozen-tokenizer codes at masked patch positions."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .optim import AdamW, check_finite, param_groups, warmup_poly_lr
from .vit import PatchSequence, ViTConfig, ViTEncoder, substitute_mask
from .vqkd import VQKDTokenizer, write_log

log = logging.getLogger(__name__)


@dataclass
class MaskPlan:
    flags: torch.Tensor  # N bool
    ratio: float

    @property
    def count(self) -> int:
        return int(self.flags.sum())


def mask_count(n_patches: int, ratio: float) -> int:
    # round first so 0.29 * 100 = 28.999... still floors to 29
    return math.floor(round(ratio * n_patches, 9))


def sample_mask(n_patches: int, ratio: float, generator: torch.Generator | None = None) -> MaskPlan:
    """Exactly floor(ratio * N) positions, uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    m = mask_count(n_patches, ratio)
    flags = torch.zeros(n_patches, dtype=torch.bool)
    flags[torch.randperm(n_patches, generator=generator)[:m]] = True
    return MaskPlan(flags, ratio)


def apply_mask(patches: PatchSequence, plan: MaskPlan, mask_embedding: torch.Tensor) -> PatchSequence:
    """Swap masked rows of *pre-position* patch embeddings for the shared mask embedding.

    Position embeddings are added afterwards to every row, masked or not.
    """
    tokens = patches.tokens
    flags = plan.flags
    if flags.shape[-1] != tokens.shape[-2]:
        raise ValueError(f"mask plan covers {flags.shape[-1]} patches, sequence has {tokens.shape[-2]}")
    if tokens.dim() == 3 and flags.dim() == 1:
        flags = flags.expand(tokens.shape[0], -1)
    squeeze = tokens.dim() == 2
    if squeeze:
        tokens, flags = tokens[None], flags[None]
    out = substitute_mask(tokens, flags, mask_embedding)
    return PatchSequence(out[0] if squeeze else out, patches.grid, plan.flags)


def mim_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions only.

    logits ... x N x K, targets ... x N, mask ... x N (bool).
    """
    mask = mask.bool()
    if not mask.any():
        raise ValueError("mask plan has no masked positions; loss is undefined")
    return F.cross_entropy(logits[mask], targets[mask])


class MIMModel(nn.Module):
    def __init__(self, encoder_config: ViTConfig, num_codes: int):
        super().__init__()
        self.encoder = ViTEncoder(encoder_config)
        self.mask_token = nn.Parameter(torch.zeros(encoder_config.embed_dim))
        self.head = nn.Linear(encoder_config.embed_dim, num_codes)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, images, mask):
        feats, _, _ = self.encoder.forward_features(images, mask=mask, mask_token=self.mask_token)
        return self.head(feats)


@dataclass
class PretrainConfig:
    encoder: ViTConfig = field(default_factory=lambda: ViTConfig(img_size=224, patch_size=16))
    mask_ratio: float = 0.4
    lr: float = 1.5e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    batch_size: int = 16
    steps: int = 500
    warmup: int = 20
    seed: int = 0
    checkpoint_every: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        if isinstance(d.get("encoder"), dict):
            d["encoder"] = ViTConfig(**d["encoder"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


PRETRAIN_PRESETS = {
    "toy": dict(encoder=dict(img_size=32, patch_size=8, embed_dim=64, depth=4, num_heads=4),
                lr=2e-3, weight_decay=0.05, batch_size=16, steps=500, warmup=20),
    # ViT-L/16 on 224x224, 40% masking; 1600 epochs of ImageNet-1k at batch 2048
    "large": dict(encoder=dict(img_size=224, patch_size=16, embed_dim=1024, depth=24, num_heads=16),
                  lr=1.5e-3, weight_decay=0.05, betas=(0.9, 0.98), batch_size=2048,
                  steps=1600 * 1281167 // 2048, warmup=10 * 1281167 // 2048),
}


def pretrain_config(name: str, **overrides) -> PretrainConfig:
    return PretrainConfig.from_dict({**PRETRAIN_PRESETS[name], **overrides})


class MIMTrainer:
    def __init__(self, config: PretrainConfig, tokenizer: VQKDTokenizer):
        if tokenizer.grid != config.encoder.grid:
            raise ValueError(f"tokenizer grid {tokenizer.grid} != encoder grid {config.encoder.grid}")
        self.config = config
        self.tokenizer = tokenizer.eval().requires_grad_(False)
        torch.manual_seed(config.seed)
        self.model = MIMModel(config.encoder, tokenizer.codebook.num_codes)
        self.optimizer = AdamW(param_groups(self.model, config.weight_decay), lr=config.lr,
                               betas=config.betas)
        self.generator = torch.Generator().manual_seed(config.seed + 1)
        self.iteration = 0

    def sample_masks(self, batch: int) -> torch.Tensor:
        n = self.config.encoder.grid[0] * self.config.encoder.grid[1]
        return torch.stack([sample_mask(n, self.config.mask_ratio, self.generator).flags for _ in range(batch)])

    def step(self, images) -> dict:
        cfg = self.config
        self.iteration += 1
        lr = warmup_poly_lr(self.iteration, cfg.lr, cfg.steps, cfg.warmup)
        self.optimizer.set_lr(lr)
        with torch.no_grad():
            targets = self.tokenizer.tokenize(images)
        mask = self.sample_masks(images.shape[0])
        self.model.train()
        loss = mim_loss(self.model(images, mask), targets, mask)
        check_finite(loss, f"pretrain step {self.iteration}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        return dict(iteration=self.iteration, loss=loss.item(), lr=lr)

    def save(self, path) -> None:
        save_encoder(self.model.encoder, path, extra={"mask_token": self.model.mask_token.detach(),
                                                        "head": self.model.head.state_dict()})


def pretrain_step(trainer: MIMTrainer, images) -> dict:
    return trainer.step(images)


def save_encoder(encoder: ViTEncoder, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": "vit_encoder", "config": encoder.config.to_dict(),
                "state_dict": encoder.state_dict(), **(extra or {})}, path)


def load_encoder_state(path) -> tuple[ViTConfig, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "vit_encoder":
        raise ValueError(f"{path} is not a ViT encoder checkpoint")
    return ViTConfig(**ckpt["config"]), ckpt["state_dict"]


def pretrain(config: PretrainConfig, tokenizer: VQKDTokenizer, images: torch.Tensor,
             out_dir=None, log_every: int = 50) -> tuple[MIMTrainer, list[dict]]:
    trainer = MIMTrainer(config, tokenizer)
    g = torch.Generator().manual_seed(config.seed + 2)
    out_dir = Path(out_dir) if out_dir is not None else None
    history = []
    for _ in range(config.steps):
        idx = torch.randint(images.shape[0], (min(config.batch_size, images.shape[0]),), generator=g)
        rec = trainer.step(images[idx])
        history.append(rec)
        if log_every and rec["iteration"] % log_every == 0:
            log.info("pretrain it %d loss %.4f lr %.2e", rec["iteration"], rec["loss"], rec["lr"])
        if out_dir is not None and config.checkpoint_every and rec["iteration"] % config.checkpoint_every == 0:
            trainer.save(out_dir / f"encoder_it{rec['iteration']:06d}.pt")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        trainer.save(out_dir / "encoder.pt")
        write_log(history, out_dir / "pretrain_log.csv")
        (out_dir / "pretrain_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    return trainer, history

"""Segmentation fine-tuning: run config, presets, training loop, checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .dataset import AugmentConfig, DatasetManifest, augment, sample_rng, to_tensor
from .dcn import DCNConfig
from .evaluation import evaluate_dataset
from .optim import AdamW, check_finite, param_groups, warmup_poly_lr
from .upernet import Segmentor, build_segmentor, seg_loss
from .vit import ViTConfig, load_pos_compatible

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    backbone: str = "vit"
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    iterations: int = 2000
    warmup: int = 50
    poly_power: float = 0.9
    crop: int = 64
    batch_size: int = 8
    seed: int = 0
    aux: bool = True
    aux_weight: float = 0.4
    decoder_channels: int = 64
    dropout: float = 0.0
    vit: dict = field(default_factory=lambda: dict(img_size=64, patch_size=8, embed_dim=64, depth=4, num_heads=4))
    dcn: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    eval_interval: int = 250
    eval_mode: str = "slide"
    eval_stride: int | None = None
    pretrained: str | None = None
    deterministic: bool = True
    cache_samples: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.iterations <= self.warmup:
            raise ValueError("iterations must exceed warmup")
        if self.backbone not in ("vit", "dcn"):
            raise ValueError(f"backbone must be 'vit' or 'dcn', got {self.backbone!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        d = json.loads(Path(path).read_text())
        if "preset" in d:
            base = asdict(preset(d.pop("preset")))
            d = {**base, **d}
        return cls.from_dict({**d, **{k: v for k, v in overrides.items() if v is not None}})

    def to_dict(self) -> dict:
        return asdict(self)

    def vit_config(self) -> ViTConfig:
        return ViTConfig(**{**self.vit, "img_size": self.crop})

    def dcn_config(self) -> DCNConfig:
        return DCNConfig(**self.dcn)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(**self.augment)


TOY_AUGMENT = dict(scale_range=(1.0, 1.0), flip_prob=0.5, brightness=0.0, contrast=0.0, saturation=0.0)

PRESETS = {
    "toy_vit": dict(backbone="vit", lr=1e-3, weight_decay=0.01, iterations=2000, warmup=50, crop=64,
                    batch_size=8, decoder_channels=64, dropout=0.0, augment=TOY_AUGMENT),
    "toy_dcn": dict(backbone="dcn", lr=1e-3, weight_decay=0.01, iterations=2000, warmup=50, crop=64,
                    batch_size=8, decoder_channels=64, dropout=0.0, augment=TOY_AUGMENT,
                    dcn=dict(channels=(32, 64, 128, 256), depths=(1, 1, 2, 1), groups=(2, 4, 8, 16))),
    # at-scale recipes on FoodSeg103; batch size is not given by the source recipe
    "beit_v2_large": dict(backbone="vit", lr=3e-5, weight_decay=0.05, betas=(0.9, 0.999),
                          iterations=160000, warmup=1500, crop=512, batch_size=8,
                          decoder_channels=1024, dropout=0.1,
                          vit=dict(patch_size=16, embed_dim=1024, depth=24, num_heads=16, drop_path=0.0),
                          eval_interval=16000, cache_samples=False, deterministic=False),
    "internimage_b": dict(backbone="dcn", lr=6e-5, weight_decay=0.0, betas=(0.9, 0.999),
                          iterations=160000, warmup=1500, crop=512, batch_size=8,
                          decoder_channels=512, dropout=0.1,
                          dcn=dict(channels=(112, 224, 448, 896), depths=(4, 4, 21, 4),
                                   groups=(7, 14, 28, 56), drop_path=0.4),
                          eval_interval=16000, cache_samples=False, deterministic=False),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig.from_dict({**PRESETS[name], **overrides})


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def build_model(config: TrainConfig, num_classes: int) -> Segmentor:
    return build_segmentor(config.backbone, num_classes,
                           vit=config.vit_config() if config.backbone == "vit" else None,
                           dcn=config.dcn_config() if config.backbone == "dcn" else None,
                           channels=config.decoder_channels, aux=config.aux, dropout=config.dropout)


def load_pretrained(model: Segmentor, path) -> None:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    kind = ckpt.get("kind")
    if kind == "vit_encoder":
        if not hasattr(model.backbone, "encoder"):
            raise ValueError("ViT encoder checkpoint given for a non-ViT backbone")
        load_pos_compatible(model.backbone.encoder, ckpt["state_dict"])
    elif kind == "dcn_backbone":
        model.backbone.load_state_dict(ckpt["state_dict"])
    elif kind == "segmentor":
        model.load_state_dict(ckpt["state_dict"])
    else:
        raise ValueError(f"{path}: unsupported checkpoint kind {kind!r}")


def save_segmentor(model: Segmentor, config: TrainConfig, path, **meta) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": "segmentor", "config": config.to_dict(), "num_classes": model.num_classes,
                "state_dict": model.state_dict(), **meta}, path)


def load_segmentor(path) -> tuple[Segmentor, TrainConfig]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "segmentor":
        raise ValueError(f"{path} is not a segmentation checkpoint")
    config = TrainConfig.from_dict(ckpt["config"])
    model = build_model(config, ckpt["num_classes"])
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, config


def run_manifest(config: TrainConfig, train: DatasetManifest | None = None,
                 val: DatasetManifest | None = None) -> dict:
    """Every resolved hyperparameter plus dataset and environment facts."""
    return {
        "config": config.to_dict(),
        "schedule": {"kind": "linear warmup + poly", "warmup": config.warmup, "power": config.poly_power},
        "optimizer": {"kind": "AdamW", "lr": config.lr, "weight_decay": config.weight_decay,
                      "betas": list(config.betas), "eps": 1e-8},
        "eval": {"mode": config.eval_mode, "crop": config.crop,
                 "stride": config.eval_stride or (2 * config.crop) // 3},
        "data": None if train is None else {
            "root": str(train.root), "train_split": train.split, "train_images": len(train),
            "val_split": None if val is None else val.split, "val_images": None if val is None else len(val),
            "num_classes": train.num_classes},
        "env": {"torch": torch.__version__, "python": platform.python_version()},
    }


class BatchSource:
    """Seeded batches of augmented samples; iteration ``t`` is reproducible on its own."""

    def __init__(self, manifest: DatasetManifest, config: TrainConfig):
        self.manifest = manifest
        self.config = config
        self.aug = config.augment_config()
        self.cache = {sid: manifest.load_sample(sid) for sid in manifest.ids} if config.cache_samples else None

    def sample(self, sid):
        return self.cache[sid] if self.cache is not None else self.manifest.load_sample(sid)

    def batch(self, t: int):
        cfg = self.config
        n = len(self.manifest)
        rng = sample_rng(cfg.seed, t)
        idx = rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
        images, masks = [], []
        for j, i in enumerate(idx):
            s = augment(self.sample(self.manifest.ids[i]), cfg.crop, sample_rng(cfg.seed, t, j), self.aug)
            images.append(to_tensor(s.image))
            masks.append(torch.from_numpy(s.mask))
        return torch.stack(images), torch.stack(masks).long()


@dataclass
class FinetuneResult:
    model: Segmentor
    history: list
    best_miou: float
    best_iteration: int


def train_step(model: Segmentor, optimizer: AdamW, images, masks, config: TrainConfig, t: int) -> tuple[float, float]:
    lr = warmup_poly_lr(t, config.lr, config.iterations, config.warmup, config.poly_power)
    optimizer.set_lr(lr)
    model.train()
    logits, aux = model(images, with_aux=True)
    loss = seg_loss(logits, masks, aux, config.aux_weight if config.aux else 0.0)
    check_finite(loss, f"finetune iteration {t}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item(), lr


def finetune(config: TrainConfig, train: DatasetManifest, val: DatasetManifest | None = None,
             out_dir=None, iterations: int | None = None, log_every: int = 50) -> FinetuneResult:
    """Train a segmentor; evaluates on ``val`` every ``eval_interval`` and keeps the best checkpoint.

    ``iterations`` truncates the run without changing the schedule.
    """
    set_determinism(config.seed, config.deterministic)
    if val is not None and val.num_classes != train.num_classes:
        raise ValueError(f"train/val class counts differ: {train.num_classes} vs {val.num_classes}")
    model = build_model(config, train.num_classes)
    if config.pretrained:
        load_pretrained(model, config.pretrained)
    if model.num_classes != train.num_classes:
        raise ValueError("segmentation head does not match dataset class count")
    optimizer = AdamW(param_groups(model, config.weight_decay), lr=config.lr, betas=config.betas)
    source = BatchSource(train, config)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run_manifest.json").write_text(json.dumps(run_manifest(config, train, val), indent=2) + "\n")
        log_fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(["iteration", "loss", "lr", "val_miou"])
    else:
        log_fh = writer = None

    total = iterations or config.iterations
    history = []
    best, best_it = float("-inf"), 0
    try:
        for t in range(1, total + 1):
            images, masks = source.batch(t)
            loss, lr = train_step(model, optimizer, images, masks, config, t)
            rec = {"iteration": t, "loss": loss, "lr": lr, "val_miou": None}
            if val is not None and (t % config.eval_interval == 0 or t == total):
                report = evaluate_dataset(model, val, config.crop, config.eval_stride, config.eval_mode,
                                          norm=config.augment_config())
                rec["val_miou"] = report.miou
                if report.miou > best:
                    best, best_it = report.miou, t
                    if out_dir is not None:
                        save_segmentor(model, config, out_dir / "best.pt", iteration=t, miou=report.miou)
                log.info("it %d val mIoU %.4f (best %.4f @ %d)", t, report.miou, best, best_it)
            history.append(rec)
            if writer is not None:
                writer.writerow([t, f"{loss:.8f}", f"{lr:.10g}",
                                 "" if rec["val_miou"] is None else f"{rec['val_miou']:.6f}"])
            if log_every and t % log_every == 0:
                log.info("it %d loss %.4f lr %.3e", t, loss, lr)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_segmentor(model, config, out_dir / "last.pt", iteration=total)
    return FinetuneResult(model, history, best if val is not None else float("nan"), best_it)

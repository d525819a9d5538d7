"""Image/mask datasets in the FoodSeg103 directory convention.

Layout::

    root/
      dataset.json              {"num_classes": C, "class_names": [...]}
      images/{train,test}/<id>.<ext>
      masks/{train,test}/<id>.png   single-channel, pixel value = class id

Class id 0 is background.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

DESCRIPTOR = "dataset.json"
IMAGE_EXTS = (".jpg", ".jpeg", ".png", ".bmp")
BACKGROUND = 0


class DatasetError(ValueError):
    pass


@dataclass
class ImageSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W int64 class ids
    id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape[:2]:
            raise DatasetError(
                f"sample {self.id!r}: image {self.image.shape[:2]} and mask "
                f"{self.mask.shape[:2]} differ in size")


@dataclass
class DatasetManifest:
    root: Path
    split: str
    num_classes: int
    class_names: list[str]
    ids: list[str] = field(default_factory=list)
    image_paths: dict[str, Path] = field(default_factory=dict)
    mask_paths: dict[str, Path] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[ImageSample]:
        for sid in self.ids:
            yield self.load_sample(sid)

    def load_sample(self, sid: str) -> ImageSample:
        image = read_image(self.image_paths[sid])
        mask = read_mask(self.mask_paths[sid])
        return ImageSample(image=image, mask=mask, id=sid)


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise DatasetError(f"{path}: mask must be single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def read_descriptor(root: Path) -> dict:
    path = Path(root) / DESCRIPTOR
    if not path.is_file():
        raise DatasetError(f"dataset descriptor not found: {path}")
    desc = json.loads(path.read_text())
    if "num_classes" not in desc:
        raise DatasetError(f"{path}: missing 'num_classes'")
    names = desc.get("class_names") or [f"class_{i}" for i in range(desc["num_classes"])]
    if len(names) != desc["num_classes"]:
        raise DatasetError(f"{path}: {len(names)} class names for {desc['num_classes']} classes")
    desc["class_names"] = list(names)
    return desc


def load_dataset(root, split: str, check_values: bool = True) -> DatasetManifest:
    """Index one split of a dataset and validate every image/mask pair.

    With ``check_values`` the masks are decoded to reject ids outside
    ``[0, num_classes)``; sizes are always compared from file headers.
    """
    root = Path(root)
    image_dir = root / "images" / split
    mask_dir = root / "masks" / split
    if not image_dir.is_dir():
        raise DatasetError(f"image directory not found: {image_dir}")
    if not mask_dir.is_dir():
        raise DatasetError(f"mask directory not found: {mask_dir}")
    desc = read_descriptor(root)
    num_classes = int(desc["num_classes"])

    masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() == ".png"}
    manifest = DatasetManifest(root=root, split=split, num_classes=num_classes,
                               class_names=desc["class_names"])
    for path in sorted(image_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTS:
            continue
        sid = path.stem
        if sid in manifest.image_paths:
            raise DatasetError(f"duplicate image id {sid!r} in {image_dir}")
        if sid not in masks:
            raise DatasetError(f"missing mask for image {sid!r}")
        with Image.open(path) as im, Image.open(masks[sid]) as mk:
            if im.size != mk.size:
                raise DatasetError(f"size mismatch for {sid!r}: image {im.size}, mask {mk.size}")
        if check_values:
            top = int(read_mask(masks[sid]).max(initial=0))
            if top >= num_classes:
                raise DatasetError(
                    f"mask {sid!r} contains class id {top} >= num_classes {num_classes}")
        manifest.ids.append(sid)
        manifest.image_paths[sid] = path
        manifest.mask_paths[sid] = masks[sid]
    manifest.ids.sort()
    return manifest


def check_disjoint(a: DatasetManifest, b: DatasetManifest) -> None:
    shared = set(a.ids) & set(b.ids)
    if shared:
        raise DatasetError(f"splits {a.split!r} and {b.split!r} share ids: {sorted(shared)[:5]}")


# --------------------------------------------------------------------------
# class frequency / long tail

@dataclass
class ClassFrequencyReport:
    class_names: list[str]
    train_images: np.ndarray
    test_images: np.ndarray
    train_pixels: np.ndarray
    n_train: int
    n_test: int
    threshold: int = 10

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def long_tail(self) -> np.ndarray:
        return self.train_images <= self.threshold

    def rows(self) -> list[dict]:
        return [
            dict(class_id=c, name=self.class_names[c],
                 train_images=int(self.train_images[c]),
                 test_images=int(self.test_images[c]),
                 train_pixels=int(self.train_pixels[c]),
                 long_tail=int(self.long_tail[c]))
            for c in range(self.num_classes)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.rows()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()

    def summary(self, include_background: bool = False) -> str:
        start = 0 if include_background else 1
        tail = [c for c in range(start, self.num_classes) if self.long_tail[c]]
        lines = [f"train images: {self.n_train}, test images: {self.n_test}",
                 f"long-tail classes (train images <= {self.threshold}): {len(tail)}"]
        for c in sorted(tail, key=lambda c: (self.train_images[c], c)):
            lines.append(f"  {c:4d} {self.class_names[c]:<24s} "
                         f"train={self.train_images[c]} test={self.test_images[c]}")
        return "\n".join(lines)


def _histogram(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    n = manifest.num_classes
    images = np.zeros(n, dtype=np.int64)
    pixels = np.zeros(n, dtype=np.int64)
    for sid in manifest.ids:
        counts = np.bincount(read_mask(manifest.mask_paths[sid]).ravel(), minlength=n)
        images += counts > 0
        pixels += counts
    return images, pixels


def class_frequency_report(manifest: DatasetManifest, companion: DatasetManifest,
                           threshold: int = 10) -> ClassFrequencyReport:
    """Per-class image and pixel counts for a train manifest and its test companion."""
    if manifest.num_classes != companion.num_classes:
        raise DatasetError(
            f"class count mismatch: {manifest.num_classes} vs {companion.num_classes}")
    train_images, train_pixels = _histogram(manifest)
    test_images, _ = _histogram(companion)
    return ClassFrequencyReport(
        class_names=manifest.class_names, train_images=train_images,
        test_images=test_images, train_pixels=train_pixels,
        n_train=len(manifest), n_test=len(companion), threshold=threshold)


# --------------------------------------------------------------------------
# synthetic data

def _class_style(n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean colour and texture frequency per class; fixed, not seed-dependent."""
    hues = np.linspace(0.0, 1.0, n_classes, endpoint=False)
    means = np.stack([0.5 + 0.3 * np.cos(2 * np.pi * (hues + k / 3)) for k in range(3)], axis=1)
    means[0] = (0.45, 0.45, 0.45)
    freqs = 0.15 + 0.6 * ((np.arange(n_classes) * 0.618) % 1.0)
    return means.astype(np.float32), freqs.astype(np.float32)


def _paint_region(image, region, cls, means, freqs, rng, yy, xx):
    # noisy colour + class-specific stripe texture; noise is wide enough that
    # neighbouring classes overlap in colour
    angle = rng.uniform(0, np.pi)
    stripes = 0.08 * np.sin(freqs[cls] * (np.cos(angle) * xx + np.sin(angle) * yy))
    color = means[cls] + rng.normal(0, 0.05, size=3)
    noise = rng.normal(0, 0.08, size=image.shape)
    patch = color[None, None, :] + stripes[..., None] + noise
    image[region] = patch[region]


def synth_sample(rng: np.random.Generator, n_classes: int, size: int,
                 max_shapes: int = 4) -> tuple[np.ndarray, np.ndarray]:
    means, freqs = _class_style(n_classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    image = np.zeros((size, size, 3), dtype=np.float32)
    mask = np.zeros((size, size), dtype=np.int64)
    _paint_region(image, np.ones((size, size), bool), BACKGROUND, means, freqs, rng, yy, xx)
    for _ in range(int(rng.integers(1, max_shapes + 1))):
        cls = int(rng.integers(1, n_classes))
        kind = rng.integers(0, 3)
        cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
        if kind == 0:  # disk
            r = rng.uniform(0.12, 0.3) * size
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif kind == 1:  # rectangle
            hh, hw = rng.uniform(0.1, 0.3, size=2) * size
            region = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        else:  # ellipse-bounded texture patch
            ry, rx = rng.uniform(0.12, 0.3, size=2) * size
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        _paint_region(image, region, cls, means, freqs, rng, yy, xx)
        mask[region] = cls
    return np.clip(image, 0.0, 1.0), mask


def _save_png(array: np.ndarray, path: Path, mode: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array, mode=mode).save(path, format="PNG", optimize=False)


def write_sample(root: Path, split: str, sid: str, image: np.ndarray, mask: np.ndarray) -> None:
    _save_png((image * 255.0 + 0.5).astype(np.uint8), root / "images" / split / f"{sid}.png", "RGB")
    _save_png(mask.astype(np.uint8), root / "masks" / split / f"{sid}.png", "L")


def write_descriptor(root: Path, num_classes: int, class_names: Sequence[str] | None = None) -> None:
    root.mkdir(parents=True, exist_ok=True)
    names = list(class_names) if class_names else (
        ["background"] + [f"class_{i}" for i in range(1, num_classes)])
    desc = {"num_classes": num_classes, "class_names": names}
    (root / DESCRIPTOR).write_text(json.dumps(desc, indent=2) + "\n")


def generate_toy_dataset(root, seed: int, n_images: int, n_classes: int, size: int = 64,
                         n_test: int | None = None) -> DatasetManifest:
    """Write a deterministic synthetic segmentation dataset and return its train manifest.

    Each image is a textured background with 1-4 disks, rectangles or
    ellipse patches; later shapes overwrite earlier ones in both image and
    mask. ``n_test`` defaults to ``n_images // 4``.
    """
    if n_classes < 2:
        raise DatasetError("n_classes must be >= 2 (background + at least one class)")
    if n_classes > 256:
        raise DatasetError("masks are 8-bit; n_classes must be <= 256")
    if size < 32:
        raise DatasetError("size must be >= 32")
    root = Path(root)
    n_test = n_images // 4 if n_test is None else n_test
    write_descriptor(root, n_classes)
    rng = np.random.default_rng(seed)
    for split, count in (("train", n_images), ("test", n_test)):
        (root / "images" / split).mkdir(parents=True, exist_ok=True)
        (root / "masks" / split).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            image, mask = synth_sample(rng, n_classes, size)
            write_sample(root, split, f"{split}_{i:05d}", image, mask)
    return load_dataset(root, "train")


FOLDER_CLASSES = ("ribs", "fillet", "chop", "pudding", "kelp", "rice", "salad", "bread")


def generate_toy_image_folder(root, seed: int, n_per_class: int, n_classes: int = 3,
                              size: int = 32) -> list[tuple[Path, int]]:
    """Classification-style folder ``root/<class>/<n>.png`` for tokenizer training.

    Every class draws from its own pair of colours and texture scale, and
    images within a class vary in layout.
    """
    if not 2 <= n_classes <= len(FOLDER_CLASSES):
        raise DatasetError(f"n_classes must be in [2, {len(FOLDER_CLASSES)}]")
    root = Path(root)
    rng = np.random.default_rng(seed)
    style_means, style_freqs = _class_style(2 * n_classes + 1)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    for c in range(n_classes):
        name = FOLDER_CLASSES[c]
        a, b = 1 + 2 * c, 2 + 2 * c
        for i in range(n_per_class):
            image = np.zeros((size, size, 3), dtype=np.float32)
            _paint_region(image, np.ones((size, size), bool), a, style_means, style_freqs, rng, yy, xx)
            for _ in range(int(rng.integers(1, 4))):
                cy, cx = rng.uniform(0, size, size=2)
                r = rng.uniform(0.15, 0.35) * size
                region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                _paint_region(image, region, b, style_means, style_freqs, rng, yy, xx)
            path = root / name / f"{i:04d}.png"
            _save_png((np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8), path, "RGB")
    return load_image_folder(root)


def load_image_folder(root) -> list[tuple[Path, int]]:
    """Plain ``root/<class>/<image>`` reader; labels follow sorted class-folder order."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"image folder not found: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    items = []
    if classes:
        for label, name in enumerate(classes):
            for path in sorted((root / name).iterdir()):
                if path.suffix.lower() in IMAGE_EXTS:
                    items.append((path, label))
    else:
        items = [(p, 0) for p in sorted(root.iterdir()) if p.suffix.lower() in IMAGE_EXTS]
    if not items:
        raise DatasetError(f"no images under {root}")
    return items


# --------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentConfig:
    scale_range: tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(scale_range=(1.0, 1.0), flip_prob=0.0, brightness=0.0, contrast=0.0,
                   saturation=0.0, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))


def normalize(image: np.ndarray, config: AugmentConfig) -> np.ndarray:
    mean = np.asarray(config.mean, dtype=np.float32)
    std = np.asarray(config.std, dtype=np.float32)
    return ((image - mean) / std).astype(np.float32)


def _resize(image: np.ndarray, mask: np.ndarray, h: int, w: int):
    img = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    img = F.interpolate(img, size=(h, w), mode="bilinear", align_corners=False)
    msk = torch.from_numpy(np.ascontiguousarray(mask))[None, None].float()
    msk = F.interpolate(msk, size=(h, w), mode="nearest")
    return img[0].permute(1, 2, 0).numpy(), msk[0, 0].long().numpy()


def _jitter(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if config.brightness:
        image = image * rng.uniform(1 - config.brightness, 1 + config.brightness)
    if config.contrast:
        mean = image.mean()
        image = (image - mean) * rng.uniform(1 - config.contrast, 1 + config.contrast) + mean
    if config.saturation:
        gray = image.mean(axis=2, keepdims=True)
        image = (image - gray) * rng.uniform(1 - config.saturation, 1 + config.saturation) + gray
    return np.clip(image, 0.0, 1.0)


def augment(sample: ImageSample, crop: int, rng: np.random.Generator,
            config: AugmentConfig | None = None) -> ImageSample:
    """Scale jitter, random crop (background padding), flip, photometric jitter, normalize.

    The mask only sees the geometric steps and is resampled nearest-neighbour.
    """
    config = config or AugmentConfig()
    image, mask = sample.image.astype(np.float32), sample.mask
    h, w = mask.shape

    lo, hi = config.scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    if scale != 1.0:
        nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        image, mask = _resize(image, mask, nh, nw)
        h, w = nh, nw

    ph, pw = max(crop - h, 0), max(crop - w, 0)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
        mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=BACKGROUND)
        h, w = mask.shape
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    image = image[y0:y0 + crop, x0:x0 + crop]
    mask = mask[y0:y0 + crop, x0:x0 + crop]

    if config.flip_prob and rng.random() < config.flip_prob:
        image, mask = image[:, ::-1], mask[:, ::-1]

    image = _jitter(image, config, rng)
    image = normalize(image, config)
    return ImageSample(image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask), id=sample.id)


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator per (seed, iteration, index); safe for parallel loaders."""
    return np.random.default_rng([seed, *keys])


def to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()


def load_folder_tensor(paths: Sequence[Path], size: int, config: AugmentConfig | None = None) -> torch.Tensor:
    """Read images, resize to ``size``x``size`` and normalize into an N x 3 x size x size tensor."""
    config = config or AugmentConfig()
    out = []
    for path in paths:
        image = read_image(path)
        if image.shape[:2] != (size, size):
            image, _ = _resize(image, np.zeros(image.shape[:2], np.int64), size, size)
        out.append(to_tensor(normalize(image, config)))
    return torch.stack(out)


__all__ = [
    "ImageSample", "DatasetManifest", "ClassFrequencyReport", "DatasetError", "AugmentConfig",
    "load_dataset", "class_frequency_report", "generate_toy_dataset", "augment",
    "generate_toy_image_folder", "load_image_folder", "sample_rng",
]

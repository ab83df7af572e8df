"""Datasets: synthetic lesion images with ground-truth masks, image folders,
and crop/flip augmentation that can be replayed onto any aligned map."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".webp"}

LESION_FAMILIES = ("ellipse", "crescent", "speckled", "ring", "rectangle", "cross", "triangle", "striped")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationRecord:
    """Crop window (x, y, w, h) in canonical pixels, flip flag, output side length."""

    crop_box: tuple[int, int, int, int]
    flip: bool
    output_size: int

    def to_dict(self):
        return {"crop_box": list(self.crop_box), "flip": self.flip, "output_size": self.output_size}


@dataclass
class ImageDataset:
    images: torch.Tensor  # M x H x W x 3, float32 in [0, 1]
    labels: torch.Tensor  # M, int64
    image_ids: list[str]
    num_classes: int
    lesion_masks: Optional[torch.Tensor] = None  # M x H x W bool
    class_names: list[str] = field(default_factory=list)
    mean: Optional[torch.Tensor] = None
    std: Optional[torch.Tensor] = None

    def __post_init__(self):
        if len(self.image_ids) != len(set(self.image_ids)):
            raise DatasetError("image ids must be unique")
        if self.images.shape[0] != len(self.image_ids) or self.labels.shape[0] != len(self.image_ids):
            raise DatasetError("images, labels and ids disagree in length")
        if self.mean is None:
            flat = self.images.reshape(-1, self.images.shape[-1]).double()
            self.mean = flat.mean(0).float()
            self.std = flat.std(0).clamp(min=1e-3).float()
        if not self.class_names:
            self.class_names = [str(k) for k in range(self.num_classes)]

    def __len__(self):
        return len(self.image_ids)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def normalize(self, imgs: torch.Tensor) -> torch.Tensor:
        return (imgs - self.mean) / self.std

    def subset(self, indices: Sequence[int]) -> "ImageDataset":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return ImageDataset(
            images=self.images[idx], labels=self.labels[idx],
            image_ids=[self.image_ids[i] for i in idx.tolist()], num_classes=self.num_classes,
            lesion_masks=None if self.lesion_masks is None else self.lesion_masks[idx],
            class_names=list(self.class_names), mean=self.mean, std=self.std)

    def split(self, train_fraction: float, seed: int = 0) -> tuple["ImageDataset", "ImageDataset"]:
        train_idx, val_idx = hash_split(self.image_ids, train_fraction, seed)
        return self.subset(train_idx), self.subset(val_idx)


def hash_split(image_ids: Sequence[str], train_fraction: float, seed: int = 0):
    """Deterministic split: rank ids by sha256(seed:id), first round(f*n) go to train."""
    if not 0.0 <= train_fraction <= 1.0:
        raise DatasetError(f"train fraction must be in [0, 1], got {train_fraction}")
    keyed = sorted(range(len(image_ids)),
                   key=lambda i: hashlib.sha256(f"{seed}:{image_ids[i]}".encode()).hexdigest())
    n_train = int(round(train_fraction * len(image_ids)))
    return sorted(keyed[:n_train]), sorted(keyed[n_train:])


# --------------------------------------------------------------------------
# augmentation

def replay_augmentation(arr: torch.Tensor, record: AugmentationRecord) -> torch.Tensor:
    """Apply a recorded crop -> bilinear resize -> optional h-flip to an H x W x C tensor."""
    x, y, w, h = record.crop_box
    H, W = arr.shape[0], arr.shape[1]
    if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > W or y + h > H:
        raise ValueError(f"crop box {record.crop_box} outside a {W}x{H} image")
    out = arr[y:y + h, x:x + w]
    s = record.output_size
    if (h, w) != (s, s):
        chw = out.permute(2, 0, 1).unsqueeze(0)
        chw = chw if chw.is_floating_point() else chw.float()
        out = F.interpolate(chw, size=(s, s), mode="bilinear", align_corners=False)[0].permute(1, 2, 0)
    if record.flip:
        out = torch.flip(out, dims=[1])
    return out.contiguous()


def random_resized_crop_box(height: int, width: int, rng: np.random.Generator,
                            scale=(0.2, 1.0), ratio=(3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            y = int(rng.integers(0, height - h + 1))
            x = int(rng.integers(0, width - w + 1))
            return x, y, w, h
    # fallback: central crop at the nearest admissible aspect ratio
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        w, h = width, height
    return (width - w) // 2, (height - h) // 2, w, h


def center_crop_box(height: int, width: int, crop_pct: float = 1.0) -> tuple[int, int, int, int]:
    side = int(round(min(height, width) * crop_pct))
    return (width - side) // 2, (height - side) // 2, side, side


def augment(image: torch.Tensor, policy: str, rng: Optional[np.random.Generator] = None,
            output_size: Optional[int] = None, scale=(0.2, 1.0), flip_prob: float = 0.5,
            force_flip: Optional[bool] = None, eval_crop_pct: float = 1.0):
    """Return (augmented image, record).

    ``train``: random resized crop over ``scale`` of the area, then h-flip with
    probability ``flip_prob``.  ``eval``: center crop (deterministic).
    """
    H, W = image.shape[0], image.shape[1]
    size = output_size or H
    if policy == "train":
        if rng is None:
            raise ValueError("train augmentation needs an rng")
        box = random_resized_crop_box(H, W, rng, scale)
        flip = bool(rng.random() < flip_prob) if force_flip is None else force_flip
    elif policy == "eval":
        box = center_crop_box(H, W, eval_crop_pct)
        flip = bool(force_flip)
    else:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    record = AugmentationRecord(box, flip, size)
    return replay_augmentation(image, record), record


# --------------------------------------------------------------------------
# synthetic lesion corpus

def _value_noise(rng: np.random.Generator, size: int, octaves=(4, 8, 16)) -> np.ndarray:
    total = np.zeros((size, size))
    amp, norm = 1.0, 0.0
    for cells in octaves:
        grid = torch.from_numpy(rng.random((1, 1, cells + 1, cells + 1)))
        up = F.interpolate(grid, size=(size, size), mode="bicubic", align_corners=True)[0, 0].numpy()
        total += amp * up
        norm += amp
        amp *= 0.5
    return total / norm


def _lesion_shape(family: str, rng: np.random.Generator, size: int):
    """Binary mask of one lesion plus a texture multiplier in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    r = rng.uniform(0.10, 0.16) * size
    cx = rng.uniform(r * 1.3, size - r * 1.3)
    cy = rng.uniform(r * 1.3, size - r * 1.3)
    th = rng.uniform(0, np.pi)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    texture = np.ones((size, size))
    if family in ("ellipse", "speckled", "striped"):
        e = rng.uniform(0.65, 1.0)
        mask = (u / r) ** 2 + (v / (r * e)) ** 2 <= 1.0
        if family == "speckled":
            texture = (rng.random((size, size)) < 0.45).astype(float) * 0.9 + 0.1
        elif family == "striped":
            period = max(r / 2.2, 2.0)
            texture = 0.15 + 0.85 * (np.sin(2 * np.pi * u / period) > 0)
    elif family == "crescent":
        outer = u ** 2 + v ** 2 <= r ** 2
        inner = (u - 0.55 * r) ** 2 + v ** 2 <= (0.8 * r) ** 2
        mask = outer & ~inner
    elif family == "ring":
        d = np.sqrt(u ** 2 + v ** 2)
        mask = (d <= r) & (d >= 0.5 * r)
    elif family == "rectangle":
        mask = (np.abs(u) <= 0.9 * r) & (np.abs(v) <= 0.6 * r)
    elif family == "cross":
        arm = 0.32 * r
        mask = ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))
    elif family == "triangle":
        # equilateral triangle with circumradius r
        a = np.array([np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3])
        pts = np.stack([r * np.cos(a), r * np.sin(a)], 1)
        mask = np.ones_like(u, dtype=bool)
        for i in range(3):
            p, q = pts[i], pts[(i + 1) % 3]
            mask &= (q[0] - p[0]) * (v - p[1]) - (q[1] - p[1]) * (u - p[0]) >= 0
    else:
        raise ValueError(family)
    return mask, texture


def generate_synthetic_lesion_dataset(n_samples: int, n_classes: int = 4, image_size: int = 64,
                                      seed: int = 0) -> ImageDataset:
    """Noise-textured backgrounds with one lesion whose shape family is the label.

    Background statistics do not depend on the class; lesion colour and
    contrast are drawn from one shared distribution, so only the lesion's
    shape/texture carries label information.
    """
    if not 1 <= n_classes <= len(LESION_FAMILIES):
        raise ValueError(f"n_classes must be in [1, {len(LESION_FAMILIES)}]")
    rng = np.random.default_rng(seed)
    images = np.zeros((n_samples, image_size, image_size, 3), dtype=np.float32)
    masks = np.zeros((n_samples, image_size, image_size), dtype=bool)
    labels = np.zeros(n_samples, dtype=np.int64)
    total = image_size * image_size
    for i in range(n_samples):
        label = int(rng.integers(n_classes))
        tissue = np.array([0.80, 0.55, 0.50]) + rng.normal(0, 0.05, 3)
        bg = _value_noise(rng, image_size)
        img = tissue[None, None, :] * (0.75 + 0.5 * bg[..., None])
        img += rng.normal(0, 0.02, img.shape)
        while True:
            mask, texture = _lesion_shape(LESION_FAMILIES[label], rng, image_size)
            frac = mask.sum() / total
            if 0.01 <= frac <= 0.15:
                break
        lesion_rgb = np.array([0.35, 0.12, 0.15]) + rng.normal(0, 0.04, 3)
        alpha = rng.uniform(0.75, 0.95) * texture * mask
        img = img * (1 - alpha[..., None]) + lesion_rgb[None, None, :] * alpha[..., None]
        images[i] = np.clip(img, 0, 1)
        masks[i] = mask
        labels[i] = label
    ids = [f"synth_{seed}_{i:05d}" for i in range(n_samples)]
    return ImageDataset(torch.from_numpy(images), torch.from_numpy(labels), ids, n_classes,
                        lesion_masks=torch.from_numpy(masks),
                        class_names=list(LESION_FAMILIES[:n_classes]))


def lesion_bbox(mask: np.ndarray) -> list[int]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return [0, 0, 0, 0]
    return [int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)]


def save_synthetic_dataset(ds: ImageDataset, root) -> Path:
    """images/<id>.png, masks/<id>.png and manifest.json under ``root``."""
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    samples = []
    for i, image_id in enumerate(ds.image_ids):
        img = np.round(ds.images[i].numpy() * 255).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"{image_id}.png")
        m = ds.lesion_masks[i].numpy() if ds.lesion_masks is not None else np.zeros(img.shape[:2], bool)
        Image.fromarray((m * 255).astype(np.uint8)).save(root / "masks" / f"{image_id}.png")
        samples.append({"image_id": image_id, "label": int(ds.labels[i]), "lesion_bbox": lesion_bbox(m)})
    manifest = {"num_classes": ds.num_classes, "class_names": ds.class_names, "samples": samples}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_synthetic_dataset(root) -> ImageDataset:
    from PIL import Image

    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    imgs, masks, labels, ids = [], [], [], []
    for s in manifest["samples"]:
        imgs.append(np.asarray(Image.open(root / "images" / f"{s['image_id']}.png").convert("RGB")))
        masks.append(np.asarray(Image.open(root / "masks" / f"{s['image_id']}.png")) > 127)
        labels.append(s["label"])
        ids.append(s["image_id"])
    return ImageDataset(torch.from_numpy(np.stack(imgs).astype(np.float32) / 255.0),
                        torch.tensor(labels, dtype=torch.long), ids, manifest["num_classes"],
                        lesion_masks=torch.from_numpy(np.stack(masks)),
                        class_names=manifest.get("class_names", []))


# --------------------------------------------------------------------------
# image folders: <root>/<class>/<image>

def _load_resized(path: Path, image_size: int) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            s = image_size / min(w, h)
            im = im.resize((max(image_size, round(w * s)), max(image_size, round(h * s))),
                           Image.BILINEAR)
            w, h = im.size
            left, top = (w - image_size) // 2, (h - image_size) // 2
            im = im.crop((left, top, left + image_size, top + image_size))
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def load_image_folder(path, image_size: int = 64) -> ImageDataset:
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"{root} has no class subdirectories")
    imgs, labels, ids = [], [], []
    for k, name in enumerate(classes):
        files = sorted(p for p in (root / name).rglob("*")
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DatasetError(f"class directory {root / name} contains no images")
        for f in files:
            imgs.append(_load_resized(f, image_size))
            labels.append(k)
            ids.append(f.relative_to(root).as_posix())
    return ImageDataset(torch.from_numpy(np.stack(imgs)), torch.tensor(labels, dtype=torch.long),
                        ids, len(classes), class_names=classes)


def load_dataset_uri(uri: str, image_size: int = 64, num_classes: int = 4, seed: int = 0) -> ImageDataset:
    """``synth:<n_samples>``, ``synthdir:<path>`` or ``folder:<path>``."""
    kind, _, rest = uri.partition(":")
    if kind == "synth":
        try:
            n = int(rest)
        except ValueError:
            raise DatasetError(f"bad synthetic dataset size in {uri!r}") from None
        return generate_synthetic_lesion_dataset(n, num_classes, image_size, seed)
    if kind == "synthdir":
        return load_synthetic_dataset(rest)
    if kind == "folder":
        return load_image_folder(rest, image_size)
    raise DatasetError(f"unknown dataset uri {uri!r}; expected synth:<n>, synthdir:<path> or folder:<path>")

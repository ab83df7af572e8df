"""Supervised attention-driven masking, plus random and attention-only baselines.

Pipeline for one image:

    last-block attention (full N+1 tokens)
      -> head mean, class-token row, drop cls column, min-max  (extract_masking_weights)
      -> bilinear upsample to pixels, cached per image          (weights_to_pixel_map)
      -> replay this step's crop/flip, mean-pool per patch      (pixel_map_to_patch_weights)
      -> weighted ordering of patch indices                     (sample_indices)
      -> mask / throw / visible slices                          (partition)
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from .data import AugmentationRecord, replay_augmentation
from .model import AttentionMaps, gather_tokens

WEIGHT_FLOOR = 1e-6

RngLike = Union[int, torch.Generator, None]


class MissingWeightsError(KeyError):
    pass


@dataclass(frozen=True)
class MaskingRatios:
    mask_ratio: float = 0.45
    throw_ratio: float = 0.30

    def __post_init__(self):
        r, t = self.mask_ratio, self.throw_ratio
        if not (0.0 <= r <= 1.0 and 0.0 <= t <= 1.0):
            raise ValueError(f"ratios must lie in [0, 1], got r={r}, t={t}")
        if r + t > 1.0 + 1e-12:
            raise ValueError(f"mask_ratio + throw_ratio must be <= 1, got {r} + {t}")

    def counts(self, num_patches: int) -> tuple[int, int, int]:
        """(|mask|, |throw|, |vis|) using truncating slice bounds."""
        a = int(np.floor(num_patches * self.mask_ratio + 1e-9))
        b = min(int(np.floor(num_patches * (self.mask_ratio + self.throw_ratio) + 1e-9)), num_patches)
        return a, b - a, num_patches - b

    def visible_count(self, num_patches: int) -> int:
        return self.counts(num_patches)[2]


@dataclass
class TokenPartition:
    """Index split over patch tokens (0..N-1).  Tensors are (K,) or (B, K)."""

    mask: torch.Tensor
    throw: torch.Tensor
    vis: torch.Tensor

    def __getitem__(self, i) -> "TokenPartition":
        return TokenPartition(self.mask[i], self.throw[i], self.vis[i])

    def to_lists(self) -> dict:
        return {"mask": self.mask.tolist(), "throw": self.throw.tolist(), "vis": self.vis.tolist()}


@dataclass
class MaskingWeights:
    pixel_map: torch.Tensor  # H x W, values in [0, 1]
    source_epoch: int
    image_id: str


def _generator(rng: RngLike) -> Optional[torch.Generator]:
    if rng is None or isinstance(rng, torch.Generator):
        return rng
    g = torch.Generator()
    g.manual_seed(int(rng))
    return g


# --------------------------------------------------------------------------
# weights

def minmax_normalize(w: torch.Tensor) -> torch.Tensor:
    """Per-row min-max to [0, 1]; constant rows map to zeros."""
    lo = w.amin(dim=-1, keepdim=True)
    span = w.amax(dim=-1, keepdim=True) - lo
    out = (w - lo) / torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, out, torch.zeros_like(out))


def extract_masking_weights(attention: AttentionMaps | torch.Tensor, num_patches: int) -> torch.Tensor:
    """Class-token attention to each patch, head-averaged and min-max normalized.

    ``attention`` must come from a pass over all ``num_patches + 1`` tokens.
    Returns (B, N), or (N,) for an unbatched (h, T, T) input.
    """
    a = attention.per_head if isinstance(attention, AttentionMaps) else attention
    squeeze = a.dim() == 3
    if squeeze:
        a = a.unsqueeze(0)
    if a.shape[-1] != num_patches + 1 or a.shape[-2] != num_patches + 1:
        raise ValueError(
            f"attention covers {a.shape[-1]} tokens; masking weights need a full pass of "
            f"{num_patches + 1} tokens")
    cls_row = a.mean(dim=1)[:, 0, 1:]
    w = minmax_normalize(cls_row)
    return w[0] if squeeze else w


# same computation; the difference lies in how the model was trained (lambda = 0)
attention_only_weights = extract_masking_weights


def weights_to_pixel_map(patch_weights: torch.Tensor, grid_size: int, image_size: int) -> torch.Tensor:
    """(N,) or (B, N) patch weights -> (H, W) or (B, H, W) bilinear pixel map."""
    squeeze = patch_weights.dim() == 1
    w = patch_weights.reshape(-1, 1, grid_size, grid_size).float()
    m = F.interpolate(w, size=(image_size, image_size), mode="bilinear", align_corners=False)
    m = m.clamp(0.0, 1.0)[:, 0]
    return m[0] if squeeze else m


def pool_patches(pixel_map: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Mean of each p x p block of an (H, W) or (B, H, W) map, raster order.

    Accumulates in float64 so a mirrored map pools to exactly mirrored
    weights (float32 sums would depend on element order).
    """
    squeeze = pixel_map.dim() == 2
    m = pixel_map.unsqueeze(0) if squeeze else pixel_map
    out = F.avg_pool2d(m.unsqueeze(1).to(torch.float64), patch_size).flatten(1).to(pixel_map.dtype)
    return out[0] if squeeze else out


def pixel_map_to_patch_weights(pixel_map: torch.Tensor, record: AugmentationRecord,
                               patch_size: int, input_size: int) -> torch.Tensor:
    """Replay the image's crop/flip on its weight map, then pool to patches."""
    if record.output_size != input_size:
        raise ValueError(
            f"augmentation output size {record.output_size} does not match model input {input_size}")
    m = replay_augmentation(pixel_map.unsqueeze(-1), record)[..., 0]
    return pool_patches(m, patch_size)


# --------------------------------------------------------------------------
# sampling and partition

def sample_indices(weights: torch.Tensor, mode: str = "stochastic", rng: RngLike = None) -> torch.Tensor:
    """Order patch indices so that higher weights tend to come first.

    ``stochastic``: Gumbel-top-k over log(weight + 1e-6), i.e. weighted
    sampling without replacement.  ``deterministic``: stable descending sort,
    ties kept in ascending index order.  Works on (N,) or (B, N).
    """
    w = weights.detach().to(torch.float64)
    if mode == "deterministic":
        return torch.sort(w, dim=-1, descending=True, stable=True).indices
    if mode != "stochastic":
        raise ValueError(f"unknown sampling mode {mode!r}")
    g = _generator(rng)
    u = torch.rand(w.shape, generator=g, dtype=torch.float64)
    u = u.clamp(min=torch.finfo(torch.float64).tiny, max=1.0 - 1e-16)
    gumbel = -torch.log(-torch.log(u))
    keys = torch.log(w.clamp(min=0.0) + WEIGHT_FLOOR) + gumbel
    return torch.sort(keys, dim=-1, descending=True, stable=True).indices


def partition(order: torch.Tensor, ratios: MaskingRatios) -> TokenPartition:
    """Slice a sampled order into mask, throw and visible index sets."""
    n = order.shape[-1]
    n_mask, n_throw, _ = ratios.counts(n)
    return TokenPartition(order[..., :n_mask], order[..., n_mask:n_mask + n_throw],
                          order[..., n_mask + n_throw:])


def random_partition(num_patches: int, ratios: MaskingRatios, rng: RngLike = None,
                     batch: Optional[int] = None) -> TokenPartition:
    g = _generator(rng)
    shape = (num_patches,) if batch is None else (batch, num_patches)
    order = torch.argsort(torch.rand(shape, generator=g), dim=-1)
    return partition(order, ratios)


def apply_partition(tokens: torch.Tensor, part: TokenPartition):
    """Gather ``x_vis`` (cls prepended) and ``x_mask`` from a (B, N+1, d) sequence.

    Partition indices refer to patch tokens, so they are offset by one to skip
    the class token.  Returns (x_vis_with_cls, x_mask, mask_order).
    """
    B, T, _ = tokens.shape
    vis, mask = part.vis, part.mask
    if vis.dim() == 1:
        vis, mask = vis.expand(B, -1), mask.expand(B, -1)
    for idx in (vis, mask):
        if idx.numel() and (idx.min() < 0 or idx.max() >= T - 1):
            raise IndexError(f"partition index out of range for {T - 1} patch tokens")
    patches = tokens[:, 1:]
    x_vis = torch.cat([tokens[:, :1], gather_tokens(patches, vis)], dim=1)
    x_mask = gather_tokens(patches, mask)
    return x_vis, x_mask, mask


# --------------------------------------------------------------------------
# per-image cache

class MaskingWeightCache:
    """Image id -> MaskingWeights.  Reads are lock-free; replace() is exclusive."""

    def __init__(self):
        self._store: dict[str, MaskingWeights] = {}
        self._lock = threading.Lock()
        self.epoch: Optional[int] = None

    def __len__(self):
        return len(self._store)

    def __contains__(self, image_id):
        return image_id in self._store

    def get(self, image_id: str) -> MaskingWeights:
        try:
            return self._store[image_id]
        except KeyError:
            raise MissingWeightsError(f"no masking weights cached for image {image_id!r}") from None

    def items(self):
        return self._store.items()

    def replace(self, records: Iterable[MaskingWeights], epoch: int):
        new = {r.image_id: r for r in records}
        with self._lock:
            self._store = new
            self.epoch = epoch


# --------------------------------------------------------------------------
# mask dump records

def write_mask_dump(out_dir, image_id: str, epoch: int, pixel_map: torch.Tensor,
                    part: Optional[TokenPartition] = None) -> dict:
    """16-bit grayscale PNG of the weight map plus a JSON record with the partition."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = safe_stem(image_id)
    png = out_dir / f"{stem}_weights.png"
    arr = np.round(pixel_map.detach().cpu().numpy().clip(0, 1) * 65535).astype(np.uint16)
    Image.fromarray(arr).save(png)
    record = {"image_id": image_id, "epoch": epoch, "pixel_map": png.name,
              "partition": part.to_lists() if part is not None else None}
    (out_dir / f"{stem}.json").write_text(json.dumps(record, indent=1))
    return record


def read_mask_dump(json_path) -> tuple[dict, np.ndarray]:
    from PIL import Image

    json_path = Path(json_path)
    record = json.loads(json_path.read_text())
    arr = np.asarray(Image.open(json_path.parent / record["pixel_map"]), dtype=np.float64) / 65535.0
    return record, arr


def safe_stem(image_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in image_id)

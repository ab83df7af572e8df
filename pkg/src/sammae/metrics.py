"""FLOPs accounting, masking precision against lesion masks, overlay export."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .masking import TokenPartition
from .model import PatchConfig

LESION_PATCH_THRESHOLD = 0.30


@dataclass
class FlopsReport:
    encoder_flops: int
    decoder_flops: int
    head_flops: int
    token_count: int
    ops_per_mac: int
    breakdown: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.encoder_flops + self.decoder_flops + self.head_flops

    def to_dict(self):
        d = asdict(self)
        d["total"] = self.total
        return d


def _block_macs(n: int, d: int, mlp_ratio: float) -> tuple[int, int, int]:
    """(qkv+proj, scores+weighted sum, mlp) multiply-accumulates of one block on n tokens."""
    hidden = int(d * mlp_ratio)
    return 4 * n * d * d, 2 * n * n * d, 2 * n * d * hidden


def count_flops(cfg: PatchConfig, token_count: int, ops_per_mac: int = 1,
                decoder_tokens: Optional[int] = None) -> FlopsReport:
    """Closed-form matmul count for one image.

    Per encoder block on n tokens: 4nd^2 (q, k, v, output projections),
    2n^2 d (scores and attention-weighted values), 2 * n * d * (mlp_ratio * d)
    for the MLP (8nd^2 at ratio 4).  The patch embedding runs on all N patches
    (tokens are dropped after embedding) and the classification head once.
    ``ops_per_mac=1`` counts one multiply-accumulate as one FLOP (the common
    profiler convention); pass 2 to count multiplies and adds separately.
    Decoder blocks are included only when ``decoder_tokens`` is given.
    """
    d, L = cfg.embed_dim, cfg.encoder_depth
    proj, scores, mlp = _block_macs(token_count, d, cfg.mlp_ratio)
    bd = {
        "patch_embed": cfg.num_patches * cfg.patch_dim * d,
        "attn_proj": L * proj,
        "attn_scores": L * scores,
        "mlp": L * mlp,
    }
    # classifier: hidden layer + output layer on one feature vector
    bd["head"] = d * d + d * cfg.num_classes
    dec = 0
    if decoder_tokens is not None:
        dd, Ld, n = cfg.decoder_dim, cfg.decoder_depth, decoder_tokens
        dproj, dscores, dmlp = _block_macs(n, dd, cfg.mlp_ratio)
        bd["decoder_embed"] = (token_count - 1) * d * dd
        bd["decoder_blocks"] = Ld * (dproj + dscores + dmlp)
        bd["decoder_pred"] = n * dd * cfg.patch_dim
        dec = bd["decoder_embed"] + bd["decoder_blocks"] + bd["decoder_pred"]
    bd = {k: v * ops_per_mac for k, v in bd.items()}
    enc = bd["patch_embed"] + bd["attn_proj"] + bd["attn_scores"] + bd["mlp"]
    return FlopsReport(enc, dec * ops_per_mac, bd["head"], token_count, ops_per_mac, bd)


# --------------------------------------------------------------------------

@dataclass
class MaskPrecisionReport:
    lesion_mask_rate: float
    background_mask_rate: float
    argmax_hit_rate: Optional[float]
    n_images: int
    lesion_patches: int
    background_patches: int

    def to_dict(self):
        return asdict(self)


def lesion_patches(lesion_masks: torch.Tensor, patch_size: int,
                   threshold: float = LESION_PATCH_THRESHOLD) -> torch.Tensor:
    """(B, H, W) binary masks -> (B, N) bool, patch counts as lesion if coverage >= threshold."""
    cover = F.avg_pool2d(lesion_masks.float().unsqueeze(1), patch_size).flatten(1)
    return cover >= threshold


def mask_precision(partitions: Sequence[TokenPartition] | TokenPartition, lesion_masks: torch.Tensor,
                   patch_size: int, patch_weights: Optional[torch.Tensor] = None,
                   threshold: float = LESION_PATCH_THRESHOLD) -> MaskPrecisionReport:
    """Pooled rates over all images: share of lesion / background patches that were masked.

    ``argmax_hit_rate`` (share of images whose top-weight patch is a lesion
    patch) needs ``patch_weights`` of shape (B, N).
    """
    is_lesion = lesion_patches(lesion_masks, patch_size, threshold)
    B, N = is_lesion.shape
    masked = torch.zeros(B, N, dtype=torch.bool)
    if isinstance(partitions, TokenPartition):
        mask_idx = partitions.mask.reshape(B, -1)
        masked.scatter_(1, mask_idx, True)
    else:
        for b, part in enumerate(partitions):
            masked[b, part.mask] = True
    n_les = int(is_lesion.sum())
    n_bg = B * N - n_les
    les_rate = float((masked & is_lesion).sum()) / n_les if n_les else 0.0
    bg_rate = float((masked & ~is_lesion).sum()) / n_bg if n_bg else 0.0
    hit = None
    if patch_weights is not None:
        top = patch_weights.reshape(B, N).argmax(dim=1)
        hit = float(is_lesion.gather(1, top[:, None]).float().mean())
    return MaskPrecisionReport(les_rate, bg_rate, hit, B, n_les, n_bg)


def weight_contrast(patch_weights: torch.Tensor, lesion_masks: torch.Tensor, patch_size: int) -> float:
    """Share of images whose mean weight on lesion pixels exceeds that on background pixels."""
    B = lesion_masks.shape[0]
    g = int(round(patch_weights.shape[-1] ** 0.5))
    maps = F.interpolate(patch_weights.reshape(B, 1, g, g).float(), size=lesion_masks.shape[-2:],
                         mode="bilinear", align_corners=False)[:, 0]
    m = lesion_masks.bool()
    inside = (maps * m).sum((1, 2)) / m.sum((1, 2)).clamp(min=1)
    outside = (maps * ~m).sum((1, 2)) / (~m).sum((1, 2)).clamp(min=1)
    return float((inside > outside).float().mean())


def save_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = obj.to_dict() if hasattr(obj, "to_dict") else obj
    path.write_text(json.dumps(data, indent=1))
    return path


# --------------------------------------------------------------------------
# overlays

MASK_GRAY = 0.5
THROW_GRAY = 0.15


def heatmap_overlay(image: np.ndarray, pixel_map: np.ndarray, alpha: float = 0.5, cmap: str = "jet") -> np.ndarray:
    import matplotlib

    colors = matplotlib.colormaps[cmap](np.clip(pixel_map, 0, 1))[..., :3]
    return (1 - alpha) * image + alpha * colors


def partition_overlay(image: np.ndarray, part: TokenPartition, patch_size: int) -> np.ndarray:
    """Masked patches flat mid-gray, thrown patches near-black, visible untouched."""
    out = image.copy()
    g = image.shape[1] // patch_size
    for idx, level in ((part.mask, MASK_GRAY), (part.throw, THROW_GRAY)):
        for k in np.asarray(idx).reshape(-1).tolist():
            r, c = divmod(int(k), g)
            out[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size] = level
    return out


def export_overlays(image, pixel_map, part: TokenPartition, out_dir, stem: str,
                    patch_size: int, alpha: float = 0.5) -> tuple[Path, Path]:
    """Write ``<stem>_heatmap.png`` and ``<stem>_partition.png`` at the image's own size."""
    from PIL import Image

    image = np.asarray(image, dtype=np.float64)
    pixel_map = np.asarray(pixel_map, dtype=np.float64)
    if pixel_map.shape != image.shape[:2]:
        raise ValueError(f"weight map {pixel_map.shape} does not match image {image.shape[:2]}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = (out_dir / f"{stem}_heatmap.png", out_dir / f"{stem}_partition.png")
    for arr, path in zip((heatmap_overlay(image, pixel_map, alpha), partition_overlay(image, part, patch_size)),
                         paths):
        Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)
    return paths

"""Vision-transformer masked autoencoder with a class-token classification head.

The encoder only ever sees the class token plus the visible patch tokens;
the decoder receives the visible encodings and one shared mask token per
masked position.  Thrown positions are dropped from both.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class PatchConfig:
    """Geometry and width of the encoder/decoder pair.

    Defaults are ViT-B/16 at 224 px with the 8-block, 512-wide decoder.
    Use :meth:`desk` for the CPU-sized preset.
    """

    image_size: int = 224
    patch_size: int = 16
    in_chans: int = 3
    embed_dim: int = 768
    num_heads: int = 12
    encoder_depth: int = 12
    decoder_dim: int = 512
    decoder_depth: int = 8
    decoder_heads: int = 16
    num_classes: int = 5
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ValueError(
                f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.in_chans

    @classmethod
    def desk(cls, **overrides) -> "PatchConfig":
        base = dict(image_size=64, patch_size=8, embed_dim=96, num_heads=4, encoder_depth=4,
                    decoder_dim=64, decoder_depth=2, decoder_heads=4, num_classes=4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def vit_base(cls, **overrides) -> "PatchConfig":
        return cls(**overrides)

    def to_dict(self) -> dict:
        return asdict(self)


MODEL_PRESETS = {"desk": PatchConfig.desk, "vit_base": PatchConfig.vit_base}


@dataclass
class AttentionMaps:
    per_head: torch.Tensor  # B x h x T x T
    layer_index: int


@dataclass
class EncoderOutput:
    cls_encoding: torch.Tensor
    patch_encodings: torch.Tensor
    last_attention: Optional[AttentionMaps]
    all_attention: list = field(default_factory=list)


# --------------------------------------------------------------------------
# patch geometry

def patchify(imgs: torch.Tensor, patch_size: int) -> torch.Tensor:
    """B x H x W x C images -> B x N x (p*p*C), patches in raster order."""
    B, H, W, C = imgs.shape
    p = patch_size
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
    h, w = H // p, W // p
    x = imgs.reshape(B, h, p, w, p, C)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, h * w, p * p * C)


def unpatchify(x: torch.Tensor, patch_size: int, grid_hw: tuple[int, int] | None = None,
               in_chans: int = 3) -> torch.Tensor:
    B, N, D = x.shape
    p = patch_size
    if grid_hw is None:
        h = w = int(round(math.sqrt(N)))
    else:
        h, w = grid_hw
    if h * w != N or D != p * p * in_chans:
        raise ValueError(f"cannot unpatchify {tuple(x.shape)} with p={p}, grid={h}x{w}")
    x = x.reshape(B, h, w, p, p, in_chans)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, h * p, w * p, in_chans)


# --------------------------------------------------------------------------
# fixed 2-D sine-cosine position embedding (MAE convention)

def get_1d_sincos_pos_embed_from_grid(embed_dim: int, pos: np.ndarray) -> np.ndarray:
    assert embed_dim % 2 == 0
    omega = np.arange(embed_dim // 2, dtype=np.float64)
    omega /= embed_dim / 2.0
    omega = 1.0 / 10000 ** omega
    out = np.einsum("m,d->md", pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def get_2d_sincos_pos_embed(embed_dim: int, grid_size: int, cls_token: bool = False) -> np.ndarray:
    assert embed_dim % 4 == 0, "sin-cos embedding needs embed_dim divisible by 4"
    grid_h = np.arange(grid_size, dtype=np.float64)
    grid_w = np.arange(grid_size, dtype=np.float64)
    grid = np.meshgrid(grid_w, grid_h)  # w goes first
    grid = np.stack(grid, axis=0).reshape(2, 1, grid_size, grid_size)
    emb_h = get_1d_sincos_pos_embed_from_grid(embed_dim // 2, grid[0])
    emb_w = get_1d_sincos_pos_embed_from_grid(embed_dim // 2, grid[1])
    pos_embed = np.concatenate([emb_h, emb_w], axis=1)
    if cls_token:
        pos_embed = np.concatenate([np.zeros([1, embed_dim]), pos_embed], axis=0)
    return pos_embed


# --------------------------------------------------------------------------
# transformer pieces

class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, qkv_bias: bool = True):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor):
        B, T, C = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(x), attn


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block that also returns its attention matrix."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class ClassifierHead(nn.Module):
    """LayerNorm -> Linear -> GELU -> Linear.  Returns logits."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.fc1 = nn.Linear(dim, dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim, num_classes)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(self.norm(x))))


def _init_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def gather_tokens(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Row gather: x is B x N x D, index is B x K -> B x K x D."""
    return torch.gather(x, 1, index.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


# --------------------------------------------------------------------------

class MaskedAutoencoderViT(nn.Module):
    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.cfg = cfg
        d, N = cfg.embed_dim, cfg.num_patches

        self.patch_embed = nn.Linear(cfg.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(get_2d_sincos_pos_embed(d, cfg.grid_size, cls_token=True)).float().unsqueeze(0),
            persistent=False)
        self.blocks = nn.ModuleList([Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth)])
        self.head = ClassifierHead(d, cfg.num_classes)

        dd = cfg.decoder_dim
        self.decoder_norm_in = nn.LayerNorm(d, eps=1e-6)
        self.decoder_embed = nn.Linear(d, dd)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dd))
        self.register_buffer(
            "decoder_pos_embed",
            torch.from_numpy(get_2d_sincos_pos_embed(dd, cfg.grid_size)).float().unsqueeze(0),
            persistent=False)
        self.decoder_blocks = nn.ModuleList(
            [Block(dd, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)])
        self.decoder_norm = nn.LayerNorm(dd, eps=1e-6)
        self.decoder_pred = nn.Linear(dd, cfg.patch_dim)

        self.initialize_weights()

    def initialize_weights(self):
        self.apply(_init_weights)
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)

    def reset_head(self):
        self.head.apply(_init_weights)

    # ---- encoder side -----------------------------------------------------

    def patchify(self, imgs):
        return patchify(imgs, self.cfg.patch_size)

    def unpatchify(self, x):
        return unpatchify(x, self.cfg.patch_size, in_chans=self.cfg.in_chans)

    def embed(self, patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Project patches and add positions.

        Returns ``(cls, x)``: the class token (1 x 1 x d, broadcastable) and the
        position-tagged patch tokens (B x N x d).  Call :meth:`embed_sequence`
        for the concatenated (N+1)-token sequence.
        """
        x = self.patch_embed(patches) + self.pos_embed[:, 1:, :]
        cls = self.cls_token + self.pos_embed[:, :1, :]
        return cls, x

    def embed_sequence(self, patches):
        cls, x = self.embed(patches)
        return torch.cat([cls.expand(x.shape[0], -1, -1), x], dim=1)

    def encode(self, tokens: torch.Tensor, capture_all: bool = False) -> EncoderOutput:
        """Run every encoder block on ``tokens`` (cls at index 0)."""
        attn = None
        every = []
        x = tokens
        for i, blk in enumerate(self.blocks):
            x, a = blk(x)
            if capture_all:
                every.append(AttentionMaps(a, i))
            if i == len(self.blocks) - 1:
                attn = AttentionMaps(a, i)
        return EncoderOutput(x[:, 0], x[:, 1:], attn, every)

    def encode_partition(self, patches, vis_index):
        cls, x = self.embed(patches)
        x = gather_tokens(x, vis_index)
        x = torch.cat([cls.expand(x.shape[0], -1, -1), x], dim=1)
        return self.encode(x)

    # ---- decoder side -----------------------------------------------------

    def decode(self, patch_encodings: torch.Tensor, vis_index: torch.Tensor,
               mask_index: torch.Tensor, check: bool = True) -> torch.Tensor:
        """Predict pixels for ``mask_index`` positions, row-aligned with it."""
        B = patch_encodings.shape[0]
        if mask_index.shape[1] == 0:
            return patch_encodings.new_zeros(B, 0, self.cfg.patch_dim)
        if check:
            hit = torch.zeros(B, self.cfg.num_patches, dtype=torch.bool, device=vis_index.device)
            hit.scatter_(1, vis_index, True)
            if torch.gather(hit, 1, mask_index).any():
                raise ValueError("mask indices overlap visible indices")
        dpos = self.decoder_pos_embed.expand(B, -1, -1)
        y = self.decoder_embed(self.decoder_norm_in(patch_encodings)) + gather_tokens(dpos, vis_index)
        m = self.mask_token.expand(B, mask_index.shape[1], -1) + gather_tokens(dpos, mask_index)
        x = torch.cat([y, m], dim=1)
        for blk in self.decoder_blocks:
            x, _ = blk(x)
        x = self.decoder_norm(x[:, y.shape[1]:])
        return self.decoder_pred(x)

    # ---- heads ------------------------------------------------------------

    def classify(self, feature: torch.Tensor) -> torch.Tensor:
        """Class logits; softmax of these are the class probabilities."""
        return self.head(feature)

    def pool(self, enc: EncoderOutput, global_pool: bool) -> torch.Tensor:
        if global_pool:
            return enc.patch_encodings.mean(dim=1)
        return enc.cls_encoding

    # ---- composite passes -------------------------------------------------

    def forward_pretrain(self, imgs, vis_index, mask_index):
        """Masked pass.  Returns (pred, target_patches, cls_logits, encoder_output)."""
        patches = self.patchify(imgs)
        enc = self.encode_partition(patches, vis_index)
        pred = self.decode(enc.patch_encodings, vis_index, mask_index)
        target = gather_tokens(patches, mask_index)
        logits = self.classify(enc.cls_encoding)
        return pred, target, logits, enc

    def forward_features(self, imgs, vis_index=None, global_pool=True):
        """Encoder feature for classification; all tokens when vis_index is None."""
        patches = self.patchify(imgs)
        if vis_index is None:
            enc = self.encode(self.embed_sequence(patches))
        else:
            enc = self.encode_partition(patches, vis_index)
        return self.pool(enc, global_pool), enc

    def forward(self, imgs, vis_index=None, global_pool=True):
        feat, _ = self.forward_features(imgs, vis_index, global_pool)
        return self.classify(feat)

    @torch.no_grad()
    def full_attention(self, imgs) -> AttentionMaps:
        """Last-block attention of an unmasked (N+1)-token pass."""
        enc = self.encode(self.embed_sequence(self.patchify(imgs)))
        if enc.last_attention is None:
            raise ValueError("encoder has no blocks; no attention to extract")
        return enc.last_attention


# --------------------------------------------------------------------------
# checkpoints: one torch zip archive holding the state dict and a JSON record

def save_checkpoint(path, model: MaskedAutoencoderViT, meta: dict | None = None):
    meta = dict(meta or {})
    meta.setdefault("config", model.cfg.to_dict())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save({"params": state, "meta_json": json.dumps(meta, sort_keys=True)}, path)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    return blob["params"], json.loads(blob["meta_json"])


def load_checkpoint(path) -> tuple[MaskedAutoencoderViT, dict]:
    params, meta = read_checkpoint(path)
    model = MaskedAutoencoderViT(PatchConfig(**meta["config"]))
    model.load_state_dict(params)
    return model, meta

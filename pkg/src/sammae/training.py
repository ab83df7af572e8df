"""Pre-training and fine-tuning loops.

Pre-training optimizes ``L_con + lambda * L_cls`` where L_con is the masked
patch reconstruction error and L_cls the cross-entropy of the class token's
prediction from the same masked pass.  Masking is random during warmup and
afterwards driven by the cached class-token attention (strategy ``sam``, or
``amt`` which is the same pipeline with lambda forced to 0).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageDataset, augment
from .masking import (MaskingRatios, MaskingWeightCache, MaskingWeights, TokenPartition,
                      extract_masking_weights, partition, pixel_map_to_patch_weights,
                      random_partition, sample_indices, weights_to_pixel_map)
from .model import MaskedAutoencoderViT, save_checkpoint

log = logging.getLogger(__name__)

STRATEGIES = ("random", "amt", "sam")
FINETUNE_MASKING = ("sam", "random", "none")


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at epoch {record.get('epoch')} step {record.get('step')}")
        self.record = record


@dataclass
class LossConfig:
    lambda_cls: float = 0.1
    normalize_pixel_targets: bool = True
    recon_form: str = "mse"  # or "l2": per-sample Euclidean norm of the residual

    def __post_init__(self):
        if self.lambda_cls < 0:
            raise ValueError("lambda_cls must be >= 0")
        if self.recon_form not in ("mse", "l2"):
            raise ValueError(f"recon_form must be 'mse' or 'l2', got {self.recon_form!r}")


@dataclass
class TrainRunConfig:
    epochs: int = 300
    warmup_epochs: int = 40
    base_lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.05
    batch_size: int = 64
    mask_ratio: float = 0.45
    throw_ratio: float = 0.30
    weight_update_interval: int = 40
    layerwise_lr_decay: float = 0.75
    global_pool: bool = True
    seed: int = 0
    sampling_mode: str = "stochastic"
    betas: tuple[float, float] = (0.9, 0.95)
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    warm_start_head: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        if self.weight_update_interval < 1:
            raise ValueError("weight_update_interval must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.sampling_mode not in ("stochastic", "deterministic"):
            raise ValueError("sampling_mode must be 'stochastic' or 'deterministic'")
        self.ratios  # validates r + t <= 1

    @property
    def ratios(self) -> MaskingRatios:
        return MaskingRatios(self.mask_ratio, self.throw_ratio)

    @classmethod
    def pretrain_defaults(cls, **kw):
        return cls(**kw)

    @classmethod
    def finetune_defaults(cls, **kw):
        base = dict(epochs=100, warmup_epochs=5, batch_size=256, weight_update_interval=20,
                    betas=(0.9, 0.999))
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# losses

def recon_loss(pred: torch.Tensor, target: torch.Tensor, normalize_targets: bool = True,
               form: str = "mse") -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if pred.numel() == 0:
        return pred.sum() * 0.0
    if normalize_targets:
        mean = target.mean(dim=-1, keepdim=True)
        var = target.var(dim=-1, keepdim=True)
        target = (target - mean) / (var + 1e-6) ** 0.5
    diff = pred - target
    if form == "mse":
        return (diff ** 2).mean()
    return diff.flatten(1).norm(dim=1).mean()


def cls_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy, computed from logits."""
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(f"labels outside [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, labels)


def cls_loss_from_probs(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if labels.numel() and (labels.min() < 0 or labels.max() >= probs.shape[-1]):
        raise ValueError(f"labels outside [0, {probs.shape[-1]})")
    return -torch.log(probs.gather(1, labels[:, None])).mean()


def total_loss(l_con, l_cls, cfg: LossConfig):
    return l_con + cfg.lambda_cls * l_cls


def pretrain_step_loss(model: MaskedAutoencoderViT, imgs, labels, part: TokenPartition,
                       loss_cfg: LossConfig):
    """(L_total, L_con, L_cls, logits) of one masked forward pass."""
    pred, target, logits, _ = model.forward_pretrain(imgs, part.vis, part.mask)
    l_con = recon_loss(pred, target, loss_cfg.normalize_pixel_targets, loss_cfg.recon_form)
    l_cls = cls_loss(logits, labels)
    return total_loss(l_con, l_cls, loss_cfg), l_con, l_cls, logits


# --------------------------------------------------------------------------
# optimizer plumbing

def lr_at(epoch: float, cfg: TrainRunConfig) -> float:
    """Linear warmup then half-cycle cosine, evaluated at a fractional epoch."""
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * epoch / cfg.warmup_epochs
    span = max(cfg.epochs - cfg.warmup_epochs, 1e-12)
    progress = (epoch - cfg.warmup_epochs) / span
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def _no_decay(name: str, p) -> bool:
    return p.ndim <= 1 or name.endswith(".bias") or name in ("cls_token", "mask_token")


def param_groups(model: MaskedAutoencoderViT, weight_decay: float,
                 layer_decay: Optional[float] = None, encoder_only: bool = False):
    """AdamW groups; with ``layer_decay`` each encoder depth gets lr * decay**(L + 1 - layer)."""
    L = len(model.blocks)
    groups: dict[tuple, dict] = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if encoder_only and (name.startswith("decoder") or name == "mask_token"):
            continue
        if name.startswith(("patch_embed", "cls_token")):
            layer = 0
        elif name.startswith("blocks."):
            layer = int(name.split(".")[1]) + 1
        else:
            layer = L + 1
        scale = 1.0 if layer_decay is None else layer_decay ** (L + 1 - layer)
        wd = 0.0 if _no_decay(name, p) else weight_decay
        key = (scale, wd)
        g = groups.setdefault(key, {"params": [], "weight_decay": wd, "lr_scale": scale})
        g["params"].append(p)
    return list(groups.values())


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr * g.get("lr_scale", 1.0)


# --------------------------------------------------------------------------
# masking helpers shared by both phases

def _model_dtype(model: MaskedAutoencoderViT) -> torch.dtype:
    return model.patch_embed.weight.dtype


def _augment_batch(dataset: ImageDataset, idx, rng: np.random.Generator, cfg: TrainRunConfig,
                   dtype: torch.dtype = torch.float32):
    imgs, records = [], []
    for i in idx:
        img, rec = augment(dataset.images[i], "train", rng, scale=cfg.crop_scale, flip_prob=cfg.flip_prob)
        imgs.append(img)
        records.append(rec)
    return dataset.normalize(torch.stack(imgs)).to(dtype), records


def sam_partition(cache: MaskingWeightCache, image_ids, records, ratios: MaskingRatios,
                  patch_size: int, input_size: int, mode: str, gen: torch.Generator) -> TokenPartition:
    weights = torch.stack([
        pixel_map_to_patch_weights(cache.get(i).pixel_map, rec, patch_size, input_size)
        for i, rec in zip(image_ids, records)])
    return partition(sample_indices(weights, mode, gen), ratios)


@torch.no_grad()
def update_masking_weights(model: MaskedAutoencoderViT, dataset: ImageDataset,
                           cache: Optional[MaskingWeightCache] = None, epoch: int = 0,
                           batch_size: int = 128) -> MaskingWeightCache:
    """Refresh the per-image weight maps from full-token, eval-mode passes."""
    cache = cache if cache is not None else MaskingWeightCache()
    was_training = model.training
    model.eval()
    cfg = model.cfg
    records = []
    for start in range(0, len(dataset), batch_size):
        ids = dataset.image_ids[start:start + batch_size]
        batch = torch.stack([augment(dataset.images[i], "eval")[0]
                             for i in range(start, start + len(ids))])
        attn = model.full_attention(dataset.normalize(batch).to(_model_dtype(model)))
        w = extract_masking_weights(attn, cfg.num_patches)
        maps = weights_to_pixel_map(w, cfg.grid_size, dataset.image_size)
        records.extend(MaskingWeights(m.clone(), epoch, i) for m, i in zip(maps, ids))
    model.train(was_training)
    cache.replace(records, epoch)
    return cache


def _check_finite(value: torch.Tensor, record: dict, run_dir: Optional[Path]):
    if torch.isfinite(value).all():
        return
    # non-finite floats become strings so the record stays strict JSON
    record = {k: (repr(v) if isinstance(v, float) and not math.isfinite(v) else v) for k, v in record.items()}
    if run_dir is not None:
        (run_dir / "diverged.json").write_text(json.dumps(record, indent=1, allow_nan=False))
    raise TrainingDiverged(record)


def _checkpoint(run_dir, model, epoch, meta, tag=None):
    if run_dir is None:
        return None
    name = f"checkpoint-{tag or f'{epoch:04d}'}.pth"
    return save_checkpoint(Path(run_dir) / "checkpoints" / name, model, dict(meta, epoch=epoch))


class MetricLog:
    """Epoch records, mirrored as JSON lines to ``path`` when given."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, rec: dict):
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")


@dataclass
class RunResult:
    metrics: list[dict]
    steps: list[dict]
    cache: Optional[MaskingWeightCache]
    checkpoints: list[Path]


# --------------------------------------------------------------------------
# pre-training

def pretrain(model: MaskedAutoencoderViT, dataset: ImageDataset, cfg: TrainRunConfig,
             strategy: str = "sam", run_dir=None,
             on_epoch: Optional[Callable[[dict], None]] = None) -> RunResult:
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    loss_cfg = cfg.loss
    if strategy == "amt" and loss_cfg.lambda_cls != 0:
        log.info("strategy 'amt' trains without the classification loss; using lambda_cls=0")
        loss_cfg = replace(loss_cfg, lambda_cls=0.0)
    run_dir = Path(run_dir) if run_dir is not None else None
    mcfg = model.cfg
    N, p, S = mcfg.num_patches, mcfg.patch_size, mcfg.image_size
    if dataset.image_size != S:
        raise ValueError(f"dataset images are {dataset.image_size}px, model expects {S}px")

    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(param_groups(model, cfg.weight_decay), lr=cfg.base_lr, betas=cfg.betas)
    ratios = cfg.ratios
    cache = MaskingWeightCache() if strategy != "random" else None
    metrics = MetricLog(run_dir / "metrics.jsonl" if run_dir else None)
    steps: list[dict] = []
    ckpts: list[Path] = []
    meta = {"phase": "pretrain", "strategy": strategy, "seed": cfg.seed, "train": cfg.to_dict()}
    n_batches = math.ceil(len(dataset) / cfg.batch_size)

    model.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        attention_masking = cache is not None and epoch >= cfg.warmup_epochs
        if attention_masking and (epoch - cfg.warmup_epochs) % cfg.weight_update_interval == 0:
            update_masking_weights(model, dataset, cache, epoch)
        sums = {"l_con": 0.0, "l_cls": 0.0, "l_total": 0.0, "correct": 0, "n": 0}
        order = rng.permutation(len(dataset))
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = lr_at(epoch + b / n_batches, cfg)
            _set_lr(opt, lr)
            imgs, records = _augment_batch(dataset, idx, rng, cfg, _model_dtype(model))
            labels = dataset.labels[idx]
            if attention_masking:
                ids = [dataset.image_ids[i] for i in idx]
                part = sam_partition(cache, ids, records, ratios, p, S, cfg.sampling_mode, gen)
            else:
                part = random_partition(N, ratios, gen, batch=len(idx))
            l_total, l_con, l_cls, logits = pretrain_step_loss(model, imgs, labels, part, loss_cfg)
            step = {"epoch": epoch, "step": b, "l_con": l_con.item(), "l_cls": l_cls.item(),
                    "l_total": l_total.item(), "lambda_cls": loss_cfg.lambda_cls, "lr": lr,
                    "encoder_tokens": part.vis.shape[-1] + 1}
            _check_finite(l_total, step, run_dir)
            opt.zero_grad(set_to_none=True)
            l_total.backward()
            opt.step()
            steps.append(step)
            k = len(idx)
            for key in ("l_con", "l_cls", "l_total"):
                sums[key] += step[key] * k
            sums["correct"] += int((logits.argmax(-1) == labels).sum())
            sums["n"] += k
        rec = {"epoch": epoch, "l_con": sums["l_con"] / sums["n"], "l_cls": sums["l_cls"] / sums["n"],
               "l_total": sums["l_total"] / sums["n"], "lr": lr, "train_acc": sums["correct"] / sums["n"],
               "masking": "attention" if attention_masking else "random",
               "encoder_tokens": ratios.visible_count(N) + 1,
               "wall_time_s": time.perf_counter() - t0}
        metrics.append(rec)
        if on_epoch:
            on_epoch(rec)
        if (epoch + 1) % cfg.weight_update_interval == 0:
            ckpts.append(_checkpoint(run_dir, model, epoch + 1, meta))
    ckpts.append(_checkpoint(run_dir, model, cfg.epochs, meta, tag="last"))
    return RunResult(metrics.records, steps, cache, [c for c in ckpts if c is not None])


# --------------------------------------------------------------------------
# fine-tuning

def finetune(model: MaskedAutoencoderViT, dataset: ImageDataset, cfg: TrainRunConfig,
             masking: str = "sam", run_dir=None, val_dataset: Optional[ImageDataset] = None,
             on_epoch: Optional[Callable[[dict], None]] = None) -> RunResult:
    """Supervised fine-tuning of the encoder; no decoder, no reconstruction loss.

    ``masking='sam'`` keeps pre-training's (r, t) partition so the encoder sees
    the same token count as in pre-training; ``'none'`` feeds all tokens.
    """
    if masking not in FINETUNE_MASKING:
        raise ValueError(f"masking must be one of {FINETUNE_MASKING}, got {masking!r}")
    run_dir = Path(run_dir) if run_dir is not None else None
    mcfg = model.cfg
    N, p, S = mcfg.num_patches, mcfg.patch_size, mcfg.image_size
    if not cfg.warm_start_head:
        model.reset_head()

    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(param_groups(model, cfg.weight_decay, cfg.layerwise_lr_decay, encoder_only=True),
                            lr=cfg.base_lr, betas=cfg.betas)
    ratios = cfg.ratios
    cache = MaskingWeightCache() if masking == "sam" else None
    metrics = MetricLog(run_dir / "metrics.jsonl" if run_dir else None)
    steps: list[dict] = []
    ckpts: list[Path] = []
    meta = {"phase": "finetune", "masking": masking, "seed": cfg.seed, "train": cfg.to_dict()}
    n_batches = math.ceil(len(dataset) / cfg.batch_size)

    model.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if cache is not None and epoch % cfg.weight_update_interval == 0:
            update_masking_weights(model, dataset, cache, epoch)
        loss_sum, correct, n = 0.0, 0, 0
        order = rng.permutation(len(dataset))
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = lr_at(epoch + b / n_batches, cfg)
            _set_lr(opt, lr)
            imgs, records = _augment_batch(dataset, idx, rng, cfg, _model_dtype(model))
            labels = dataset.labels[idx]
            if masking == "sam":
                ids = [dataset.image_ids[i] for i in idx]
                vis = sam_partition(cache, ids, records, ratios, p, S, cfg.sampling_mode, gen).vis
            elif masking == "random":
                vis = random_partition(N, ratios, gen, batch=len(idx)).vis
            else:
                vis = None
            feat, enc = model.forward_features(imgs, vis, cfg.global_pool)
            logits = model.classify(feat)
            loss = cls_loss(logits, labels)
            step = {"epoch": epoch, "step": b, "l_cls": loss.item(), "lr": lr,
                    "encoder_tokens": enc.patch_encodings.shape[1] + 1}
            _check_finite(loss, step, run_dir)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            steps.append(step)
            loss_sum += step["l_cls"] * len(idx)
            correct += int((logits.argmax(-1) == labels).sum())
            n += len(idx)
        rec = {"epoch": epoch, "l_cls": loss_sum / n, "lr": lr, "train_acc": correct / n,
               "encoder_tokens": steps[-1]["encoder_tokens"]}
        if val_dataset is not None:
            rec["val_acc"] = evaluate(model, val_dataset, cfg.global_pool)["top1"]
            model.train()
        rec["wall_time_s"] = time.perf_counter() - t0
        metrics.append(rec)
        if on_epoch:
            on_epoch(rec)
        if (epoch + 1) % cfg.weight_update_interval == 0:
            ckpts.append(_checkpoint(run_dir, model, epoch + 1, meta))
    ckpts.append(_checkpoint(run_dir, model, cfg.epochs, meta, tag="last"))
    return RunResult(metrics.records, steps, cache, [c for c in ckpts if c is not None])


# --------------------------------------------------------------------------
# evaluation: all N + 1 tokens, no masking

@torch.no_grad()
def predict(model: MaskedAutoencoderViT, dataset: ImageDataset, global_pool: bool = True,
            batch_size: int = 256) -> torch.Tensor:
    was_training = model.training
    model.eval()
    preds = []
    for start in range(0, len(dataset), batch_size):
        imgs = torch.stack([augment(dataset.images[i], "eval")[0]
                            for i in range(start, min(start + batch_size, len(dataset)))])
        preds.append(model(dataset.normalize(imgs).to(_model_dtype(model)), None, global_pool).argmax(-1))
    model.train(was_training)
    return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)


def accuracy_report(preds: torch.Tensor, labels: torch.Tensor, num_classes: int) -> dict:
    conf = torch.zeros(num_classes, num_classes, dtype=torch.long)
    conf.index_put_((labels, preds), torch.ones_like(labels), accumulate=True)
    support = conf.sum(1)
    per_class = [conf[k, k].item() / support[k].item() if support[k] > 0 else None
                 for k in range(num_classes)]
    present = [a for a in per_class if a is not None]
    return {"top1": (preds == labels).float().mean().item() if len(labels) else 0.0,
            "mean_class_acc": float(np.mean(present)) if present else 0.0,
            "per_class_acc": per_class, "confusion": conf.tolist(), "n": len(labels)}


def evaluate(model: MaskedAutoencoderViT, dataset: ImageDataset, global_pool: bool = True) -> dict:
    return accuracy_report(predict(model, dataset, global_pool), dataset.labels, dataset.num_classes)

"""Flat ``key = value`` run configuration with typed fields and CLI overrides."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .model import MODEL_PRESETS, PatchConfig
from .training import FINETUNE_MASKING, STRATEGIES, LossConfig, TrainRunConfig

_SECTION = "run"
_MODEL_KEYS = ("image_size", "patch_size", "embed_dim", "num_heads", "encoder_depth",
               "decoder_dim", "decoder_depth", "decoder_heads")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunConfig:
    # data
    dataset: str = "synth:512"
    num_classes: int = 4
    data_seed: int = 0
    train_fraction: float = 0.8
    # model (preset, then per-field overrides; 0 keeps the preset's value)
    model: str = "desk"
    image_size: int = 0
    patch_size: int = 0
    embed_dim: int = 0
    num_heads: int = 0
    encoder_depth: int = -1
    decoder_dim: int = 0
    decoder_depth: int = -1
    decoder_heads: int = 0
    # schedule
    strategy: str = "sam"
    finetune_masking: str = "sam"
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
    beta1: float = 0.9
    beta2: float = 0.95
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    flip_prob: float = 0.5
    warm_start_head: bool = False
    # loss
    lambda_cls: float = 0.1
    norm_pix_loss: bool = True
    recon_form: str = "mse"

    @classmethod
    def defaults(cls, phase: str = "pretrain") -> "RunConfig":
        if phase == "finetune":
            return cls(epochs=100, warmup_epochs=5, batch_size=256, weight_update_interval=20, beta2=0.999)
        return cls()

    # ---- parsing ------------------------------------------------------------

    @staticmethod
    def _coerce(name: str, typ, raw):
        if isinstance(raw, str):
            raw = raw.strip()
        try:
            if typ is bool or typ == "bool":
                if isinstance(raw, bool):
                    return raw
                low = str(raw).lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            if typ is int or typ == "int":
                return int(raw)
            if typ is float or typ == "float":
                return float(raw)
            return str(raw)
        except (TypeError, ValueError):
            tname = getattr(typ, "__name__", typ)
            raise ConfigError(name, f"expected {tname}, got {raw!r}") from None

    def update(self, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        for key, raw in values.items():
            if raw is None:
                continue
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
            setattr(self, key, self._coerce(key, known[key].type, raw))
        self.validate()
        return self

    @classmethod
    def from_text(cls, text: str, phase: str = "pretrain") -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
        try:
            parser.read_string(f"[{_SECTION}]\n" + text)
        except configparser.Error as exc:
            raise ConfigError("<file>", str(exc).splitlines()[0]) from None
        return cls.defaults(phase).update(dict(parser[_SECTION]))

    @classmethod
    def from_file(cls, path, phase: str = "pretrain") -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError("<file>", f"config file {path} not found")
        return cls.from_text(path.read_text(), phase)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    # ---- validation -----------------------------------------------------------

    def validate(self):
        def need(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        need(self.model in MODEL_PRESETS, "model", f"must be one of {sorted(MODEL_PRESETS)}")
        need(self.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
        need(self.finetune_masking in FINETUNE_MASKING, "finetune_masking", f"must be one of {FINETUNE_MASKING}")
        need(self.sampling_mode in ("stochastic", "deterministic"), "sampling_mode",
             "must be 'stochastic' or 'deterministic'")
        need(self.recon_form in ("mse", "l2"), "recon_form", "must be 'mse' or 'l2'")
        for name in ("mask_ratio", "throw_ratio", "train_fraction", "flip_prob"):
            need(0.0 <= getattr(self, name) <= 1.0, name, "must be in [0, 1]")
        need(self.mask_ratio + self.throw_ratio <= 1.0 + 1e-12, "throw_ratio", "mask_ratio + throw_ratio must be <= 1")
        need(self.epochs >= 1, "epochs", "must be >= 1")
        need(0 <= self.warmup_epochs <= self.epochs, "warmup_epochs", "must be in [0, epochs]")
        need(self.weight_update_interval >= 1, "weight_update_interval", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.base_lr > 0, "base_lr", "must be > 0")
        need(self.lambda_cls >= 0, "lambda_cls", "must be >= 0")
        need(self.num_classes >= 1, "num_classes", "must be >= 1")
        need(0 < self.crop_scale_min <= self.crop_scale_max <= 1.0, "crop_scale_min",
             "need 0 < crop_scale_min <= crop_scale_max <= 1")
        need(0 < self.layerwise_lr_decay <= 1.0, "layerwise_lr_decay", "must be in (0, 1]")
        need(":" in self.dataset, "dataset", "expected synth:<n>, synthdir:<path> or folder:<path>")
        return self

    # ---- builders -------------------------------------------------------------

    def patch_config(self, num_classes: Optional[int] = None) -> PatchConfig:
        overrides = {}
        for key in _MODEL_KEYS:
            v = getattr(self, key)
            if (key.endswith("depth") and v >= 0) or (not key.endswith("depth") and v > 0):
                overrides[key] = v
        overrides["num_classes"] = num_classes or self.num_classes
        try:
            return MODEL_PRESETS[self.model](**overrides)
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from None

    def train_config(self) -> TrainRunConfig:
        return TrainRunConfig(
            epochs=self.epochs, warmup_epochs=self.warmup_epochs, base_lr=self.base_lr, min_lr=self.min_lr,
            weight_decay=self.weight_decay, batch_size=self.batch_size, mask_ratio=self.mask_ratio,
            throw_ratio=self.throw_ratio, weight_update_interval=self.weight_update_interval,
            layerwise_lr_decay=self.layerwise_lr_decay, global_pool=self.global_pool, seed=self.seed,
            sampling_mode=self.sampling_mode, betas=(self.beta1, self.beta2),
            crop_scale=(self.crop_scale_min, self.crop_scale_max), flip_prob=self.flip_prob,
            warm_start_head=self.warm_start_head,
            loss=LossConfig(self.lambda_cls, self.norm_pix_loss, self.recon_form))

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw).validate()

"""Command-line entry points: pretrain, finetune, eval, maskdump, flops.

Every command writes under a run directory (``--run-dir``, or a fresh
directory below ``$SAMMAE_RUN_ROOT``, default ``./runs``) and exits 0 on
success, 2 with a JSON error record on stderr otherwise.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .config import ConfigError, RunConfig
from .data import DatasetError, ImageDataset, augment, load_dataset_uri
from .masking import (MaskingRatios, MissingWeightsError, partition, pool_patches, safe_stem,
                      sample_indices, write_mask_dump)
from .metrics import (count_flops, export_overlays, mask_precision, partition_overlay, save_json,
                      weight_contrast)
from .model import MaskedAutoencoderViT, PatchConfig, load_checkpoint, read_checkpoint
from .training import TrainingDiverged, evaluate, finetune, pretrain, update_masking_weights

log = logging.getLogger("sammae")

RUN_ROOT_ENV = "SAMMAE_RUN_ROOT"
CONFIG_NAME = "config.cfg"


class CommandError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# run directory helpers

def make_run_dir(explicit, phase: str, tag: str) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        path = root / f"{phase}-{tag}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_run(run_dir) -> tuple[Path, RunConfig, dict]:
    run_dir = Path(run_dir)
    info_path = run_dir / "run.json"
    if not info_path.is_file():
        raise CommandError(f"{run_dir} is not a run directory (run.json missing)")
    info = json.loads(info_path.read_text())
    cfg = RunConfig.from_file(run_dir / CONFIG_NAME, info.get("phase", "pretrain"))
    return run_dir, cfg, info


def run_checkpoint(run_dir: Path) -> Path:
    ckpt = run_dir / "checkpoints" / "checkpoint-last.pth"
    if not ckpt.is_file():
        raise CommandError(f"no checkpoint found at {ckpt}")
    return ckpt


def build_datasets(cfg: RunConfig) -> tuple[ImageDataset, ImageDataset]:
    ds = load_dataset_uri(cfg.dataset, cfg.patch_config().image_size, cfg.num_classes, cfg.data_seed)
    return ds.split(cfg.train_fraction, cfg.data_seed)


def resolve_config(args, phase: str) -> RunConfig:
    cfg = RunConfig.from_file(args.config, phase) if args.config else RunConfig.defaults(phase)
    overrides = {k: getattr(args, k, None) for k in OVERRIDE_KEYS}
    if getattr(args, "no_sam", False):
        overrides["finetune_masking"] = "none"
    if overrides["epochs"] is not None and overrides["warmup_epochs"] is None:
        # a short --epochs on its own shortens the warmup instead of failing validation
        epochs = RunConfig._coerce("epochs", int, overrides["epochs"])
        if cfg.warmup_epochs > epochs:
            log.warning("warmup_epochs %d exceeds epochs %d; using %d", cfg.warmup_epochs, epochs, epochs)
            overrides["warmup_epochs"] = epochs
    return cfg.update(overrides)


def _write_run_info(run_dir: Path, cfg: RunConfig, **info):
    (run_dir / CONFIG_NAME).write_text(cfg.to_text())
    (run_dir / "run.json").write_text(json.dumps(info, indent=1))


def _progress(rec):
    log.info("epoch %d %s", rec["epoch"],
             " ".join(f"{k}={v:.4f}" for k, v in rec.items() if isinstance(v, float) and k != "lr"))


# --------------------------------------------------------------------------
# commands

def cmd_pretrain(args) -> Path:
    cfg = resolve_config(args, "pretrain")
    train_ds, _ = build_datasets(cfg)
    run_dir = make_run_dir(args.run_dir, "pretrain", cfg.strategy)
    _write_run_info(run_dir, cfg, phase="pretrain", strategy=cfg.strategy)
    torch.manual_seed(cfg.seed)
    model = MaskedAutoencoderViT(cfg.patch_config(train_ds.num_classes))
    result = pretrain(model, train_ds, cfg.train_config(), cfg.strategy, run_dir, on_epoch=_progress)
    plotting.plot_loss_curves(result.metrics, run_dir / "figures" / "loss_curves.png",
                              title=f"pre-training ({cfg.strategy})")
    print(json.dumps({"run_dir": str(run_dir), "final": result.metrics[-1]}))
    return run_dir


def cmd_finetune(args) -> Path:
    cfg = resolve_config(args, "finetune")
    train_ds, val_ds = build_datasets(cfg)
    run_dir = make_run_dir(args.run_dir, "finetune", cfg.finetune_masking)
    init = None
    torch.manual_seed(cfg.seed)
    model = MaskedAutoencoderViT(cfg.patch_config(train_ds.num_classes))
    if args.checkpoint:
        init = str(Path(args.checkpoint).resolve())
        params, meta = read_checkpoint(args.checkpoint)
        ck_cfg = PatchConfig(**meta["config"])
        mine = model.cfg.to_dict()
        theirs = ck_cfg.to_dict()
        mismatch = {k: (theirs[k], mine[k]) for k in mine if k != "num_classes" and theirs[k] != mine[k]}
        if mismatch:
            raise CommandError(f"checkpoint/config dimension mismatch: {mismatch}")
        if ck_cfg.num_classes != model.cfg.num_classes:
            params = {k: v for k, v in params.items() if not k.startswith("head.")}
        missing, unexpected = model.load_state_dict(params, strict=False)
        if unexpected or any(not k.startswith("head.") for k in missing):
            raise CommandError(f"checkpoint does not fit the model: missing={missing} unexpected={unexpected}")
    _write_run_info(run_dir, cfg, phase="finetune", masking=cfg.finetune_masking, init_checkpoint=init)
    result = finetune(model, train_ds, cfg.train_config(), cfg.finetune_masking, run_dir,
                      val_dataset=val_ds if len(val_ds) else None, on_epoch=_progress)
    plotting.plot_loss_curves(result.metrics, run_dir / "figures" / "loss_curves.png", title="fine-tuning")
    plotting.plot_accuracy(result.metrics, run_dir / "figures" / "accuracy.png")
    print(json.dumps({"run_dir": str(run_dir), "final": result.metrics[-1]}))
    return run_dir


def cmd_eval(args) -> dict:
    run_dir, cfg, info = load_run(args.run_dir)
    model, meta = load_checkpoint(run_checkpoint(run_dir))
    train_ds, val_ds = build_datasets(cfg)
    global_pool = cfg.global_pool if info.get("phase") == "finetune" else False
    report = {"run_dir": str(run_dir), "phase": info.get("phase"), "epoch": meta.get("epoch"),
              "feature": "global_pool" if global_pool else "cls_token",
              "tokens": model.cfg.num_patches + 1,
              "val": evaluate(model, val_ds, global_pool) if len(val_ds) else None,
              "train": evaluate(model, train_ds, global_pool)}
    save_json(report, run_dir / "eval.json")
    print(json.dumps({k: report[k] for k in ("phase", "epoch", "tokens")} |
                     {"val_top1": report["val"]["top1"] if report["val"] else None,
                      "val_mean_class_acc": report["val"]["mean_class_acc"] if report["val"] else None}))
    return report


def _dump_weights(model, ds: ImageDataset, cfg: RunConfig, epoch: int):
    cache = update_masking_weights(model, ds, epoch=epoch)
    maps = torch.stack([cache.get(i).pixel_map for i in ds.image_ids])
    weights = pool_patches(maps, model.cfg.patch_size)
    order = sample_indices(weights, cfg.sampling_mode, cfg.seed)
    parts = partition(order, MaskingRatios(cfg.mask_ratio, cfg.throw_ratio))
    return maps, weights, parts


def cmd_maskdump(args) -> Path:
    run_dir, cfg, info = load_run(args.run_dir)
    model, meta = load_checkpoint(run_checkpoint(run_dir))
    _, val_ds = build_datasets(cfg)
    source = val_ds if len(val_ds) else build_datasets(cfg)[0]
    n = min(args.n_images, len(source))
    ds = source.subset(range(n))
    epoch = int(meta.get("epoch", 0))
    maps, weights, parts = _dump_weights(model, ds, cfg, epoch)
    out = run_dir / "maskdump"
    images = [augment(ds.images[i], "eval")[0].numpy() for i in range(n)]
    part_imgs = []
    for i, image_id in enumerate(ds.image_ids):
        stem = safe_stem(image_id)
        write_mask_dump(out / "records", image_id, epoch, maps[i], parts[i])
        export_overlays(images[i], maps[i].numpy(), parts[i], out / "overlays", stem, model.cfg.patch_size)
        part_imgs.append(partition_overlay(images[i], parts[i], model.cfg.patch_size))
    plotting.plot_mask_grid(images, [m.numpy() for m in maps], part_imgs, out / "figures" / "mask_grid.png",
                            titles=ds.image_ids)
    summary = {"n_images": n, "epoch": epoch, "strategy": info.get("strategy", info.get("masking"))}
    if ds.lesion_masks is not None:
        summary["precision"] = mask_precision(parts, ds.lesion_masks, model.cfg.patch_size, weights).to_dict()
        summary["weight_contrast"] = weight_contrast(weights, ds.lesion_masks, model.cfg.patch_size)
    if args.compare:
        other_dir, other_cfg, other_info = load_run(args.compare)
        other, other_meta = load_checkpoint(run_checkpoint(other_dir))
        other_maps, _, _ = _dump_weights(other, ds, other_cfg, int(other_meta.get("epoch", 0)))
        name_a = other_info.get("strategy", "other")
        name_b = info.get("strategy", "this")
        if name_a == name_b:
            name_a, name_b = f"{name_a} ({other_dir.name})", f"{name_b} ({run_dir.name})"
        plotting.plot_weight_comparison(images, {name_a: [m.numpy() for m in other_maps],
                                                 name_b: [m.numpy() for m in maps]},
                                        out / "figures" / "comparison.png")
        summary["compared_with"] = str(other_dir)
    save_json(summary, out / "summary.json")
    print(json.dumps(summary))
    return out


def flops_row(cfg: PatchConfig, r: float, t: float, ops_per_mac: int = 1) -> dict:
    N = cfg.num_patches
    tokens = MaskingRatios(r, t).visible_count(N) + 1
    full = count_flops(cfg, N + 1, ops_per_mac)
    part = count_flops(cfg, tokens, ops_per_mac)
    return {"mask_ratio": r, "throw_ratio": t, "tokens": tokens, "full_tokens": N + 1,
            "gflops": part.total / 1e9, "full_gflops": full.total / 1e9,
            "reduction_pct": 100.0 * (1.0 - part.total / full.total),
            "token_reduction_pct": 100.0 * (1.0 - tokens / (N + 1))}


def cmd_flops(args) -> dict:
    if args.config:
        rc = RunConfig.from_file(args.config)
        cfg = rc.patch_config()
        r = rc.mask_ratio if args.mask_ratio is None else args.mask_ratio
        t = rc.throw_ratio if args.throw_ratio is None else args.throw_ratio
    else:
        cfg = PatchConfig(image_size=args.image_size, patch_size=args.patch_size, embed_dim=args.embed_dim,
                          num_heads=args.num_heads, encoder_depth=args.depth, num_classes=args.num_classes)
        r = 0.45 if args.mask_ratio is None else args.mask_ratio
        t = 0.30 if args.throw_ratio is None else args.throw_ratio
    MaskingRatios(r, t)
    row = flops_row(cfg, r, t, args.ops_per_mac)
    full = count_flops(cfg, cfg.num_patches + 1, args.ops_per_mac)
    masked = count_flops(cfg, row["tokens"], args.ops_per_mac)
    report = {"config": cfg.to_dict(), "ops_per_mac": args.ops_per_mac, "mask_ratio": r, "throw_ratio": t,
              "full": full.to_dict(), "masked": masked.to_dict(),
              "reduction_pct": row["reduction_pct"], "token_reduction_pct": row["token_reduction_pct"]}
    out = Path(args.out) if args.out else None
    w = csv.writer(sys.stdout)
    w.writerow(["pass", "tokens", "gflops"])
    w.writerow(["full", cfg.num_patches + 1, f"{full.total / 1e9:.3f}"])
    w.writerow(["masked", row["tokens"], f"{masked.total / 1e9:.3f}"])
    w.writerow(["reduction_pct", "", f"{row['reduction_pct']:.2f}"])
    w.writerow(["token_reduction_pct", "", f"{row['token_reduction_pct']:.2f}"])
    if out is not None:
        save_json(report, out / "flops.json")
    if args.sweep:
        grid = np.round(np.arange(0.0, 1.0 + 1e-9, args.sweep_step), 6)
        rows = [flops_row(cfg, float(a), float(b), args.ops_per_mac)
                for a in grid for b in grid if a + b <= 1.0 + 1e-9]
        buf = io.StringIO()
        sw = csv.DictWriter(buf, fieldnames=list(rows[0]))
        sw.writeheader()
        sw.writerows(rows)
        sys.stdout.write(buf.getvalue())
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "flops_sweep.csv").write_text(buf.getvalue())
            plotting.plot_flops_sweep(rows, out / "flops_sweep.png")
        report["sweep"] = rows
    return report


# --------------------------------------------------------------------------
# argument parsing

OVERRIDE_KEYS = ("dataset", "num_classes", "data_seed", "train_fraction", "model", "image_size", "patch_size",
                 "embed_dim", "num_heads", "encoder_depth", "decoder_dim", "decoder_depth", "decoder_heads",
                 "strategy", "finetune_masking", "epochs", "warmup_epochs", "base_lr", "min_lr", "weight_decay",
                 "batch_size", "mask_ratio", "throw_ratio", "weight_update_interval", "layerwise_lr_decay",
                 "global_pool", "seed", "sampling_mode", "beta1", "beta2", "crop_scale_min", "crop_scale_max",
                 "flip_prob", "warm_start_head", "lambda_cls", "norm_pix_loss", "recon_form")


def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--run-dir", help="output directory (default: new directory under $%s)" % RUN_ROOT_ENV)
    g = p.add_argument_group("config overrides")
    for key in OVERRIDE_KEYS:
        flag = "--" + key.replace("_", "-")
        g.add_argument(flag, dest=key, default=None, metavar="V")
    g.add_argument("--lambda", dest="lambda_cls", default=None, metavar="V", help="alias of --lambda-cls")


class _Parser(argparse.ArgumentParser):
    """Usage errors go to stderr as JSON, like every other failure."""

    def error(self, message):
        print(json.dumps({"error": "usage", "message": message, "usage": self.format_usage().strip()}),
              file=sys.stderr)
        self.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sammae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="masked-autoencoder pre-training (random / amt / sam)")
    _add_overrides(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning, optionally with SAM token masking")
    _add_overrides(p)
    p.add_argument("--checkpoint", help="pre-training checkpoint; omit for a random-init encoder")
    p.add_argument("--no-sam", action="store_true", help="feed all tokens during fine-tuning")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="all-token evaluation of a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("maskdump", help="export masking weights, partitions and overlays")
    p.add_argument("run_dir")
    p.add_argument("-n", "--n-images", type=int, default=4)
    p.add_argument("--compare", help="second run directory for a side-by-side weight figure")
    p.set_defaults(func=cmd_maskdump)

    p = sub.add_parser("flops", help="analytical FLOPs of full-token vs masked encoder passes")
    p.add_argument("--config")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=768)
    p.add_argument("--num-heads", type=int, default=12)
    p.add_argument("--depth", type=int, default=12)
    p.add_argument("--num-classes", type=int, default=1000)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--throw-ratio", type=float)
    p.add_argument("--ops-per-mac", type=int, choices=(1, 2), default=1)
    p.add_argument("--sweep", action="store_true", help="also emit a CSV over an (r, t) grid")
    p.add_argument("--sweep-step", type=float, default=0.15)
    p.add_argument("--out", help="directory for flops.json / sweep CSV and figure")
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        err = {"error": "config", "field": exc.field, "message": str(exc)}
    except (CommandError, DatasetError, MissingWeightsError, FileNotFoundError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
    except TrainingDiverged as exc:
        err = {"error": "diverged", "message": str(exc), "record": exc.record}
    else:
        return 0
    print(json.dumps(err), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())

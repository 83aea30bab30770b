"""Scaled-experiment harness: ablation grid, timestep ordering, mask sweep.

Builds everything the acceptance tests assert about end-to-end behavior:

* a 4-class synthetic dataset (200 images per class, 64x64),
* one pretrained frozen toy backbone shared by all runs,
* five training configs (full, mask off, guidance off, uniform timesteps,
  high-range timesteps) across three seeds,
* a mask-quality sweep over the masking timestep.

Every training run is cached on disk under its config hash, so an
interrupted grid resumes where it stopped.  The final ``summary.json`` is
the only artifact the test suite reads:

    python3 -m proxyclust.experiments --root runs/acceptance

Expect roughly an hour on a laptop CPU for the full grid from scratch
(most of it the 15 training runs); cached reruns are instant.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import time

import numpy as np

from .backbone import ToyBackbone
from .config import toy_profile
from .data import SynthSpec, generate_synthetic, load_dataset
from .metrics import acc, acc_many_to_one, nmi
from .pipeline import compute_masks, pretrain_backbone, run_training

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2)
DATA_SEED = 7
MASK_SWEEP_T = (2, 5, 10, 20, 40, 80, 120, 160, 190)


def base_config(manifest, backbone_path, **overrides):
    """The full-model toy config all grid entries are derived from."""
    return toy_profile(
        data_manifest=manifest,
        backbone_path=backbone_path,
        **overrides,
    )


def ablation_grid(base):
    """name -> config for the five-run grid (criterions on ordering reuse 'full')."""
    return {
        "full": base,
        "mask_off": base.replace(mask=False),
        "guidance_off": base.replace(guidance=False),
        "uniform_t": base.replace(timestep_mode="uniform"),
        "range_high_t": base.replace(
            timestep_mode="range",
            t_lo=base.total_steps // 2,
            t_hi=base.total_steps,
        ),
    }


def ensure_dataset(root, classes=4, per_class=200, image_size=64, seed=DATA_SEED):
    """Generate the synthetic split once; reuse it afterwards."""
    data_dir = os.path.join(root, "data")
    manifest = os.path.join(data_dir, "train", "manifest.tsv")
    if not os.path.exists(manifest):
        spec = SynthSpec(classes=classes, per_class=per_class, image_size=image_size)
        generate_synthetic(spec, seed, data_dir)
        log.info("dataset generated at %s", data_dir)
    return manifest


PRETRAIN_FIELDS = (
    "data_manifest", "image_size", "total_steps", "batch_size", "d_txt",
    "toy_base", "toy_heads", "toy_stem_stride", "toy_tdim",
    "pretrain_epochs", "pretrain_lr", "pretrain_seed", "pretrain_cond_mix",
)


def pretrain_key(cfg):
    blob = ";".join(f"{f}={getattr(cfg, f)!r}" for f in PRETRAIN_FIELDS)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def ensure_backbone(root, cfg, log_every=20):
    """Pretrain (or reuse) the frozen backbone, keyed by what pretraining reads."""
    tag = pretrain_key(cfg)
    path = os.path.join(root, f"backbone_{tag}.pt")
    meta_path = path + ".json"
    if os.path.exists(path) and os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        return path, meta
    t0 = time.time()
    _, history = pretrain_backbone(cfg.replace(backbone_path=""), save_to=path, log_every=log_every)
    meta = {
        "pretrain_epochs": cfg.pretrain_epochs,
        "pretrain_cond_mix": cfg.pretrain_cond_mix,
        "pretrain_seed": cfg.pretrain_seed,
        "first_loss": history[0],
        "final_loss": history[-1],
        "seconds": round(time.time() - t0, 1),
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=1)
    log.info("backbone pretrained in %.0fs, loss %.3f -> %.3f", meta["seconds"], history[0], history[-1])
    return path, meta


def run_cached(name, cfg, dataset, backbone, cache_dir):
    """Run one training config, or load its cached result."""
    os.makedirs(cache_dir, exist_ok=True)
    cache = os.path.join(cache_dir, f"{name}_seed{cfg.seed}_{cfg.hash()}.json")
    if os.path.exists(cache):
        with open(cache) as fh:
            return json.load(fh)
    t0 = time.time()
    res = run_training(cfg, dataset=dataset, backbone=backbone)
    true = np.asarray(dataset.labels)
    row = {
        "name": name,
        "seed": cfg.seed,
        "cfg_hash": cfg.hash(),
        "acc": acc(res.final_pred, true, strict=False),
        "acc_many_to_one": acc_many_to_one(res.final_pred, true),
        "nmi": nmi(res.final_pred, true),
        "final_mode": res.final_mode,
        "rebuilds": res.rebuilds,
        "seconds": round(time.time() - t0, 1),
        "history": res.history,
    }
    with open(cache, "w") as fh:
        json.dump(row, fh, indent=1)
    log.info("%-14s seed %d: acc %.3f nmi %.3f (%.0fs)", name, cfg.seed, row["acc"], row["nmi"], row["seconds"])
    return row


def mask_sweep(backbone, dataset, t_tildes=MASK_SWEEP_T, limit=128):
    """Mean IoU of computed masks against the generator's foreground truth."""
    truth = dataset.truth_masks[:limit]
    rows = []
    for tt in t_tildes:
        masks, coverage = compute_masks(backbone, dataset.images[:limit], tt)
        pred = masks[:, 0].numpy() > 0.5
        inter = (pred & truth).sum(axis=(1, 2)).astype(np.float64)
        union = (pred | truth).sum(axis=(1, 2)).astype(np.float64)
        iou = float(np.mean(inter / np.maximum(union, 1.0)))
        mean_cov = float(np.mean(coverage))
        rows.append({"t_tilde": int(tt), "iou": round(iou, 4), "coverage": round(mean_cov, 4)})
        log.info("mask sweep t_tilde=%3d: IoU %.3f coverage %.3f", tt, iou, mean_cov)
    return rows


def seed_mean(runs, name):
    return float(np.mean([r["acc"] for r in runs[name]]))


def build_summary(root, seeds=SEEDS, pretrain_epochs=300, run_overrides=None,
                  classes=4, per_class=200, image_size=64, data_seed=DATA_SEED,
                  t_tildes=MASK_SWEEP_T, sweep_limit=128):
    """Materialize every artifact and return the summary dict."""
    os.makedirs(root, exist_ok=True)
    manifest = ensure_dataset(root, classes=classes, per_class=per_class,
                              image_size=image_size, seed=data_seed)
    pre_cfg = base_config(manifest, "", pretrain_epochs=pretrain_epochs,
                          clusters=classes, **(run_overrides or {}))
    backbone_path, pre_meta = ensure_backbone(root, pre_cfg)
    backbone = ToyBackbone.load(backbone_path)
    dataset = load_dataset(manifest, with_truth_masks=True)

    base = base_config(manifest, backbone_path, pretrain_epochs=pretrain_epochs,
                       clusters=classes, **(run_overrides or {}))
    runs = {}
    for name, cfg in ablation_grid(base).items():
        runs[name] = [
            run_cached(name, cfg.replace(seed=s), dataset, backbone, os.path.join(root, "grid"))
            for s in seeds
        ]

    sweep = mask_sweep(backbone, dataset, t_tildes=t_tildes, limit=sweep_limit)

    means = {name: round(seed_mean(runs, name), 4) for name in runs}
    summary = {
        "dataset": {"classes": classes, "per_class": per_class,
                    "image_size": image_size, "seed": data_seed},
        "pretrain": pre_meta,
        "seeds": list(seeds),
        "base_cfg": dataclasses.asdict(base),
        "runs": {
            name: [
                {k: v for k, v in r.items() if k != "history"} for r in rows
            ]
            for name, rows in runs.items()
        },
        "acc_seed_mean": means,
        "ablation_ordering": {
            "full": means["full"],
            "mask_off": means["mask_off"],
            "guidance_off": means["guidance_off"],
        },
        "timestep_ordering": {
            "weighted": means["full"],
            "uniform": means["uniform_t"],
            "range_high": means["range_high_t"],
        },
        "mask_sweep": sweep,
    }
    out = os.path.join(root, "summary.json")
    with open(out, "w") as fh:
        json.dump(summary, fh, indent=1)
    log.info("summary written to %s", out)
    return summary


def main(argv=None):
    ap = argparse.ArgumentParser(description="build the scaled-experiment summary")
    ap.add_argument("--root", default="runs/acceptance", help="artifact directory")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--pretrain-epochs", type=int, default=300)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", datefmt="%H:%M:%S")
    summary = build_summary(args.root, seeds=tuple(args.seeds), pretrain_epochs=args.pretrain_epochs)
    means = summary["acc_seed_mean"]
    print("seed-mean ACC:", json.dumps(means, indent=1))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

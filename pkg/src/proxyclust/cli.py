"""Command line entry points.

Subcommands cover the full workflow: synth-gen, pretrain, mask-dump, train,
cluster, evaluate.  Every command reads a key=value config file when given,
then applies flag overrides.  Failures print one machine-parsable line
``error-category: <category>: <message>`` and exit nonzero.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import metrics, pipeline
from .config import RunConfig, apply_overrides, load_config, save_config, toy_profile
from .data import SynthSpec, generate_synthetic, load_dataset, load_manifest
from .errors import BackboneStateError, NumericError
from .masking import write_pgm

log = logging.getLogger(__name__)

_CATEGORIES = (
    (NumericError, "numeric-error", 6),
    (BackboneStateError, "state-error", 5),
    (FileNotFoundError, "io-error", 4),
    (OSError, "io-error", 4),
    (ValueError, "invalid-argument", 3),
)


def _config_from(args):
    cfg = toy_profile() if args.profile == "toy" else RunConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    direct = {
        "data_manifest": getattr(args, "data", None),
        "backbone_path": getattr(args, "backbone", None),
        "out_dir": getattr(args, "out_dir", None),
        "seed": getattr(args, "seed", None),
        "epochs": getattr(args, "epochs", None),
        "warmup_epochs": getattr(args, "warmup", None),
        "mask": getattr(args, "mask", None),
        "guidance": getattr(args, "guidance", None),
        "timestep_mode": getattr(args, "timesteps", None),
        "t_lo": getattr(args, "t_lo", None),
        "t_hi": getattr(args, "t_hi", None),
        "t_tilde": getattr(args, "t_tilde", None),
        "t_hat": getattr(args, "t_hat", None),
        "clusters": getattr(args, "clusters", None),
        "pretrain_epochs": getattr(args, "pretrain_epochs", None),
    }
    overrides = {k: str(v) for k, v in direct.items() if v is not None}
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        overrides[k.strip()] = v.strip()
    return apply_overrides(cfg, overrides)


def _add_config_flags(p, with_train_flags=False):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--profile", choices=("toy", "paper"), default="toy",
                   help="base defaults before config/flags (default toy)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--data", help="dataset manifest path")
    p.add_argument("--seed", type=int)
    if with_train_flags:
        p.add_argument("--backbone", help="pretrained backbone checkpoint")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--epochs", type=int)
        p.add_argument("--warmup", type=int)
        p.add_argument("--clusters", type=int)
        p.add_argument("--mask", choices=("on", "off"))
        p.add_argument("--guidance", choices=("on", "off"))
        p.add_argument("--timesteps", choices=("weighted", "uniform", "range"))
        p.add_argument("--t-lo", dest="t_lo", type=int)
        p.add_argument("--t-hi", dest="t_hi", type=int)


def cmd_synth_gen(args):
    spec = SynthSpec(classes=args.classes, per_class=args.per_class,
                     image_size=args.size, split=args.split)
    manifest = generate_synthetic(spec, args.seed, args.out)
    print(f"manifest={manifest}")
    return 0


def cmd_pretrain(args):
    cfg = _config_from(args)
    cfg = cfg.replace(backbone_path=args.out or cfg.backbone_path)
    if not cfg.data_manifest:
        raise ValueError("pretrain needs --data (dataset manifest)")
    if not cfg.backbone_path:
        raise ValueError("pretrain needs --out (checkpoint path)")
    backbone, history = pipeline.pretrain_backbone(cfg, log_every=args.log_every)
    print(f"backbone={cfg.backbone_path} final_loss={history[-1]:.5f} epochs={len(history)}")
    return 0


def cmd_mask_dump(args):
    cfg = _config_from(args)
    if not cfg.data_manifest:
        raise ValueError("mask-dump needs --data")
    dataset = load_dataset(cfg.data_manifest, cfg.image_size or None)
    backbone = pipeline.load_backbone_for(cfg)
    masks, coverage = pipeline.compute_masks(backbone, dataset.images, cfg.t_tilde)
    os.makedirs(args.out, exist_ok=True)
    arr = masks[:, 0].numpy() > 0.5
    for rel, m in zip(dataset.relpaths, arr):
        path = os.path.join(args.out, rel[:-4] + ".pgm")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        write_pgm(path, m)
    with open(os.path.join(args.out, "coverage.tsv"), "w") as f:
        f.write("image\tcoverage\n")
        for rel, c in zip(dataset.relpaths, coverage):
            f.write(f"{rel}\t{c:.4f}\n")
    print(f"masks={args.out} mean_coverage={coverage.mean():.4f} t_tilde={cfg.t_tilde}")
    return 0


def cmd_train(args):
    cfg = _config_from(args)
    if not cfg.data_manifest:
        raise ValueError("train needs --data")
    out_dir = cfg.out_dir or "run"
    os.makedirs(out_dir, exist_ok=True)
    cfg = cfg.replace(out_dir=out_dir)
    save_config(cfg, os.path.join(out_dir, "config.txt"))
    ckpt = os.path.join(out_dir, "checkpoint.pt")
    result = pipeline.run_training(
        cfg, resume=ckpt if args.resume else None, save_to=ckpt, log_every=args.log_every
    )
    if args.dump_curves:
        pipeline.write_history(os.path.join(out_dir, "curves.tsv"), result.history)
    last = result.history[-1]
    print(
        f"checkpoint={ckpt} epochs={cfg.epochs} acc={last['acc']:.4f} "
        f"nmi={last['nmi']:.4f} eval_mode={last['eval_mode']} config_hash={cfg.hash()}"
    )
    return 0


def cmd_cluster(args):
    pred, probs, relpaths = pipeline.run_inference(args.checkpoint)
    pipeline.export_assignments(args.out, relpaths, pred, probs)
    print(f"assignments={args.out} n={len(pred)}")
    return 0


def _read_labels(path):
    """Label column from an assignments table or a dataset manifest."""
    with open(path) as f:
        first = f.readline()
    if first.startswith("image\t"):
        return pipeline.read_assignments(path)
    man = load_manifest(path)
    return [rel for rel, _ in man.entries], np.asarray([c for _, c in man.entries], dtype=np.int64)


def cmd_evaluate(args):
    pred_ids, pred = _read_labels(args.pred)
    true_ids, true = _read_labels(args.truth)
    if pred_ids != true_ids:
        by_id = dict(zip(true_ids, true))
        if set(pred_ids) != set(by_id):
            raise ValueError("prediction and truth tables cover different images")
        true = np.asarray([by_id[i] for i in pred_ids], dtype=np.int64)
    record = {
        "acc": metrics.acc(pred, true, strict=not args.lenient),
        "acc_many_to_one": metrics.acc_many_to_one(pred, true),
        "nmi": metrics.nmi(pred, true, average=args.nmi_average),
        "N": len(pred),
        "C_pred": len(np.unique(pred)),
        "C_true": len(np.unique(true)),
        "config_hash": _config_from(args).hash() if args.config else "-",
    }
    lines = [f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items()]
    print(" ".join(lines))
    if args.out:
        with open(args.out, "w") as f:
            f.write("\n".join(lines) + "\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="proxyclust",
                                description="Fine-grained image clustering by distilling "
                                            "semantics into a diffusion model's condition")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("synth-gen", help="generate the synthetic fine-grained dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--split", default="train")
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(fn=cmd_synth_gen)

    pr = sub.add_parser("pretrain", help="pretrain and freeze the toy denoiser")
    _add_config_flags(pr)
    pr.add_argument("--out", help="where to write the backbone checkpoint")
    pr.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    pr.add_argument("--log-every", type=int, default=10)
    pr.set_defaults(fn=cmd_pretrain)

    md = sub.add_parser("mask-dump", help="write object masks as PGM files")
    _add_config_flags(md, with_train_flags=True)
    md.add_argument("--out", required=True)
    md.set_defaults(fn=cmd_mask_dump)

    tr = sub.add_parser("train", help="run the staged clustering protocol")
    _add_config_flags(tr, with_train_flags=True)
    tr.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    tr.add_argument("--dump-curves", action="store_true", help="write per-epoch metric rows")
    tr.add_argument("--log-every", type=int, default=0)
    tr.set_defaults(fn=cmd_train)

    cl = sub.add_parser("cluster", help="assign clusters with a finished checkpoint")
    cl.add_argument("--checkpoint", required=True)
    cl.add_argument("--out", required=True)
    cl.set_defaults(fn=cmd_cluster)

    ev = sub.add_parser("evaluate", help="score predictions against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--out")
    ev.add_argument("--nmi-average", choices=("geometric", "arithmetic"), default="geometric")
    ev.add_argument("--lenient", action="store_true",
                    help="allow fewer predicted clusters than classes")
    ev.add_argument("--config", help="config file, echoed as a hash in the record")
    ev.add_argument("--profile", choices=("toy", "paper"), default="toy")
    ev.add_argument("--set", action="append")
    ev.set_defaults(fn=cmd_evaluate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - single reporting point
        for etype, category, code in _CATEGORIES:
            if isinstance(e, etype):
                print(f"error-category: {category}: {e}", file=sys.stderr)
                return code
        print(f"error-category: internal-error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

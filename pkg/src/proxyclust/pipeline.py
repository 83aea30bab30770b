"""Staged training protocol, checkpointing, and inference.

Stage 1 (warm-up): only the semantic extractor trains, on the masked
denoising loss.  At the warm-up boundary the clustering head is created,
the first neighbor index is built, and from then on extractor and head
train jointly on the combined objective, with the index rebuilt at every
epoch end.  During warm-up (or with guidance disabled) the per-epoch
evaluation probe is k-means over proxies; afterwards it is the head argmax.

All randomness is derived statelessly from (seed, epoch, step, purpose), so
resuming from a checkpoint replays the exact trajectory.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.cluster import KMeans

from . import metrics
from .backbone import ToyBackbone, pretrain_toy
from .config import RunConfig
from .data import batch_indices, load_dataset
from .diffusion import make_schedule
from .distill import SemanticExtractor, distill_loss, param_hash
from .errors import BackboneStateError, NumericError
from .guidance import ClusterHead, MemoryBank, build_neighbor_index, guidance_loss, total_loss
from .masking import MaskComputer

log = logging.getLogger(__name__)

# purpose codes for seed derivation
P_DRAW, P_SHUFFLE, P_KMEANS, P_INIT_F, P_INIT_G, P_INIT_BB = 1, 2, 3, 4, 5, 6


def derive_seed(root, *key):
    """Stateless child seed for (purpose, epoch, step, ...) tuples."""
    return int(np.random.SeedSequence(root, spawn_key=tuple(int(k) for k in key)).generate_state(1)[0])


def derive_rng(root, *key):
    return np.random.default_rng(np.random.SeedSequence(root, spawn_key=tuple(int(k) for k in key)))


class FeatureCache:
    """Denoiser features for the whole dataset, computed once.

    Valid because the tap is a pure function of (image, t_hat, shared noise,
    block) and the backbone is frozen.
    """

    def __init__(self, backbone, images, t_hat, block, batch_size=64):
        feats = []
        for start in range(0, images.shape[0], batch_size):
            tap = backbone.tap_feature(images[start : start + batch_size], t_hat, b=block)
            feats.append(tap.z)
        self.z = torch.cat(feats)
        self.block = block
        self.t_hat = t_hat

    def __getitem__(self, idx):
        return self.z[np.asarray(idx)]

    @property
    def channels(self):
        return self.z.shape[1]


def compute_masks(backbone, images, t_tilde, batch_size=64):
    """Object masks for every image; returns (float tensor [N,1,H,W], coverage)."""
    computer = MaskComputer(backbone, t_tilde)
    out = []
    n = images.shape[0]
    for start in range(0, n, batch_size):
        idx = list(range(start, min(start + batch_size, n)))
        out.extend(computer.masks_for(images[idx], idx))
    stack = np.stack([m.mask for m in out])
    degenerate = sum(m.degenerate for m in out)
    if degenerate:
        log.warning("%d/%d mask fits were degenerate (all-ones fallback)", degenerate, n)
    return torch.from_numpy(stack[:, None].astype(np.float32)), stack.mean(axis=(1, 2))


def _build_extractor(cfg, in_channels):
    torch.manual_seed(derive_seed(cfg.seed, P_INIT_F))
    w = cfg.extractor_width
    return SemanticExtractor(in_channels, (w, w), cfg.extractor_pool, cfg.d_txt)


def _build_head(cfg):
    torch.manual_seed(derive_seed(cfg.seed, P_INIT_G))
    return ClusterHead(cfg.d_txt, cfg.clusters)


def _fit_head_to_partition(head, proxies, pseudo, passes=60, lr=1e-2):
    """Teach a fresh head the warmup k-means partition before joint training.

    A randomly initialized head under the guidance weight collapses to the
    uniform plateau and forgets the structure distillation built during
    warmup; seeding it with the last warmup partition keeps the joint phase
    refining that structure instead of rediscovering it.
    """
    target = torch.from_numpy(np.asarray(pseudo, dtype=np.int64))
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    for _ in range(passes):
        opt.zero_grad()
        logp = torch.log(head(proxies).clamp_min(1e-12))
        nn.functional.nll_loss(logp, target).backward()
        opt.step()


def _make_optimizer(cfg, extractor, head=None):
    params = list(extractor.parameters())
    if head is not None:
        params += list(head.parameters())
    return torch.optim.AdamW(params, lr=cfg.lr)


@torch.no_grad()
def extract_proxies(extractor, zcache, batch_size=256):
    extractor.eval()
    outs = []
    for start in range(0, zcache.z.shape[0], batch_size):
        outs.append(extractor(zcache.z[start : start + batch_size]))
    extractor.train()
    return torch.cat(outs)


def kmeans_probe(proxies, clusters, restarts, seed):
    """Seeded k-means over proxies; returns (labels, centroids)."""
    x = np.asarray(proxies, dtype=np.float64)
    km = KMeans(n_clusters=clusters, n_init=restarts, random_state=seed % (2**31)).fit(x)
    return km.labels_.astype(np.int64), km.cluster_centers_


def _evaluate(cfg, extractor, head, zcache, labels, epoch):
    proxies = extract_proxies(extractor, zcache)
    centroids = None
    if head is not None:
        with torch.no_grad():
            probs = head(proxies)
        pred = probs.argmax(dim=1).numpy()
        mode = "head"
    else:
        pred, centroids = kmeans_probe(
            proxies.numpy(), cfg.clusters, cfg.kmeans_restarts, derive_seed(cfg.seed, P_KMEANS, epoch)
        )
        mode = "kmeans"
    row = {
        "epoch": epoch,
        "acc": metrics.acc(pred, labels, strict=False),
        "nmi": metrics.nmi(pred, labels, average=cfg.nmi_average),
        "eval_mode": mode,
        "c_pred": int(len(np.unique(pred))),
    }
    return row, pred, proxies, centroids


@dataclass
class TrainResult:
    config: RunConfig
    extractor: SemanticExtractor
    head: ClusterHead | None
    bank: MemoryBank | None
    history: list
    final_pred: np.ndarray
    final_mode: str
    centroids: np.ndarray | None
    rebuilds: int
    checkpoint_path: str | None


def save_checkpoint(path, cfg, extractor, head, bank, optimizer, epoch, history, rebuilds, centroids):
    blob = {
        "config": dataclasses.asdict(cfg),
        "extractor": extractor.state_dict(),
        "extractor_in": extractor.features[0].in_channels,
        "head": head.state_dict() if head is not None else None,
        "bank": bank.state() if bank is not None else None,
        "optimizer": optimizer.state_dict(),
        "epoch": epoch,
        "history": history,
        "rebuilds": rebuilds,
        "centroids": centroids,
    }
    torch.save(blob, path)
    return path


def load_checkpoint(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def _restore(blob):
    cfg = RunConfig(**blob["config"])
    w = cfg.extractor_width
    extractor = SemanticExtractor(blob["extractor_in"], (w, w), cfg.extractor_pool, cfg.d_txt)
    extractor.load_state_dict(blob["extractor"])
    head = None
    if blob["head"] is not None:
        head = ClusterHead(cfg.d_txt, cfg.clusters)
        head.load_state_dict(blob["head"])
    bank = None
    if blob["bank"] is not None or cfg.guidance:
        bank = MemoryBank(cfg.bank_size, cfg.clusters)
        bank.load_state(blob["bank"])
    return cfg, extractor, head, bank


def load_backbone_for(cfg):
    if cfg.backbone != "toy":
        raise BackboneStateError("only the toy backbone ships with this package")
    if not cfg.backbone_path:
        raise BackboneStateError("config.backbone_path is empty; pretrain first")
    if not os.path.exists(cfg.backbone_path):
        raise BackboneStateError(f"no pretrained backbone at {cfg.backbone_path}")
    return ToyBackbone.load(cfg.backbone_path)


def make_toy_backbone(cfg, image_size):
    sched = make_schedule(cfg.total_steps)
    return ToyBackbone(
        image_size=image_size,
        base=cfg.toy_base,
        d_txt=cfg.d_txt,
        heads=cfg.toy_heads,
        t_dim=cfg.toy_tdim,
        stem_stride=cfg.toy_stem_stride,
        schedule=sched,
        init_seed=derive_seed(cfg.pretrain_seed, P_INIT_BB),
    )


def pretrain_backbone(cfg, dataset=None, save_to=None, log_every=10):
    """Create, pretrain, freeze, and optionally save the toy backbone."""
    if dataset is None:
        dataset = load_dataset(cfg.data_manifest, cfg.image_size or None)
    backbone = make_toy_backbone(cfg, dataset.images.shape[-1])
    history = pretrain_toy(
        backbone,
        dataset.images,
        cfg.pretrain_epochs,
        batch_size=cfg.batch_size,
        lr=cfg.pretrain_lr,
        seed=cfg.pretrain_seed,
        log_every=log_every,
        cond_mix=cfg.pretrain_cond_mix,
    )
    path = save_to or cfg.backbone_path
    if path:
        backbone.save(path)
    return backbone, history


def run_training(cfg, dataset=None, backbone=None, resume=None, save_to=None, log_every=0,
                 stop_after=None):
    """Execute the staged protocol; returns a TrainResult.

    resume: checkpoint path or blob from a previous partial run with the
    same config; training continues at the next epoch and reproduces the
    uninterrupted trajectory exactly.  stop_after caps the number of epochs
    actually run (simulating an interruption) without changing the config.
    """
    cfg.validate()
    if dataset is None:
        dataset = load_dataset(cfg.data_manifest, cfg.image_size or None)
    if backbone is None:
        backbone = load_backbone_for(cfg)
    if backbone.trainable:
        raise BackboneStateError("backbone must be pretrained and frozen before this stage")
    if backbone.schedule.total_steps != cfg.total_steps:
        raise ValueError(
            f"schedule mismatch: backbone T={backbone.schedule.total_steps}, config T={cfg.total_steps}"
        )
    images, labels = dataset.images, dataset.labels
    n = images.shape[0]
    sampler = cfg.sampler()
    schedule = backbone.schedule

    masks = None
    if cfg.mask:
        masks, coverage = compute_masks(backbone, images, cfg.t_tilde)
        log.info("masks ready: mean coverage %.3f", float(coverage.mean()))
    zcache = FeatureCache(backbone, images, cfg.t_hat, cfg.block)

    start_epoch = 0
    history, rebuilds = [], 0
    head, bank, index = None, None, None
    if resume is not None:
        blob = resume if isinstance(resume, dict) else load_checkpoint(resume)
        rcfg, extractor, head, bank = _restore(blob)
        if rcfg.hash() != cfg.hash():
            raise ValueError("checkpoint config does not match the requested config")
        history = list(blob["history"])
        rebuilds = blob["rebuilds"]
        start_epoch = blob["epoch"] + 1
        optimizer = _make_optimizer(cfg, extractor, head)
        optimizer.load_state_dict(blob["optimizer"])
        if head is not None:
            proxies = extract_proxies(extractor, zcache).numpy()
            index = build_neighbor_index(proxies, cfg.n_neighbors, cfg.neighbor_metric, epoch=start_epoch - 1)
    else:
        extractor = _build_extractor(cfg, zcache.channels)
        optimizer = _make_optimizer(cfg, extractor)

    backbone_hash_before = backbone.param_hash()
    final_pred, final_mode, centroids = None, "kmeans", None
    stop = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    for epoch in range(start_epoch, stop):
        if cfg.guidance and epoch >= cfg.warmup_epochs and head is None:
            head = _build_head(cfg)
            bank = MemoryBank(cfg.bank_size, cfg.clusters)
            proxies = extract_proxies(extractor, zcache).numpy()
            index = build_neighbor_index(proxies, cfg.n_neighbors, cfg.neighbor_metric, epoch=epoch - 1)
            rebuilds += 1
            optimizer = _make_optimizer(cfg, extractor, head)
            log.info("epoch %d: clustering head and neighbor index initialized", epoch)

        shuffle_rng = derive_rng(cfg.seed, P_SHUFFLE, epoch)
        sums = {"sd": 0.0, "nb": 0.0, "en": 0.0}
        steps = 0
        for step, idx in enumerate(batch_indices(n, cfg.batch_size, shuffle_rng)):
            rng = derive_rng(cfg.seed, P_DRAW, epoch, step)
            x0 = images[idx]
            m = masks[idx] if masks is not None else None
            report = distill_loss(
                x0, m, backbone, extractor, sampler, schedule,
                rng=rng, t_hat=cfg.t_hat, block=cfg.block, z=zcache[idx],
            )
            if head is not None:
                jdx = index.sample_neighbors(idx, rng)
                both = extractor(zcache[np.concatenate([idx, jdx])])
                probs = head(both)
                cg, comps = guidance_loss(
                    probs[: len(idx)], probs[len(idx) :], bank, lam=cfg.lam, variant=cfg.nb_variant
                )
                sums["nb"] += comps["nb"]
                sums["en"] += comps["en"]
            else:
                cg = torch.zeros(())
            try:
                loss = total_loss(report.loss, cg)
            except NumericError:
                log.error("non-finite loss at epoch %d step %d; aborting", epoch, step)
                raise
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums["sd"] += report.value
            steps += 1

        row, final_pred, proxies_t, centroids_now = _evaluate(cfg, extractor, head, zcache, labels, epoch)
        guided = head is not None
        row.update(
            loss_sd=sums["sd"] / steps,
            loss_nb=sums["nb"] / steps if guided else float("nan"),
            loss_en=sums["en"] / steps if guided else float("nan"),
        )
        history.append(row)
        final_mode = row["eval_mode"]
        if centroids_now is not None:
            centroids = centroids_now
        if guided:
            index = build_neighbor_index(proxies_t.numpy(), cfg.n_neighbors, cfg.neighbor_metric, epoch=epoch)
            rebuilds += 1
        if log_every and (epoch + 1) % log_every == 0:
            log.info(
                "epoch %d: sd %.4f acc %.3f nmi %.3f (%s)",
                epoch, row["loss_sd"], row["acc"], row["nmi"], row["eval_mode"],
            )

    if backbone.param_hash() != backbone_hash_before:
        raise BackboneStateError("backbone parameters changed during training")

    checkpoint_path = None
    if save_to:
        os.makedirs(os.path.dirname(os.path.abspath(save_to)), exist_ok=True)
        checkpoint_path = save_checkpoint(
            save_to, cfg, extractor, head, bank, optimizer, stop - 1, history, rebuilds, centroids
        )
    return TrainResult(
        config=cfg,
        extractor=extractor,
        head=head,
        bank=bank,
        history=history,
        final_pred=final_pred,
        final_mode=final_mode,
        centroids=centroids,
        rebuilds=rebuilds,
        checkpoint_path=checkpoint_path,
    )


def run_inference(checkpoint, dataset=None, backbone=None):
    """Assignments for a dataset from a finished checkpoint.

    Pipeline per image: noise at t_hat with the stored shared draw, tap the
    feature, extract the proxy, then head softmax (or stored k-means
    centroids when the run never had a head).
    """
    blob = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    cfg, extractor, head, _ = _restore(blob)
    if dataset is None:
        dataset = load_dataset(cfg.data_manifest, cfg.image_size or None)
    if backbone is None:
        backbone = load_backbone_for(cfg)
    zcache = FeatureCache(backbone, dataset.images, cfg.t_hat, cfg.block)
    proxies = extract_proxies(extractor, zcache)
    if head is not None:
        with torch.no_grad():
            probs = head(proxies).numpy()
    else:
        centroids = blob.get("centroids")
        if centroids is None:
            raise BackboneStateError("checkpoint has neither a head nor k-means centroids")
        d2 = ((proxies.numpy()[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        probs = np.zeros_like(d2)
        probs[np.arange(len(d2)), d2.argmin(axis=1)] = 1.0
    pred = probs.argmax(axis=1)
    return pred, probs, dataset.relpaths


def export_assignments(path, relpaths, pred, probs):
    with open(path, "w") as f:
        cols = "\t".join(f"p{c}" for c in range(probs.shape[1]))
        f.write(f"image\tcluster\t{cols}\n")
        for rel, k, row in zip(relpaths, pred, probs):
            f.write(f"{rel}\t{int(k)}\t" + "\t".join(f"{v:.6f}" for v in row) + "\n")


def read_assignments(path):
    relpaths, pred = [], []
    with open(path) as f:
        next(f)
        for line in f:
            parts = line.rstrip("\n").split("\t")
            relpaths.append(parts[0])
            pred.append(int(parts[1]))
    return relpaths, np.asarray(pred, dtype=np.int64)


def write_history(path, history):
    keys = ("epoch", "loss_sd", "loss_nb", "loss_en", "acc", "nmi", "eval_mode", "c_pred")
    with open(path, "w") as f:
        f.write("\t".join(keys) + "\n")
        for row in history:
            f.write("\t".join(str(row.get(k, "")) for k in keys) + "\n")

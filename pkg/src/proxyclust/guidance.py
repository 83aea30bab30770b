"""Cluster guidance: head over proxy embeddings, neighborhood-consistency
loss, and memory-bank entropy regularization.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import NumericError

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class ClusterHead(nn.Module):
    """Two-layer MLP mapping a proxy embedding to soft cluster assignments."""

    def __init__(self, d_txt, clusters):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_txt, d_txt), nn.ReLU(), nn.Linear(d_txt, clusters))
        self.d_txt = d_txt
        self.clusters = clusters

    def forward(self, proxies):
        if proxies.shape[-1] != self.d_txt:
            raise ValueError(f"proxy dimension {proxies.shape[-1]} != {self.d_txt}")
        return torch.softmax(self.net(proxies), dim=-1)

    def assign(self, proxies):
        return self.forward(proxies)


@dataclass
class NeighborIndex:
    indices: np.ndarray  # [N, k] neighbor ids per sample, self excluded
    metric: str
    epoch: int = -1

    def __post_init__(self):
        n, _ = self.indices.shape
        if np.any(self.indices == np.arange(n)[:, None]):
            raise ValueError("a sample lists itself as neighbor")

    @property
    def k(self):
        return self.indices.shape[1]

    def sample_neighbors(self, anchor_ids, rng):
        """One uniform neighbor draw per anchor."""
        rows = self.indices[np.asarray(anchor_ids)]
        picks = rng.integers(0, rows.shape[1], size=rows.shape[0])
        return rows[np.arange(rows.shape[0]), picks]


def exact_neighbors(proxies, k, metric="cosine"):
    """Brute-force k-nearest-neighbor lists with deterministic tie-breaks.

    Ties in the metric are broken by ascending sample index.
    """
    x = np.asarray(proxies, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < {n}, got k={k}")
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        xn = x / np.maximum(norms, 1e-12)
        dist = 1.0 - xn @ xn.T
    elif metric == "euclidean":
        sq = (x * x).sum(axis=1)
        dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    else:
        raise ValueError(f"unknown metric: {metric!r}")
    np.fill_diagonal(dist, np.inf)
    order = np.lexsort((np.broadcast_to(np.arange(n), (n, n)), dist), axis=1)
    return order[:, :k]


def build_neighbor_index(proxies, k, metric="cosine", epoch=-1):
    return NeighborIndex(indices=exact_neighbors(proxies, k, metric), metric=metric, epoch=epoch)


class MemoryBank:
    """FIFO buffer of past assignment vectors, detached from gradients."""

    def __init__(self, capacity, clusters):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.clusters = clusters
        self._rows = []

    def __len__(self):
        return len(self._rows)

    def insert(self, batch):
        if self.capacity == 0:
            return
        batch = batch.detach().cpu()
        if batch.ndim != 2 or batch.shape[1] != self.clusters:
            raise ValueError(f"expected [N, {self.clusters}] assignments")
        sums = batch.sum(dim=1)
        if not torch.allclose(sums, torch.ones_like(sums), atol=1e-3):
            raise ValueError("assignment vectors must sum to 1")
        for row in batch:
            self._rows.append(row.clone())
        if len(self._rows) > self.capacity:
            self._rows = self._rows[len(self._rows) - self.capacity :]

    def tensor(self):
        if not self._rows:
            return None
        return torch.stack(self._rows)

    def state(self):
        t = self.tensor()
        return None if t is None else t.numpy()

    def load_state(self, rows):
        self._rows = [] if rows is None else [torch.as_tensor(r).float() for r in rows]


def neighborhood_loss(p_anchor, p_neighbor, variant="mean_log"):
    """Consistency between each anchor's assignment and one sampled neighbor.

    mean_log (default): mean of -log(p_i . p_j).  literal: -(1/N) log of the
    summed dot products, kept for comparison with the alternative reading.
    """
    dots = (p_anchor * p_neighbor).sum(dim=-1)
    n_clamped = int((dots < LOG_FLOOR).sum())
    if n_clamped:
        log.warning("clamped %d zero dot products in neighborhood loss", n_clamped)
    if variant == "mean_log":
        return -torch.log(dots.clamp_min(LOG_FLOOR)).mean()
    if variant == "literal":
        return -torch.log(dots.sum().clamp_min(LOG_FLOOR)) / dots.shape[0]
    raise ValueError(f"unknown variant: {variant!r}")


def entropy_term(p_batch, bank=None, absorb=True):
    """Entropy of the mean assignment over the batch plus the bank contents.

    The bank absorbs the (detached) batch afterwards, so the estimate at step
    k covers the batch at k and history before k.
    """
    parts = [p_batch]
    if bank is not None:
        stored = bank.tensor()
        if stored is not None:
            parts.append(stored.to(p_batch.dtype))
    p_bar = torch.cat(parts, dim=0).mean(dim=0)
    h = -(p_bar * torch.log(p_bar.clamp_min(LOG_FLOOR))).sum()
    if bank is not None and absorb:
        bank.insert(p_batch)
    return h


def loss_weight(bank_capacity, batch_size):
    """Entropy weight: 5 x (U + N) / N."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    return 5.0 * (bank_capacity + batch_size) / batch_size


def guidance_loss(p_anchor, p_neighbor, bank=None, lam=None, variant="mean_log", absorb=True):
    """Combined guidance objective; returns (loss, components dict)."""
    if lam is None:
        cap = bank.capacity if bank is not None else 0
        lam = loss_weight(cap, p_anchor.shape[0])
    nb = neighborhood_loss(p_anchor, p_neighbor, variant=variant)
    en = entropy_term(p_anchor, bank, absorb=absorb)
    return nb - lam * en, {"nb": float(nb.detach()), "en": float(en.detach()), "lam": lam}


def total_loss(distill, guidance):
    """Unweighted sum of the two objectives; rejects non-finite inputs."""
    vals = []
    for part in (distill, guidance):
        v = part if torch.is_tensor(part) else torch.as_tensor(float(part))
        if not torch.isfinite(v).all():
            raise NumericError(f"non-finite loss component: {v}")
        vals.append(v)
    return vals[0] + vals[1]

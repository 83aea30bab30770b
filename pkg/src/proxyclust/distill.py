"""Semantic distillation: learn an extractor mapping denoiser features to
proxy-word embeddings by minimizing the (optionally masked) denoising loss.

The taps use one fixed shared noise draw; the loss itself draws fresh noise
per sample.  Mixing those two up silently breaks learning, so each path is
explicit here.
"""

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffusion import add_noise


def param_hash(module):
    """Order-independent digest of a module's parameters."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype(np.float64).tobytes())
    return h.hexdigest()


class SemanticExtractor(nn.Module):
    """Two conv + max-pool blocks, adaptive average pooling, one projection.

    The flattened size after pooling is conv_channels[1] * pool_grid^2; the
    projection takes that to d_txt.  Outputs are rescaled to norm sqrt(d_txt),
    the scale of unit-variance word embeddings: the frozen conditioning
    pathway was trained on tokens at that scale, and a fresh linear layer
    otherwise emits near-zero vectors the cross-attention ignores, which
    stalls distillation before it can start.
    """

    def __init__(self, in_channels, conv_channels=(48, 48), pool_grid=3, d_txt=64):
        super().__init__()
        c1, c2 = conv_channels
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, c1, 2),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 2),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d(pool_grid),
        )
        self.project = nn.Linear(c2 * pool_grid * pool_grid, d_txt)
        self.d_txt = d_txt

    def forward(self, z):
        if z.ndim != 4:
            raise ValueError(f"expected feature batch [B, C, h, w], got shape {tuple(z.shape)}")
        h = self.features(z)
        u = self.project(h.flatten(1))
        norm = u.norm(dim=1, keepdim=True).clamp_min(1e-8)
        return u * (self.d_txt ** 0.5) / norm


@dataclass
class DistillationLossReport:
    loss: torch.Tensor  # scalar, mean of per_sample
    per_sample: np.ndarray
    timesteps: np.ndarray
    coverage: np.ndarray  # mask mean per sample

    @property
    def value(self):
        return float(self.loss.detach())


def _mask_tensor(mask, like):
    if mask is None:
        return torch.ones((), dtype=like.dtype)
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(mask)
    mask = mask.to(like.dtype)
    try:
        torch.broadcast_shapes(mask.shape, like.shape)
    except RuntimeError as e:
        raise ValueError(f"mask shape {tuple(mask.shape)} not broadcastable to noise "
                         f"shape {tuple(like.shape)}") from e
    return mask


def distill_loss(
    x0,
    mask,
    backbone,
    extractor,
    sampler,
    schedule,
    rng=None,
    draws=None,
    t_hat=None,
    block=None,
    z=None,
):
    """Masked denoising loss with the condition produced by the extractor.

    mask: per-sample maps broadcastable to the noise shape (bool or float),
    or None for the unmasked objective.  Per-sample losses average over all
    noise elements regardless of the mask (constant denominator), so shrinking
    the mask can only shrink the loss.  draws=(t, eps) bypasses the sampler
    for reproducible checks; z bypasses the feature tap (cached features).
    """
    n = x0.shape[0]
    if z is None:
        z = backbone.tap_feature(x0, t_hat, b=block).z
    z = z.to(next(extractor.parameters()).dtype)
    proxies = extractor(z)
    cond = backbone.encode_condition(proxy=proxies)

    if draws is not None:
        t, eps = draws
        t = np.asarray(t)
    else:
        if rng is None:
            raise ValueError("need rng when draws are not given")
        t = sampler.sample(rng, size=n)
        eps = torch.from_numpy(rng.standard_normal(size=tuple(x0.shape))).to(x0.dtype)
    noisy = add_noise(x0, t, eps, schedule)
    pred = backbone.predict_noise(noisy.x_t, t, cond)

    m = _mask_tensor(mask, eps)
    resid = (eps - pred) * m
    per = resid.pow(2).flatten(1).mean(dim=1)
    cov = (m * torch.ones_like(eps)).flatten(1).mean(dim=1)
    return DistillationLossReport(
        loss=per.mean(),
        per_sample=per.detach().cpu().numpy(),
        timesteps=np.broadcast_to(t, (n,)).copy(),
        coverage=cov.detach().cpu().numpy(),
    )


def distill_step(x0, mask, backbone, extractor, sampler, schedule, optimizer, rng, **kw):
    """One gradient step on the extractor; the backbone stays untouched."""
    if optimizer is None:
        raise RuntimeError("optimizer not initialized")
    report = distill_loss(x0, mask, backbone, extractor, sampler, schedule, rng=rng, **kw)
    optimizer.zero_grad()
    report.loss.backward()
    optimizer.step()
    return report

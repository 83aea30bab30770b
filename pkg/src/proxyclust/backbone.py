"""Conditional denoiser backbones.

The trainable "toy" backbone is a small pixel-space UNet with two working
resolutions and one cross-attention block per resolution.  The condition is
a three-token embedded sequence [start, word, end-of-text]; a proxy embedding
replaces the word slot, the empty prompt keeps a learned null word.  After
pretraining the backbone is frozen and exposes three read-only entry points:
noise prediction, a mid-block feature tap, and per-block cross-attention maps
at the end-of-text key.
"""

import hashlib
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .diffusion import TimestepSampler, add_noise, make_schedule
from .errors import BackboneStateError

log = logging.getLogger(__name__)


@dataclass
class ConditionSequence:
    """Embedded token sequence fed to cross-attention."""

    tokens: torch.Tensor  # [B, L, D_txt]
    eot_index: int
    proxy_slot: int

    def __post_init__(self):
        if not 0 <= self.eot_index < self.tokens.shape[-2]:
            raise ValueError("eot_index outside sequence")


@dataclass
class FeatureTap:
    block_index: int
    z: torch.Tensor  # [B, C, h, w]


@dataclass
class AttentionStack:
    maps: list  # per block: [B, h_i, w_i], head-averaged softmax at the EOT key

    @property
    def block_count(self):
        return len(self.maps)


class BackboneInterface(ABC):
    """Read-only denoiser contract used by the distillation stage."""

    @abstractmethod
    def encode_condition(self, proxy=None, batch=1):
        ...

    @abstractmethod
    def predict_noise(self, x_t, t, cond):
        ...

    @abstractmethod
    def tap_feature(self, x0, t_hat, b=None, shared_eps=None):
        ...

    @abstractmethod
    def tap_attention(self, x0, t_tilde, shared_eps=None):
        ...

    @property
    @abstractmethod
    def trainable(self):
        ...


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding; t is a float tensor [B]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None].float() * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch):
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, t_dim):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(t_dim, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Multi-head attention from pixel queries to the condition tokens.

    When asked, returns the head-averaged softmax weights so callers can read
    the end-of-text column.
    """

    def __init__(self, ch, d_txt, heads):
        super().__init__()
        if ch % heads:
            raise ValueError("channel count must divide by head count")
        self.heads = heads
        self.scale = (ch // heads) ** -0.5
        self.norm = _norm(ch)
        self.q = nn.Linear(ch, ch, bias=False)
        self.k = nn.Linear(d_txt, ch, bias=False)
        self.v = nn.Linear(d_txt, ch, bias=False)
        self.out = nn.Linear(ch, ch)

    def forward(self, x, tokens, capture=False):
        b, c, h, w = x.shape
        q = self.q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k, v = self.k(tokens), self.v(tokens)
        L = tokens.shape[1]

        def split(m):
            return m.reshape(b, -1, self.heads, c // self.heads).transpose(1, 2)

        att = torch.softmax(split(q) @ split(k).transpose(-1, -2) * self.scale, dim=-1)
        mean_att = att.mean(dim=1) if capture else None  # [B, HW, L]
        o = (att @ split(v)).transpose(1, 2).reshape(b, h * w, c)
        o = self.out(o).transpose(1, 2).reshape(b, c, h, w)
        return x + o, mean_att


class ToyBackbone(nn.Module, BackboneInterface):
    """Small conditional UNet over pixels.

    The stem may downsample once (stride 2) so the two working resolutions
    sit below the image resolution; noise prediction is always emitted at
    full image resolution.
    """

    BLOCKS = ("stem", "enc1", "att1", "down", "enc2", "att2", "mid", "up", "dec1")

    def __init__(
        self,
        image_size=64,
        channels=3,
        base=16,
        d_txt=64,
        heads=2,
        t_dim=64,
        stem_stride=2,
        schedule=None,
        init_seed=0,
    ):
        super().__init__()
        torch.manual_seed(init_seed)
        self.image_size = image_size
        self.channels = channels
        self.d_txt = d_txt
        self.stem_stride = stem_stride
        self.schedule = schedule if schedule is not None else make_schedule(200)
        self.frozen = False
        wide = base * 2

        # condition template: [start, word, end-of-text]; the end-of-text
        # vector starts at unit scale while the others start near zero, so
        # early attention output is carried almost entirely by that key
        self.cond_start = nn.Parameter(torch.randn(d_txt) * 0.02)
        self.cond_null = nn.Parameter(torch.randn(d_txt) * 0.02)
        self.cond_eot = nn.Parameter(torch.randn(d_txt))
        self.eot_index, self.proxy_slot = 2, 1

        self.time_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.t_dim = t_dim

        self.stem = nn.Conv2d(channels, base, 3, stride=stem_stride, padding=1)
        self.enc1 = ResBlock(base, base, t_dim)
        self.att1 = CrossAttention(base, d_txt, heads)
        self.down = nn.Conv2d(base, wide, 3, stride=2, padding=1)
        self.enc2 = ResBlock(wide, wide, t_dim)
        self.att2 = CrossAttention(wide, d_txt, heads)
        self.mid = ResBlock(wide, wide, t_dim)
        self.up = nn.Conv2d(wide, base, 3, padding=1)
        self.dec1 = ResBlock(base * 2, base, t_dim)
        head = [_norm(base), nn.SiLU(), nn.Conv2d(base, channels, 3, padding=1)]
        if stem_stride == 2:
            head = [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(base, base, 3, padding=1)] + head
        self.head = nn.Sequential(*head)
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

        self.register_buffer("shared_eps", torch.zeros(channels, image_size, image_size))
        self.register_buffer("eps_is_set", torch.tensor(False))
        self.default_block = self.BLOCKS.index("mid")

    # ----- condition -----

    def encode_condition(self, proxy=None, batch=1):
        """Template sequence; a proxy batch [B, D_txt] fills the word slot."""
        if proxy is None:
            word = self.cond_null[None].expand(batch, -1)
        else:
            if proxy.ndim == 1:
                proxy = proxy[None]
            if proxy.shape[-1] != self.d_txt:
                raise ValueError(f"proxy dimension {proxy.shape[-1]} != {self.d_txt}")
            word, batch = proxy, proxy.shape[0]
        tokens = torch.stack(
            [self.cond_start[None].expand(batch, -1), word, self.cond_eot[None].expand(batch, -1)],
            dim=1,
        )
        return ConditionSequence(tokens=tokens, eot_index=self.eot_index, proxy_slot=self.proxy_slot)

    # ----- core forward -----

    def _embed_t(self, t, batch):
        if not torch.is_tensor(t):
            t = torch.as_tensor(np.asarray(t))
        t = t.reshape(-1).float()
        if t.numel() == 1:
            t = t.expand(batch)
        if t.numel() != batch:
            raise ValueError("timestep count must be 1 or batch size")
        emb = timestep_embedding(t, self.t_dim)
        return self.time_mlp(emb.to(self.time_mlp[0].weight.dtype))

    def forward(self, x_t, t, cond, capture_attention=False, capture_features=False):
        temb = self._embed_t(t, x_t.shape[0])
        tokens = cond.tokens
        if tokens.shape[0] == 1 and x_t.shape[0] > 1:
            tokens = tokens.expand(x_t.shape[0], -1, -1)
        feats, atts = [], []

        def keep(h):
            if capture_features:
                feats.append(h)
            return h

        h0 = keep(self.stem(x_t))
        h1 = keep(self.enc1(h0, temb))
        h1, a1 = self.att1(h1, tokens, capture=capture_attention)
        keep(h1)
        h2 = keep(self.down(h1))
        h2 = keep(self.enc2(h2, temb))
        h2, a2 = self.att2(h2, tokens, capture=capture_attention)
        keep(h2)
        hm = keep(self.mid(h2, temb))
        hu = keep(F.interpolate(hm, scale_factor=2, mode="nearest"))
        hu = self.up(hu)
        hd = keep(self.dec1(torch.cat([hu, h1], dim=1), temb))
        eps = self.head(hd)
        if capture_attention:
            for a, ref in ((a1, h1), (a2, h2)):
                hw = ref.shape[-2:]
                atts.append(a[..., self.eot_index].reshape(-1, *hw))
        return eps, feats, atts

    def predict_noise(self, x_t, t, cond):
        if int(np.max(np.asarray(t))) > self.schedule.total_steps or int(np.min(np.asarray(t))) < 0:
            raise ValueError("timestep outside schedule range")
        eps, _, _ = self.forward(x_t, t, cond)
        return eps

    # ----- taps (pure functions of the frozen model) -----

    def _require_eps(self, shared_eps):
        if shared_eps is not None:
            return shared_eps
        if not bool(self.eps_is_set):
            raise BackboneStateError("shared noise draw not set; pretrain or load a checkpoint")
        return self.shared_eps

    def _noisy(self, x0, t, shared_eps):
        eps = self._require_eps(shared_eps)
        if eps.shape != x0.shape[1:]:
            raise ValueError(f"shared eps shape {tuple(eps.shape)} != image shape")
        return add_noise(x0, int(t), eps.expand_as(x0), self.schedule).x_t

    @torch.no_grad()
    def tap_feature(self, x0, t_hat, b=None, shared_eps=None):
        """Mid-layer features of the empty-prompt pass at t_hat with shared noise."""
        b = self.default_block if b is None else int(b)
        if not 0 <= b < len(self.BLOCKS):
            raise ValueError(f"block index {b} out of range [0, {len(self.BLOCKS)})")
        x_t = self._noisy(x0, t_hat, shared_eps)
        cond = self.encode_condition(batch=x0.shape[0])
        _, feats, _ = self.forward(x_t, int(t_hat), cond, capture_features=True)
        return FeatureTap(block_index=b, z=feats[b].detach())

    @torch.no_grad()
    def tap_attention(self, x0, t_tilde, shared_eps=None):
        """Head-averaged attention to the end-of-text key, one map per block."""
        x_t = self._noisy(x0, t_tilde, shared_eps)
        cond = self.encode_condition(batch=x0.shape[0])
        _, _, atts = self.forward(x_t, int(t_tilde), cond, capture_attention=True)
        return AttentionStack(maps=[a.detach() for a in atts])

    # ----- lifecycle -----

    @property
    def trainable(self):
        return not self.frozen

    def freeze(self):
        self.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def param_hash(self):
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().astype(np.float64).tobytes())
        return h.hexdigest()

    def arch_descriptor(self):
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "base": self.stem.out_channels,
            "d_txt": self.d_txt,
            "heads": self.att1.heads,
            "t_dim": self.t_dim,
            "stem_stride": self.stem_stride,
        }

    def save(self, path):
        torch.save(
            {
                "arch": self.arch_descriptor(),
                "schedule": self.schedule.descriptor(),
                "state": self.state_dict(),
                "frozen": self.frozen,
            },
            path,
        )

    @classmethod
    def load(cls, path):
        blob = torch.load(path, map_location="cpu", weights_only=False)
        sched = make_schedule(**blob["schedule"])
        model = cls(schedule=sched, **blob["arch"])
        model.load_state_dict(blob["state"])
        if blob.get("frozen"):
            model.freeze()
        return model


def pretrain_toy(backbone, images, epochs, batch_size=32, lr=1e-3, seed=0, log_every=0,
                 cond_mix=0.7, tag_lr=1e-2):
    """Denoising pretraining; freezes the model at the end.

    images: float tensor [N, C, S, S] in [-1, 1].  Returns per-epoch mean
    losses.  The shared noise draw used by the taps is fixed here once.

    A real text-to-image backbone is pretrained with captions, which is what
    makes its cross-attention able to route token content at all.  The toy
    stand-in gets the same property from learnable per-image pseudo-words:
    each image carries its own random embedding (no labels involved), and a
    1 - cond_mix share of samples still trains the empty prompt, which the
    feature/attention taps rely on.  cond_mix=0 is plain unconditional
    pretraining.  The pseudo-words are discarded afterwards.
    """
    if images.shape[0] == 0:
        raise ValueError("empty dataset")
    if backbone.frozen:
        raise BackboneStateError("backbone already frozen")
    sched = backbone.schedule
    sampler = TimestepSampler.uniform_range(sched.total_steps, 1, sched.total_steps)
    n = images.shape[0]
    tag_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x7A6,)))
    tags = torch.from_numpy(
        tag_rng.standard_normal((n, backbone.d_txt)).astype(np.float32)
    ).requires_grad_(True)
    groups = [{"params": list(backbone.parameters()), "lr": lr}]
    if cond_mix > 0:
        groups.append({"params": [tags], "lr": tag_lr})
    opt = torch.optim.AdamW(groups)
    history = []
    backbone.train()
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch, 0)))
        order = rng.permutation(n)
        total, steps = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x0 = images[idx]
            t = sampler.sample(rng, size=len(idx))
            eps = torch.from_numpy(
                rng.standard_normal(size=tuple(x0.shape)).astype(np.float32)
            )
            x_t = add_noise(x0, t, eps, sched).x_t
            if cond_mix > 0:
                drop = torch.from_numpy(rng.random(len(idx)) >= cond_mix)
                word = torch.where(drop[:, None], backbone.cond_null[None], tags[idx])
                cond = backbone.encode_condition(proxy=word)
            else:
                cond = backbone.encode_condition(batch=len(idx))
            pred = backbone.predict_noise(x_t, t, cond)
            loss = F.mse_loss(pred, eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            steps += 1
        history.append(total / steps)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("pretrain epoch %d/%d loss %.4f", epoch + 1, epochs, history[-1])
    eps_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xE95,)))
    backbone.shared_eps.copy_(
        torch.from_numpy(eps_rng.standard_normal(size=tuple(backbone.shared_eps.shape)).astype(np.float32))
    )
    backbone.eps_is_set.fill_(True)
    backbone.freeze()
    return history


class ExternalBackbone(BackboneInterface):
    """Adapter stub for a large pretrained text-to-image model.

    Records the configuration a real adapter would need (model name, feature
    block index, text width) and fails loudly on use: the weights are not
    bundled with this package.
    """

    def __init__(self, model_name, block_index=19, d_txt=768):
        self.model_name = model_name
        self.block_index = block_index
        self.d_txt = d_txt

    def _unavailable(self):
        raise BackboneStateError(
            f"external backbone '{self.model_name}' is not loaded; this build ships only the toy backbone"
        )

    def encode_condition(self, proxy=None, batch=1):
        self._unavailable()

    def predict_noise(self, x_t, t, cond):
        self._unavailable()

    def tap_feature(self, x0, t_hat, b=None, shared_eps=None):
        self._unavailable()

    def tap_attention(self, x0, t_tilde, shared_eps=None):
        self._unavailable()

    @property
    def trainable(self):
        return False

"""Run configuration: every knob of the training protocol in one flat record.

Paper-scale values are the field defaults; ``toy_profile`` rescales the
schedule and widths for the bundled small backbone.  Configs load from plain
``key=value`` text files and accept the same keys as command-line overrides.
The entropy weight lambda is always derived from (bank_size, batch_size),
never set directly.
"""

import dataclasses
import hashlib
from dataclasses import dataclass

from .diffusion import TimestepSampler

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    # backbone
    backbone: str = "toy"  # toy | external
    external_model: str = ""
    backbone_path: str = ""
    total_steps: int = 1000
    t_hat: int = 150
    t_tilde: int = 50
    block: int = 19  # feature tap block index
    # data
    data_manifest: str = ""
    image_size: int = 0  # 0: read from manifest
    clusters: int = 4
    # schedule
    epochs: int = 250
    warmup_epochs: int = 100
    batch_size: int = 32
    lr: float = 2e-4
    seed: int = 0
    # objective
    timestep_mode: str = "weighted"  # weighted | uniform | range
    t_lo: int = 0
    t_hi: int = 0  # 0 means total_steps (range mode only)
    mask: bool = True
    guidance: bool = True
    n_neighbors: int = 10
    neighbor_metric: str = "cosine"
    bank_size: int = 512
    nb_variant: str = "mean_log"  # mean_log | literal
    # widths
    d_txt: int = 768
    extractor_width: int = 192
    extractor_pool: int = 4
    # toy backbone
    toy_base: int = 16
    toy_heads: int = 2
    toy_stem_stride: int = 2
    toy_tdim: int = 64
    pretrain_epochs: int = 80
    pretrain_lr: float = 1e-3
    pretrain_seed: int = 0
    pretrain_cond_mix: float = 0.7  # share of pseudo-word-conditioned samples
    # evaluation
    kmeans_restarts: int = 10
    nmi_average: str = "geometric"
    # paths
    out_dir: str = ""

    @property
    def lam(self):
        """Entropy regularization weight, 5 x (U + N) / N."""
        return 5.0 * (self.bank_size + self.batch_size) / self.batch_size

    def validate(self):
        if self.backbone not in ("toy", "external"):
            raise ValueError(f"unknown backbone: {self.backbone!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.guidance and not 0 < self.warmup_epochs < self.epochs:
            raise ValueError("need 0 < warmup_epochs < epochs when guidance is on")
        if not 0 <= self.t_hat <= self.total_steps:
            raise ValueError("t_hat outside schedule")
        if not 0 <= self.t_tilde <= self.total_steps:
            raise ValueError("t_tilde outside schedule")
        if self.timestep_mode not in ("weighted", "uniform", "range"):
            raise ValueError(f"unknown timestep_mode: {self.timestep_mode!r}")
        if self.clusters < 2:
            raise ValueError("clusters must be at least 2")
        if self.n_neighbors < 1:
            raise ValueError("n_neighbors must be positive")
        if self.bank_size < 0:
            raise ValueError("bank_size must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        return self

    def sampler(self):
        hi = self.t_hi or self.total_steps
        return TimestepSampler.from_mode(self.timestep_mode, self.total_steps, lo=self.t_lo, hi=hi)

    def hash(self):
        """Digest of every result-relevant field (output location excluded)."""
        parts = []
        for f in dataclasses.fields(self):
            if f.name == "out_dir":
                continue
            parts.append(f"{f.name}={getattr(self, f.name)!r}")
        return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def toy_profile(**overrides):
    """Desk-scale defaults: schedule and taps at 1/5 of the paper scale."""
    cfg = RunConfig(
        total_steps=200,
        t_hat=30,
        t_tilde=10,
        block=6,
        d_txt=64,
        extractor_width=48,
        extractor_pool=3,
        epochs=40,
        warmup_epochs=16,
        lr=2e-4,
    )
    return cfg.replace(**overrides) if overrides else cfg


def _coerce(field, raw):
    if field.type in ("bool", bool):
        low = raw.strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{field.name}: cannot parse boolean from {raw!r}")
    typ = {"int": int, "float": float, "str": str}.get(field.type, field.type)
    return typ(raw)


def _field_map():
    return {f.name: f for f in dataclasses.fields(RunConfig)}


def apply_overrides(cfg, overrides):
    """Apply {key: raw string} pairs with type coercion; unknown key raises."""
    fields = _field_map()
    updates = {}
    for key, raw in overrides.items():
        if key == "lam":
            raise ValueError("lam is derived from bank_size and batch_size")
        if key not in fields:
            raise ValueError(f"unknown config key: {key!r}")
        updates[key] = raw if not isinstance(raw, str) else _coerce(fields[key], raw)
    return cfg.replace(**updates)


def load_config(path, base=None):
    """Read a flat key=value file ('#' starts a comment)."""
    cfg = base if base is not None else RunConfig()
    overrides = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            overrides[key] = val
    return apply_overrides(cfg, overrides)


def save_config(cfg, path):
    with open(path, "w") as f:
        for fld in dataclasses.fields(cfg):
            f.write(f"{fld.name}={getattr(cfg, fld.name)}\n")

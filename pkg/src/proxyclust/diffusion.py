"""Forward diffusion process: noise schedule, noising operator, timestep sampler.

Only the forward (noising) direction is implemented; reverse-process
sampling for image synthesis is out of scope.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch


class NoiseSchedule:
    """Per-timestep signal coefficients alpha[0..T] of the forward process.

    alpha[0] = 1 exactly (t=0 is the identity), entries are strictly
    positive and monotonically non-increasing.  The noising operator is
    x_t = sqrt(alpha[t]) * x0 + sqrt(1 - alpha[t]) * eps.
    """

    def __init__(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.ndim != 1 or alpha.shape[0] < 3:
            raise ValueError("schedule needs alpha[0..T] with T >= 2")
        if alpha[0] != 1.0:
            raise ValueError("alpha[0] must be exactly 1.0")
        if np.any(alpha <= 0.0):
            raise ValueError("all alpha entries must be strictly positive")
        if np.any(np.diff(alpha) > 0.0):
            raise ValueError("alpha must be monotonically non-increasing")
        self.alpha = alpha
        self.total_steps = alpha.shape[0] - 1
        self.meta = None  # construction recipe, filled in by make_schedule

    def signal(self, t):
        """sqrt(alpha[t]) for integer t or an integer array."""
        return np.sqrt(self.alpha[t])

    def noise(self, t):
        """sqrt(1 - alpha[t])."""
        return np.sqrt(1.0 - self.alpha[t])

    def descriptor(self):
        """Constructor arguments for make_schedule that rebuild this schedule."""
        if self.meta is not None:
            return dict(self.meta)
        return {"total_steps": self.total_steps, "kind": "custom", "alpha": self.alpha.tolist()}

    def __eq__(self, other):
        return (
            isinstance(other, NoiseSchedule)
            and self.total_steps == other.total_steps
            and np.array_equal(self.alpha, other.alpha)
        )


def make_schedule(total_steps, kind="linear", beta_start=1e-4, beta_end=0.02, alpha=None):
    """Build a NoiseSchedule.

    "linear": the standard linear-beta cumulative product,
    alpha[t] = prod_{s<=t} (1 - beta_s) with T betas spaced linearly
    between the endpoints and alpha[0] = 1.  "custom" takes the alpha
    sequence directly (used to round-trip schedule descriptors).
    """
    if total_steps < 2:
        raise ValueError(f"total_steps must be >= 2, got {total_steps}")
    if kind == "custom":
        sched = NoiseSchedule(np.asarray(alpha, dtype=np.float64))
        if sched.total_steps != total_steps:
            raise ValueError("custom alpha length does not match total_steps")
        return sched
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, total_steps, dtype=np.float64)
    alpha = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    sched = NoiseSchedule(alpha)
    sched.meta = {
        "total_steps": total_steps,
        "kind": kind,
        "beta_start": beta_start,
        "beta_end": beta_end,
    }
    return sched


@dataclass
class NoisyImage:
    """A forward-noised batch together with the exact inputs that produced it."""

    x_t: torch.Tensor
    t: np.ndarray  # per-sample integer timesteps
    eps: torch.Tensor


def _as_timesteps(t, batch, total_steps):
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t.shape[0] == 1:
        t = np.repeat(t, batch)
    if t.shape != (batch,):
        raise ValueError(f"timesteps shape {t.shape} does not match batch {batch}")
    if t.min() < 0 or t.max() > total_steps:
        raise ValueError(f"timesteps must lie in [0, {total_steps}]")
    return t


def add_noise(x0, t, eps, schedule):
    """Noise a clean batch to timestep t: sqrt(a_t) x0 + sqrt(1-a_t) eps.

    ``t`` may be a single int (applied to the whole batch) or one int per
    sample.  Deterministic given eps; eps must be shaped like x0.
    """
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    t = _as_timesteps(t, x0.shape[0], schedule.total_steps)
    dims = (-1,) + (1,) * (x0.ndim - 1)
    sig = torch.as_tensor(schedule.signal(t), dtype=x0.dtype, device=x0.device).view(dims)
    noi = torch.as_tensor(schedule.noise(t), dtype=x0.dtype, device=x0.device).view(dims)
    return NoisyImage(x_t=sig * x0 + noi * eps, t=t, eps=eps)


def recover_clean(noisy, schedule):
    """Invert add_noise: x0 = (x_t - sqrt(1-a_t) eps) / sqrt(a_t).

    Exact (up to roundoff) for t < T; near t = T the division blows up
    roundoff because alpha[T] is close to zero.
    """
    t = noisy.t
    dims = (-1,) + (1,) * (noisy.x_t.ndim - 1)
    sig = torch.as_tensor(schedule.signal(t), dtype=noisy.x_t.dtype).view(dims)
    noi = torch.as_tensor(schedule.noise(t), dtype=noisy.x_t.dtype).view(dims)
    return (noisy.x_t - noi * noisy.eps) / sig


class TimestepSampler:
    """Categorical distribution over timesteps 0..T given per-step weights."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.shape[0] < 2:
            raise ValueError("need weights for t = 0..T with T >= 1")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights must not all be zero")
        self.weights = w
        self.total = total  # normalization constant
        self.probs = w / total
        self.total_steps = w.shape[0] - 1

    @classmethod
    def cosine_weighted(cls, total_steps):
        """w(t) = 1 + cos(pi t / T): emphasizes small timesteps, w(T) = 0."""
        t = np.arange(total_steps + 1, dtype=np.float64)
        return cls(1.0 + np.cos(math.pi * t / total_steps))

    @classmethod
    def uniform(cls, total_steps):
        """Uniform over the half-open range [0, T)."""
        return cls.uniform_range(total_steps, 0, total_steps)

    @classmethod
    def uniform_range(cls, total_steps, lo, hi):
        """Uniform over the half-open integer range [lo, hi)."""
        if not (0 <= lo < hi <= total_steps):
            raise ValueError(f"need 0 <= lo < hi <= {total_steps}, got [{lo}, {hi})")
        w = np.zeros(total_steps + 1)
        w[lo:hi] = 1.0
        return cls(w)

    @classmethod
    def from_mode(cls, mode, total_steps, lo=None, hi=None):
        if mode == "weighted":
            return cls.cosine_weighted(total_steps)
        if mode == "uniform":
            return cls.uniform(total_steps)
        if mode == "range":
            if lo is None or hi is None:
                raise ValueError("range mode needs explicit lo and hi")
            return cls.uniform_range(total_steps, lo, hi)
        raise ValueError(f"unknown timestep sampling mode {mode!r}")

    def sample(self, rng, size=None):
        """Draw timesteps with probability w(t)/Z using the given generator."""
        return rng.choice(self.total_steps + 1, size=size, p=self.probs)

"""Noise schedules, forward corruption, samplers, and time embedding."""
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .layers import Linear, Module
from .numerics import Tensor, ops
from .occupancy import AnalogMap


class NoiseSchedule:
    """Precomputed beta_t and cumulative alpha_bar tables.

    betas[i] is beta_{i+1} for steps 1..T; alpha_bars has T+1 entries
    with alpha_bars[0] = 1 and alpha_bars[t] = prod_{i<=t} (1 - beta_i).
    """

    def __init__(self, kind, betas):
        self.kind = kind
        self.T = len(betas)
        self.betas = np.asarray(betas, dtype=np.float64)
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])
        if not (np.diff(self.alpha_bars) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")


def make_schedule(kind, T):
    """Cosine (improved-DDPM convention, offset 0.008, beta clip 0.999) or
    linear (1e-4 to 0.02) schedule."""
    if T < 2:
        raise ValueError("T must be >= 2")
    if kind == "cosine":
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((t / T + 0.008) / 1.008) * np.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.minimum(1.0 - abar[1:] / abar[:-1], 0.999)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, T)
    else:
        raise ValueError("unknown schedule kind %r" % kind)
    return NoiseSchedule(kind, betas)


@dataclass
class SamplerConfig:
    strategy: str = "ddim"
    steps: int = 3
    td: int = 1

    def validate(self, T):
        if self.strategy not in ("ddim", "ddpm"):
            raise UsageError("strategy must be ddim or ddpm")
        if not 1 <= self.steps <= T:
            raise UsageError("steps must be in [1, T]")
        if self.td < 0:
            raise UsageError("td must be >= 0")
        return self


def corrupt(y0, t, noise, sched):
    """Forward process z_t = sqrt(abar_t) y0 + sqrt(1 - abar_t) noise."""
    if noise.shape != y0.values.shape:
        raise ValueError("noise shape %s != y0 shape %s"
                         % (noise.shape, y0.values.shape))
    if not 0 <= t <= sched.T:
        raise ValueError("t=%d outside [0, %d]" % (t, sched.T))
    a = sched.alpha_bars[t]
    z = ops.add(ops.mul(y0.values, np.sqrt(a)),
                ops.mul(noise, np.sqrt(1.0 - a)))
    return AnalogMap(z, y0.scale)


def time_pairs(cfg, T):
    """(t_now, t_next) pairs on a descending grid shifted by the td offset.

    steps+1 values evenly spaced over [T - td, -td], clamped to [0, T];
    consecutive values are paired, so the last t_next is always 0.
    """
    cfg.validate(T)
    times = np.rint(np.linspace(T - cfg.td, -cfg.td, cfg.steps + 1)).astype(int)
    times = np.clip(times, 0, T)
    if not (np.diff(times) < 0).all():
        raise UsageError("degenerate time grid for steps=%d td=%d T=%d"
                         % (cfg.steps, cfg.td, T))
    return [(int(times[i]), int(times[i + 1])) for i in range(cfg.steps)]


def _clamped_z0(z0_hat):
    s = z0_hat.scale
    return np.clip(z0_hat.values.data, -s, s)


def ddim_step(z_t, z0_hat, t_now, t_next, sched):
    """Deterministic (eta = 0) reverse update toward t_next."""
    if t_now == 0:
        raise ValueError("ddim_step needs t_now >= 1")
    if not t_next < t_now:
        raise ValueError("t_next must be < t_now")
    a_now = sched.alpha_bars[t_now]
    a_next = sched.alpha_bars[t_next]
    z0 = _clamped_z0(z0_hat)
    z = z_t.values.data
    eps = (z - np.sqrt(a_now) * z0) / np.sqrt(1.0 - a_now)
    out = np.sqrt(a_next) * z0 + np.sqrt(1.0 - a_next) * eps
    return AnalogMap(Tensor(out), z_t.scale)


def ddpm_step(z_t, z0_hat, t_now, sched, rng):
    """Ancestral sample from the posterior q(z_{t-1} | z_t, z0_hat)."""
    if t_now < 1:
        raise ValueError("ddpm_step needs t_now >= 1")
    beta = sched.betas[t_now - 1]
    a_now = sched.alpha_bars[t_now]
    a_prev = sched.alpha_bars[t_now - 1]
    z0 = _clamped_z0(z0_hat)
    z = z_t.values.data
    coef0 = np.sqrt(a_prev) * beta / (1.0 - a_now)
    coefz = np.sqrt(1.0 - beta) * (1.0 - a_prev) / (1.0 - a_now)
    mean = coef0 * z0 + coefz * z
    if t_now > 1:
        var = (1.0 - a_prev) / (1.0 - a_now) * beta
        mean = mean + np.sqrt(var) * rng.standard_normal(z.shape)
    return AnalogMap(Tensor(mean), z_t.scale)


def time_sinusoid(t, dim):
    """Raw positional encoding: half sines, half cosines, geometric
    frequencies from 1 down to 1/10000."""
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / (half - 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class TimeEmbed(Module):
    """Sinusoid followed by a learned 2-layer smooth projection."""

    def __init__(self, dim, rng):
        if dim % 2 or dim < 4:
            raise ValueError("embedding dim must be even and >= 4")
        self.dim = dim
        self.l1 = Linear(dim, dim, rng)
        self.l2 = Linear(dim, dim, rng)


def embed_time(t, e):
    """Embed an integer diffusion step; returns a [1, dim] Tensor."""
    raw = Tensor(time_sinusoid(t, e.dim)[None])
    return e.l2(ops.silu(e.l1(raw)))

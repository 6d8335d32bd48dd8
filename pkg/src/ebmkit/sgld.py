"""Langevin sampling with a persistent replay buffer.

Chains update as

    x_t = x_{t-1} - step_size * dE/dx + noise_scale * N(0, I)

with the step size and noise scale configured independently. Chain starting
points come from the replay buffer most of the time; with probability
``reinit_prob`` per chain they are redrawn from the initialization
distribution, which keeps the buffer from collapsing onto stale modes.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass
import struct

import numpy as np

from .errors import ConfigError, DivergenceError
from .init_dist import sample_init
from .tensor import Tensor


@dataclass
class SgldConfig:
    steps: int
    step_size: float = 1.0
    noise_scale: float = 0.001
    clamp_range: tuple | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"sgld steps must be >= 0, got {self.steps}")
        if self.step_size < 0:
            raise ConfigError(f"sgld step_size must be >= 0, got {self.step_size}")
        if self.noise_scale < 0:
            raise ConfigError(f"sgld noise_scale must be >= 0, got {self.noise_scale}")
        if self.clamp_range is not None:
            lo, hi = self.clamp_range
            if not lo < hi:
                raise ConfigError(f"clamp range {self.clamp_range} is empty")


class ReplayBuffer:
    """Fixed-capacity sample store with uniform-random replacement."""

    def __init__(self, dim, capacity=10_000, reinit_prob=0.05):
        if capacity < 1:
            raise ConfigError(f"buffer capacity must be >= 1, got {capacity}")
        if not 0.0 <= reinit_prob <= 1.0:
            raise ConfigError(f"reinit_prob must be in [0, 1], got {reinit_prob}")
        self.dim = int(dim)
        self.capacity = int(capacity)
        self.reinit_prob = float(reinit_prob)
        self._store = np.empty((self.capacity, self.dim), dtype=np.float64)
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, samples, rng):
        """Append new rows; once full, overwrite uniformly random slots."""
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[1] != self.dim:
            raise ConfigError(
                f"buffer dim {self.dim} cannot store rows of shape {samples.shape}"
            )
        for row in samples:
            if self.size < self.capacity:
                self._store[self.size] = row
                self.size += 1
            else:
                self._store[rng.integers(self.capacity)] = row

    def snapshot(self):
        return self._store[: self.size].copy()

    def dump(self, path):
        with open(path, "wb") as f:
            f.write(struct.pack("<II", self.size, self.dim))
            f.write(np.ascontiguousarray(self._store[: self.size], dtype="<f8").tobytes())

    @classmethod
    def from_rows(cls, rows, capacity=10_000, reinit_prob=0.05):
        rows = np.asarray(rows, dtype=np.float64)
        buf = cls(rows.shape[1], capacity=max(capacity, rows.shape[0]),
                  reinit_prob=reinit_prob)
        buf._store[: rows.shape[0]] = rows
        buf.size = rows.shape[0]
        return buf

    @classmethod
    def restore(cls, path, capacity=10_000, reinit_prob=0.05):
        with open(path, "rb") as f:
            count, dim = struct.unpack("<II", f.read(8))
            raw = f.read(count * dim * 8)
        if len(raw) != count * dim * 8:
            raise ConfigError(f"{path}: truncated buffer payload")
        return cls.from_rows(np.frombuffer(raw, dtype="<f8").reshape(count, dim),
                             capacity=capacity, reinit_prob=reinit_prob)


def draw_init(buffer, p0, count, rng, clamp_range=(-1.0, 1.0)):
    """Chain starting points: buffer rows, refreshed from p0 at reinit_prob.

    The rng is consumed in a fixed order (coins, buffer indices, fresh draws)
    so runs replay identically from a saved generator state. An empty buffer
    forces every start to come from p0.
    """
    coins = rng.uniform(size=count)
    fresh = coins < buffer.reinit_prob
    if len(buffer) == 0:
        fresh[:] = True
    out = np.empty((count, buffer.dim), dtype=np.float64)
    stale = ~fresh
    if stale.any():
        idx = rng.integers(len(buffer), size=int(stale.sum()))
        out[stale] = buffer._store[idx]
    if fresh.any():
        out[fresh] = sample_init(p0, int(fresh.sum()), rng, clamp_range=clamp_range)
    return out


def sgld_chain(model, x0, cfg: SgldConfig, rng):
    """Run one batch of chains for cfg.steps updates; returns a plain array.

    The result carries no gradient history: the training loss treats chain
    output as constant data. Parameter gradients are disabled for the whole
    chain via model.frozen() so the K inner backward passes only produce
    input gradients.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    guard = model.frozen() if hasattr(model, "frozen") else nullcontext()
    with guard:
        for step in range(cfg.steps):
            xt = Tensor(x, requires_grad=True)
            e = model.energy(xt).sum()
            if not np.isfinite(e.data).all():
                raise DivergenceError(
                    f"chain energy became non-finite at step {step}",
                    step=step, value=float(np.asarray(e.data).ravel()[0]),
                )
            e.backward()
            grad = xt.grad
            if not np.isfinite(grad).all():
                raise DivergenceError(
                    f"chain gradient became non-finite at step {step}",
                    step=step, value=float(np.abs(grad).max()),
                )
            x = x - cfg.step_size * grad
            if cfg.noise_scale > 0:
                x = x + cfg.noise_scale * rng.standard_normal(x.shape)
            if cfg.clamp_range is not None:
                np.clip(x, cfg.clamp_range[0], cfg.clamp_range[1], out=x)
    return x

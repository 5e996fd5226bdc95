"""Guidance-conditioned energy model over unconstrained distribution
parameters, Langevin sampling with a persistent replay buffer, and the
positive/negative encoders whose disagreement drives training.

The plan handed to the diffusion model is the negative encoding of a Langevin
sample, ``encode_negative(langevin_sample(g), g)``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autograd import Tape, Tensor, concat
from .distribution import nll_tensor
from .nn import Module, add_mlp, apply_mlp

log = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class LangevinConfig:
    steps: int = 20
    step_size: float = 0.1
    grad_clip: float = 10.0
    fresh_prob: float = 0.05

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("langevin steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("langevin step_size must be > 0")


class ReplayBuffer:
    """Fixed-capacity FIFO ring of past chain endpoints."""

    MAGIC = b"EPDRBUF1"

    def __init__(self, dim: int, capacity: int = 1000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.dim = dim
        self.capacity = capacity
        self.entries = np.zeros((capacity, dim))
        self.size = 0
        self.cursor = 0
        self.pushed = 0

    def __len__(self):
        return self.size

    def push(self, z: np.ndarray) -> None:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != self.dim:
            raise ValueError(f"buffer holds {self.dim}-vectors, got {z.shape}")
        for row in z:
            if not np.all(np.isfinite(row)):
                continue
            self.entries[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
            self.pushed += 1

    def snapshot(self) -> np.ndarray:
        """Entries oldest-first."""
        if self.size < self.capacity:
            return self.entries[: self.size].copy()
        return np.concatenate([self.entries[self.cursor :], self.entries[: self.cursor]])

    def draw_init(self, count: int, rng: np.random.Generator, fresh_prob: float = 0.05) -> np.ndarray:
        """Chain starting points: buffer entries w.p. ``1 - fresh_prob``, else N(0, I)."""
        z = rng.standard_normal((count, self.dim))
        if self.size == 0:
            return z
        use_buffer = rng.random(count) >= fresh_prob
        picks = rng.integers(0, self.size, size=count)
        z[use_buffer] = self.entries[picks[use_buffer]]
        return z

    def to_bytes(self) -> bytes:
        header = self.MAGIC + struct.pack("<qqqq", self.capacity, self.size, self.cursor, self.dim)
        return header + np.ascontiguousarray(self.entries, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ReplayBuffer":
        if raw[:8] != cls.MAGIC:
            raise ValueError("not a replay buffer dump")
        capacity, size, cursor, dim = struct.unpack("<qqqq", raw[8:40])
        buf = cls(dim, capacity)
        buf.entries = np.frombuffer(raw[40:], dtype="<f8").reshape(capacity, dim).copy()
        buf.size, buf.cursor = size, cursor
        return buf


@dataclass
class ChainStats:
    restarts: int = 0
    chains: int = 0
    history: list = field(default_factory=list)


def clip_rows(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return g
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g * np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))


def langevin_chain(z0: np.ndarray, grad_energy: GradFn, rng: np.random.Generator, steps: int, step_size: float,
                   grad_clip: float | None = 10.0, stats: ChainStats | None = None) -> np.ndarray:
    """Unadjusted Langevin: ``z <- z - (eta/2) grad E(z) + sqrt(eta) eps``.

    A chain that becomes non-finite restarts from fresh noise at that step.
    """
    z = np.array(z0, dtype=float)
    noise_scale = np.sqrt(step_size)
    for _ in range(steps):
        g = clip_rows(grad_energy(z), grad_clip)
        z = z - 0.5 * step_size * g + noise_scale * rng.standard_normal(z.shape)
        bad = ~np.all(np.isfinite(z), axis=-1)
        if bad.any():
            z[bad] = rng.standard_normal((int(bad.sum()), z.shape[-1]))
            if stats is not None:
                stats.restarts += int(bad.sum())
            log.warning("langevin: restarted %d non-finite chains", int(bad.sum()))
    if stats is not None:
        stats.chains += z.shape[0]
    return z


class EnergyModel(Module):
    """Energy network E(z, g) plus positive and negative encoders.

    All three are feed-forward over ``concat(x, g)`` with smooth (SiLU)
    activations so the energy is differentiable everywhere in ``z``.
    """

    def __init__(self, rng: np.random.Generator, z_dim: int = 60, g_dim: int = 256, hidden: int = 256,
                 enc_hidden: int = 256, config: LangevinConfig | None = None):
        super().__init__()
        self.z_dim = z_dim
        self.g_dim = g_dim
        self.config = config or LangevinConfig()
        add_mlp(self, rng, "energy", [z_dim + g_dim, hidden, hidden, 1])
        add_mlp(self, rng, "pos", [z_dim + g_dim, enc_hidden, enc_hidden, z_dim], last_gain=0.5)
        add_mlp(self, rng, "neg", [z_dim + g_dim, enc_hidden, enc_hidden, z_dim], last_gain=0.5)

    def energy(self, z, g) -> Tensor:
        """(B,) energies."""
        z, g = _as_t(z), _as_t(g)
        return apply_mlp(self, "energy", concat([z, g], axis=-1), 3).reshape(z.shape[0])

    def energy_grad(self, g: np.ndarray) -> GradFn:
        """d/dz of the summed energy at fixed guidance; weights are held constant."""
        frozen = {n: Tensor(t.data) for n, t in self.subset("energy.").items()}
        g_t = Tensor(np.asarray(g, dtype=float))

        def grad(z: np.ndarray) -> np.ndarray:
            zt = Tensor(z, requires_grad=True)
            with Tape() as tape:
                x = concat([zt, g_t], axis=-1)
                for i in range(3):
                    x = x @ frozen[f"energy.{i}.w"] + frozen[f"energy.{i}.b"]
                    if i < 2:
                        x = x.silu()
                e = x.sum()
            (gz,) = tape.backward(e, [zt])
            return gz

        return grad

    def encode_positive(self, d_pos, g) -> Tensor:
        return apply_mlp(self, "pos", concat([_as_t(d_pos), _as_t(g)], axis=-1), 3)

    def encode_negative(self, z, g) -> Tensor:
        return apply_mlp(self, "neg", concat([_as_t(z), _as_t(g)], axis=-1), 3)

    def langevin_sample(self, g: np.ndarray, buffer: ReplayBuffer, rng: np.random.Generator,
                        stats: ChainStats | None = None, steps: int | None = None) -> np.ndarray:
        """One chain per guidance row, initialized from the buffer, pushed back to it."""
        g = np.atleast_2d(np.asarray(g, dtype=float))
        cfg = self.config
        z0 = buffer.draw_init(g.shape[0], rng, cfg.fresh_prob)
        z = langevin_chain(z0, self.energy_grad(g), rng, steps or cfg.steps, cfg.step_size, cfg.grad_clip, stats)
        buffer.push(z)
        return z

    def plan(self, g: np.ndarray, buffer: ReplayBuffer, rng: np.random.Generator, stats=None) -> np.ndarray:
        """Negative encoding of a fresh Langevin sample, (B, z_dim)."""
        z = self.langevin_sample(g, buffer, rng, stats)
        return self.encode_negative(z, g).data


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class SCLoss:
    total: Tensor
    mse: float
    nll: float
    contrastive: float = 0.0


def sc_loss(z_pos: Tensor, z_neg: Tensor, plan: Tensor, truth: np.ndarray) -> SCLoss:
    """``MSE(Z+, Z-) + NLL(plan, truth)`` with the NLL averaged over windows."""
    diff = z_pos - z_neg
    mse = (diff * diff).mean()
    nl = nll_tensor(plan, truth).mean()
    return SCLoss(mse + nl, mse.item(), nl.item())


def contrastive_energy_loss(e_pos: Tensor, e_neg: Tensor, reg: float = 0.1) -> Tensor:
    """Lower energy on encoder-supplied positives, raise it on chain samples."""
    return e_pos.mean() - e_neg.mean() + reg * ((e_pos * e_pos).mean() + (e_neg * e_neg).mean())

"""Gaussian diffusion over unconstrained distribution parameters.

The denoiser sees the state as ``t_future`` tokens of five numbers each and
runs a small self-attention stack conditioned on the diffusion step and on
the guidance vector.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autograd import Tensor
from .nn import (
    Module,
    add_dense,
    add_layer_norm,
    add_mlp,
    apply_dense,
    apply_layer_norm,
    apply_mlp,
    attention,
    merge_heads,
    split_heads,
)


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t):
        return self.betas[np.asarray(t) - 1]

    def alpha(self, t):
        return self.alphas[np.asarray(t) - 1]

    def alpha_bar(self, t):
        """Cumulative product up to step ``t``; ``alpha_bar(0) == 1``."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bars[np.clip(t, 1, None) - 1])

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end})

    @classmethod
    def from_json(cls, text: str) -> "DiffusionSchedule":
        d = json.loads(text)
        return make_schedule(d["T"], d["beta_start"], d["beta_end"])


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.2) -> DiffusionSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    return DiffusionSchedule(T, beta_start, beta_end, betas, alphas, np.cumprod(alphas))


def schedule_from_betas(betas) -> DiffusionSchedule:
    """Schedule with explicit per-step betas (no linearity requirement)."""
    betas = np.asarray(betas, dtype=float)
    alphas = 1.0 - betas
    return DiffusionSchedule(len(betas), float(betas[0]), float(betas[-1]), betas, alphas, np.cumprod(alphas))


def forward_sample(d0, t, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form marginal ``sqrt(abar_t) d0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one step per row of ``d0``.
    """
    d0 = np.asarray(d0, dtype=float)
    ab = np.asarray(schedule.alpha_bar(t), dtype=float)
    if ab.ndim and d0.ndim > 1:
        ab = ab.reshape(-1, *([1] * (d0.ndim - 1)))
    return np.sqrt(ab) * d0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=float)


def forward_step(d_prev, t: int, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """One step of the recursive chain ``sqrt(alpha_t) d_{t-1} + sqrt(1 - alpha_t) eps``."""
    a = schedule.alpha(t)
    return np.sqrt(a) * np.asarray(d_prev, dtype=float) + np.sqrt(1.0 - a) * np.asarray(eps, dtype=float)


def time_embedding(t, dim: int = 64) -> np.ndarray:
    """Sinusoidal embedding of integer steps, (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserConfig:
    t_future: int = 12
    g_dim: int = 256
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    ffn: int = 128
    time_dim: int = 64


class Denoiser(Module):
    """Noise predictor over (B, 5 * t_future) states.

    ``invocations`` counts state evaluations: a call on a batch of B states
    adds B.
    """

    def __init__(self, rng: np.random.Generator, config: DenoiserConfig | None = None):
        super().__init__()
        c = self.config = config or DenoiserConfig()
        if c.d_model % c.heads:
            raise ValueError("d_model must be divisible by heads")
        self.invocations = 0
        add_dense(self, rng, "tok", 5, c.d_model)
        self.param("pos", rng.normal(0.0, 0.02, size=(c.t_future, c.d_model)))
        add_mlp(self, rng, "time", [c.time_dim, c.d_model, c.d_model])
        add_dense(self, rng, "guide", c.g_dim, c.d_model)
        for i in range(c.layers):
            add_layer_norm(self, f"blk{i}.ln1", c.d_model)
            add_dense(self, rng, f"blk{i}.qkv", c.d_model, 3 * c.d_model)
            add_dense(self, rng, f"blk{i}.proj", c.d_model, c.d_model)
            add_layer_norm(self, f"blk{i}.ln2", c.d_model)
            add_mlp(self, rng, f"blk{i}.ffn", [c.d_model, c.ffn, c.d_model])
        add_layer_norm(self, "ln_out", c.d_model)
        add_dense(self, rng, "out", c.d_model, 5)

    def reset_counter(self) -> None:
        self.invocations = 0

    def __call__(self, d, t, g) -> Tensor:
        return self.predict_noise(d, t, g)

    def predict_noise(self, d, t, g) -> Tensor:
        """``d`` (B, 5T) state at step ``t`` (scalar or (B,)), guidance ``g`` (B, g_dim)."""
        c = self.config
        d = d if isinstance(d, Tensor) else Tensor(d)
        g = g if isinstance(g, Tensor) else Tensor(g)
        b = d.shape[0]
        self.invocations += b
        t = np.broadcast_to(np.asarray(t), (b,))
        temb = Tensor(time_embedding(t, c.time_dim))
        cond = apply_mlp(self, "time", temb, 2) + apply_dense(self, "guide", g)
        x = apply_dense(self, "tok", d.reshape(b, c.t_future, 5)) + self["pos"] + cond.reshape(b, 1, c.d_model)
        for i in range(c.layers):
            h = apply_layer_norm(self, f"blk{i}.ln1", x)
            qkv = apply_dense(self, f"blk{i}.qkv", h)
            q = split_heads(qkv[:, :, : c.d_model], c.heads)
            k = split_heads(qkv[:, :, c.d_model : 2 * c.d_model], c.heads)
            v = split_heads(qkv[:, :, 2 * c.d_model :], c.heads)
            x = x + apply_dense(self, f"blk{i}.proj", merge_heads(attention(q, k, v)))
            x = x + apply_mlp(self, f"blk{i}.ffn", apply_layer_norm(self, f"blk{i}.ln2", x), 2)
        out = apply_dense(self, "out", apply_layer_norm(self, "ln_out", x))
        return out.reshape(b, 5 * c.t_future)

    def config_json(self) -> str:
        return json.dumps(asdict(self.config), sort_keys=True)


def reverse_step(d_next, t: int, g, denoiser, schedule: DiffusionSchedule, rng: np.random.Generator | None,
                 eps_hat=None, noise=None) -> Tensor:
    """Move from level ``t + 1`` to level ``t``.

    ``d_t = (d_{t+1} - beta/sqrt(1 - abar) * eps_hat) / sqrt(alpha) + sqrt(beta) * noise``
    with the noise term dropped on the final step (``t == 0``) or when ``rng``
    is None and no explicit ``noise`` is given. ``eps_hat`` overrides the
    network (useful for planted-noise checks).
    """
    s = t + 1
    if not 1 <= s <= schedule.T:
        raise ValueError(f"reverse_step needs 1 <= t+1 <= {schedule.T}, got t={t}")
    d_next = d_next if isinstance(d_next, Tensor) else Tensor(d_next)
    if eps_hat is None:
        eps_hat = denoiser.predict_noise(d_next, s, g)
    elif not isinstance(eps_hat, Tensor):
        eps_hat = Tensor(eps_hat)
    beta = float(schedule.beta(s))
    alpha = float(schedule.alpha(s))
    abar = float(schedule.alpha_bar(s))
    mean = (d_next - eps_hat * (beta / np.sqrt(1.0 - abar))) * (1.0 / np.sqrt(alpha))
    if t == 0:
        return mean
    if noise is None and rng is not None:
        noise = rng.standard_normal(d_next.shape)
    if noise is None:
        return mean
    return mean + np.sqrt(beta) * np.asarray(noise)


def run_reverse(d_start, start_level: int, g, denoiser, schedule: DiffusionSchedule, rng, check: bool = True,
                stop: int = 0) -> Tensor:
    """Reverse chain from ``start_level`` down to level ``stop`` (one denoiser call per level)."""
    d = d_start if isinstance(d_start, Tensor) else Tensor(d_start)
    for t in range(start_level - 1, stop - 1, -1):
        d = reverse_step(d, t, g, denoiser, schedule, rng)
        if check and not np.all(np.isfinite(d.data)):
            raise NumericalError(f"non-finite diffusion state at step {t}")
    return d


def truncated_denoise(plan, g, denoiser, schedule: DiffusionSchedule, steps: int = 5, rng=None) -> Tensor:
    """Treat ``plan`` as the state at level ``steps`` and denoise to level 0.

    Returns unconstrained parameters, (B, 5T); exactly ``steps`` denoiser
    evaluations per row.
    """
    if steps < 0 or steps > schedule.T:
        raise ValueError(f"truncation steps must lie in [0, {schedule.T}]")
    return run_reverse(plan, steps, g, denoiser, schedule, rng)


def denoise_from_noise(g, denoiser, schedule: DiffusionSchedule, rng, dim: int) -> Tensor:
    """Full chain from pure noise at level T."""
    g = np.atleast_2d(np.asarray(g.data if isinstance(g, Tensor) else g))
    return run_reverse(rng.standard_normal((g.shape[0], dim)), schedule.T, g, denoiser, schedule, rng)


def pd_loss(d0: np.ndarray, g, denoiser, schedule: DiffusionSchedule, rng: np.random.Generator,
            t=None, eps=None) -> Tensor:
    """MSE between predicted and true noise at a uniformly drawn step per row."""
    d0 = np.atleast_2d(np.asarray(d0, dtype=float))
    b = d0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=b)
    if eps is None:
        eps = rng.standard_normal(d0.shape)
    d_t = forward_sample(d0, t, eps, schedule)
    diff = denoiser.predict_noise(d_t, t, g) - eps
    return (diff * diff).mean()

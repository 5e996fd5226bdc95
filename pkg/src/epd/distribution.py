"""Per-timestep bivariate Gaussians over a future trajectory, and the encoder
that fits them to observed futures.

Each future step carries five numbers (mu_x, mu_y, sigma_x, sigma_y, rho).
The unconstrained layout used by the energy and diffusion models stores
``(mu_x, mu_y, log sigma_x, log sigma_y, atanh rho)`` per step, flattened to a
vector of length ``5 * t_future``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, concat
from .nn import Module, add_lstm, add_mlp, apply_mlp, run_lstm

SIGMA_FLOOR = 1e-6
SIGMA_CEIL = 1e6
RHO_MAX = 1.0 - 1e-6
LOG_SIGMA_MIN = math.log(SIGMA_FLOOR)
LOG_SIGMA_MAX = math.log(SIGMA_CEIL)
ATANH_RHO_MAX = math.atanh(RHO_MAX)
LOG_2PI = math.log(2.0 * math.pi)


class InvalidDistribution(ValueError):
    pass


@dataclass
class GaussianSeq:
    mu: np.ndarray  # (T, 2)
    sigma: np.ndarray  # (T, 2)
    rho: np.ndarray  # (T,)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)

    def __len__(self):
        return self.mu.shape[0]

    def validate(self) -> None:
        t = self.mu.shape[0]
        if self.mu.shape != (t, 2) or self.sigma.shape != (t, 2) or self.rho.shape != (t,):
            raise InvalidDistribution(f"inconsistent shapes mu{self.mu.shape} sigma{self.sigma.shape} rho{self.rho.shape}")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.sigma)) and np.all(np.isfinite(self.rho))):
            raise InvalidDistribution("non-finite parameters")
        if np.any(self.sigma <= 0):
            raise InvalidDistribution("sigma must be positive")
        if np.any(np.abs(self.rho) >= 1):
            raise InvalidDistribution("rho must lie strictly inside (-1, 1)")

    @classmethod
    def standard(cls, t_future: int) -> "GaussianSeq":
        return cls(np.zeros((t_future, 2)), np.ones((t_future, 2)), np.zeros(t_future))

    def covariances(self) -> np.ndarray:
        sx, sy = self.sigma[:, 0], self.sigma[:, 1]
        c = np.empty((len(self), 2, 2))
        c[:, 0, 0] = sx * sx
        c[:, 1, 1] = sy * sy
        c[:, 0, 1] = c[:, 1, 0] = self.rho * sx * sy
        return c

    def entropy(self) -> float:
        """Differential entropy of the whole sequence (steps independent)."""
        self.validate()
        per = 1.0 + LOG_2PI + np.log(self.sigma[:, 0] * self.sigma[:, 1] * np.sqrt(1.0 - self.rho**2))
        return float(per.sum())

    def shifted(self, offset) -> "GaussianSeq":
        return GaussianSeq(self.mu + np.asarray(offset, dtype=float), self.sigma.copy(), self.rho.copy())


def to_unconstrained(dist: GaussianSeq) -> np.ndarray:
    dist.validate()
    u = np.empty((len(dist), 5))
    u[:, :2] = dist.mu
    u[:, 2:4] = np.log(dist.sigma)
    u[:, 4] = np.arctanh(dist.rho)
    return u.reshape(-1)


def from_unconstrained(vec) -> GaussianSeq:
    """Inverse of :func:`to_unconstrained`; any finite vector maps to a valid
    distribution (sigma clipped to [1e-6, 1e6], |rho| capped at 1 - 1e-6)."""
    vec = np.asarray(vec, dtype=float)
    if not np.all(np.isfinite(vec)):
        raise InvalidDistribution("non-finite unconstrained parameters")
    if vec.size % 5:
        raise InvalidDistribution(f"length {vec.size} is not a multiple of 5")
    u = vec.reshape(-1, 5)
    sigma = np.exp(np.clip(u[:, 2:4], LOG_SIGMA_MIN, LOG_SIGMA_MAX))
    rho = np.tanh(np.clip(u[:, 4], -ATANH_RHO_MAX, ATANH_RHO_MAX))
    return GaussianSeq(u[:, :2].copy(), sigma, rho)


def nll(dist: GaussianSeq, truth) -> float:
    """Negative log-density of ``truth`` (T, 2), summed over steps."""
    dist.validate()
    truth = np.asarray(truth, dtype=float)
    if truth.shape != dist.mu.shape:
        raise ValueError(f"truth shape {truth.shape} does not match distribution {dist.mu.shape}")
    dx = (truth[:, 0] - dist.mu[:, 0]) / dist.sigma[:, 0]
    dy = (truth[:, 1] - dist.mu[:, 1]) / dist.sigma[:, 1]
    r = dist.rho
    one_m = 1.0 - r * r
    quad = (dx * dx - 2.0 * r * dx * dy + dy * dy) / (2.0 * one_m)
    norm = np.log(2.0 * np.pi * dist.sigma[:, 0] * dist.sigma[:, 1] * np.sqrt(one_m))
    return float((norm + quad).sum())


def density(dist_step: tuple, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bivariate normal density for one step ``(mux, muy, sx, sy, rho)`` on a grid."""
    mux, muy, sx, sy, r = dist_step
    dx, dy = (x - mux) / sx, (y - muy) / sy
    one_m = 1.0 - r * r
    return np.exp(-(dx * dx - 2 * r * dx * dy + dy * dy) / (2 * one_m)) / (2 * np.pi * sx * sy * np.sqrt(one_m))


def sample(dist: GaussianSeq, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` trajectories of shape (T, 2); steps are drawn independently."""
    dist.validate()
    z = rng.standard_normal((count, len(dist), 2))
    sx, sy, r = dist.sigma[:, 0], dist.sigma[:, 1], dist.rho
    out = np.empty_like(z)
    out[..., 0] = dist.mu[:, 0] + sx * z[..., 0]
    out[..., 1] = dist.mu[:, 1] + sy * (r * z[..., 0] + np.sqrt(1.0 - r * r) * z[..., 1])
    return out


def nll_tensor(u: Tensor, truth: np.ndarray) -> Tensor:
    """Differentiable per-window NLL.

    ``u`` is (B, 5*T) unconstrained parameters, ``truth`` is (B, T, 2);
    returns a (B,) tensor of summed per-step negative log-densities.
    """
    b = u.shape[0]
    t = truth.shape[1]
    p = u.reshape(b, t, 5)
    log_sx = p[:, :, 2].clip(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    log_sy = p[:, :, 3].clip(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    rho = p[:, :, 4].clip(-ATANH_RHO_MAX, ATANH_RHO_MAX).tanh()
    dx = (truth[:, :, 0] - p[:, :, 0]) * (-log_sx).exp()
    dy = (truth[:, :, 1] - p[:, :, 1]) * (-log_sy).exp()
    one_m = 1.0 - rho * rho
    quad = (dx * dx - 2.0 * rho * dx * dy + dy * dy) / (2.0 * one_m)
    norm = LOG_2PI + log_sx + log_sy + 0.5 * one_m.log()
    return (norm + quad).sum(axis=1)


def write_csv(dists: list[GaussianSeq], path, labels: list[str] | None = None) -> None:
    """One row per (distribution, step): label, t, mux, muy, sigx, sigy, rho."""
    labels = labels or [str(i) for i in range(len(dists))]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "t", "mux", "muy", "sigx", "sigy", "rho"])
        for label, d in zip(labels, dists):
            for t in range(len(d)):
                w.writerow([label, t + 1, *(repr(float(v)) for v in (d.mu[t, 0], d.mu[t, 1], d.sigma[t, 0], d.sigma[t, 1], d.rho[t]))])


def read_csv(path) -> dict[str, GaussianSeq]:
    rows: dict[str, list] = {}
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            rows.setdefault(r["label"], []).append(r)
    out = {}
    for label, rs in rows.items():
        rs.sort(key=lambda r: int(r["t"]))
        a = np.array([[float(r[k]) for k in ("mux", "muy", "sigx", "sigy", "rho")] for r in rs])
        out[label] = GaussianSeq(a[:, :2], a[:, 2:4], a[:, 4])
    return out


class TrajectoryDistributionModel(Module):
    """Encodes a future trajectory (plus masked neighbor futures) into the
    unconstrained parameters of a :class:`GaussianSeq`.

    Agents share one recurrent encoder; neighbors are reduced with a
    mask-weighted mean and fused with the ego code by an MLP head.
    """

    def __init__(self, rng: np.random.Generator, t_future: int = 12, hidden: int = 64, head_hidden: int = 128,
                 use_neighbors: bool = True):
        super().__init__()
        self.t_future = t_future
        self.hidden = hidden
        self.use_neighbors = use_neighbors
        add_lstm(self, rng, "rnn", 2, hidden)
        add_mlp(self, rng, "head", [2 * hidden, head_hidden, head_hidden, 5 * t_future], last_gain=0.1)

    def encode(self, future: np.ndarray, nbr_future: np.ndarray | None, mask: np.ndarray | None) -> Tensor:
        """(B, T, 2) ego futures -> (B, 5T) unconstrained parameters."""
        b, t, _ = future.shape
        h_dim = self.hidden
        if self.use_neighbors and nbr_future is not None and mask is not None and nbr_future.shape[1] > 0:
            n = nbr_future.shape[1]
            seqs = np.concatenate([future, nbr_future.reshape(b * n, t, 2)], axis=0)
            h = run_lstm(self, "rnn", Tensor(seqs), h_dim)
            h_ego = h[:b]
            h_nbr = h[b:].reshape(b, n, h_dim)
            w = mask.astype(float)
            weights = w / np.maximum(w.sum(axis=1, keepdims=True), 1.0)
            agg = (h_nbr * weights[:, :, None]).sum(axis=1)
        else:
            h_ego = run_lstm(self, "rnn", Tensor(future), h_dim)
            agg = Tensor(np.zeros((b, h_dim)))
        return apply_mlp(self, "head", concat([h_ego, agg], axis=-1), 3, act="tanh")

    def encode_future(self, ego_future, neighbor_futures=None, mask=None) -> GaussianSeq:
        nf = None if neighbor_futures is None else np.asarray(neighbor_futures, dtype=float)[None]
        m = None if mask is None else np.asarray(mask, dtype=bool)[None]
        u = self.encode(np.asarray(ego_future, dtype=float)[None], nf, m)
        return from_unconstrained(u.data[0])

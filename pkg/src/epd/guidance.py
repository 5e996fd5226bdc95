"""Guidance features from observed pasts: a temporal code for the ego and a
social code from attention over masked neighbors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, concat, where
from .data import Batch, SceneWindow, collate
from .nn import Module, add_dense, add_lstm, apply_dense, attention, merge_heads, run_lstm, split_heads


@dataclass
class GuidanceFeature:
    f_temp: np.ndarray
    f_spat: np.ndarray

    @property
    def g(self) -> np.ndarray:
        return np.concatenate([self.f_temp, self.f_spat], axis=-1)


class GuidanceEncoder(Module):
    def __init__(self, rng: np.random.Generator, hidden: int = 128, feature_dim: int = 128, heads: int = 1,
                 share_recurrent: bool = True):
        super().__init__()
        if feature_dim % heads:
            raise ValueError(f"feature_dim {feature_dim} not divisible by heads {heads}")
        self.hidden = hidden
        self.feature_dim = feature_dim
        self.heads = heads
        self.share_recurrent = share_recurrent
        add_lstm(self, rng, "rnn", 2, hidden)
        if not share_recurrent:
            add_lstm(self, rng, "rnn_nbr", 2, hidden)
        add_dense(self, rng, "temp", hidden, feature_dim)
        add_dense(self, rng, "query", hidden, feature_dim)
        add_dense(self, rng, "key", hidden, feature_dim)
        add_dense(self, rng, "value", hidden, feature_dim)
        add_dense(self, rng, "spat", feature_dim, feature_dim)
        self.param("null", rng.normal(0.0, 0.1, size=feature_dim))

    @property
    def output_dim(self) -> int:
        return 2 * self.feature_dim

    def _encode_agents(self, batch: Batch) -> tuple[Tensor, Tensor]:
        b, n, t, _ = batch.nbr_past.shape
        if self.share_recurrent:
            seqs = np.concatenate([batch.past, batch.nbr_past.reshape(b * n, t, 2)], axis=0)
            h = run_lstm(self, "rnn", Tensor(seqs), self.hidden)
            return h[:b], h[b:].reshape(b, n, self.hidden)
        h_ego = run_lstm(self, "rnn", Tensor(batch.past), self.hidden)
        h_nbr = run_lstm(self, "rnn_nbr", Tensor(batch.nbr_past.reshape(b * n, t, 2)), self.hidden)
        return h_ego, h_nbr.reshape(b, n, self.hidden)

    def temporal(self, h_ego: Tensor) -> Tensor:
        return apply_dense(self, "temp", h_ego)

    def social(self, h_ego: Tensor, h_nbr: Tensor, mask: np.ndarray) -> Tensor:
        b, n, _ = h_nbr.shape
        q = split_heads(apply_dense(self, "query", h_ego).reshape(b, 1, self.feature_dim), self.heads)
        k = split_heads(apply_dense(self, "key", h_nbr), self.heads)
        v = split_heads(apply_dense(self, "value", h_nbr), self.heads)
        ctx = merge_heads(attention(q, k, v, mask[:, None, None, :])).reshape(b, self.feature_dim)
        attended = apply_dense(self, "spat", ctx)
        has_any = mask.any(axis=1)[:, None]
        null = self["null"].reshape(1, self.feature_dim)
        return where(np.broadcast_to(has_any, attended.shape), attended, null)

    def forward(self, batch: Batch) -> Tensor:
        """(B, 2 * feature_dim) guidance tensor: [f_temp, f_spat]."""
        h_ego, h_nbr = self._encode_agents(batch)
        return concat([self.temporal(h_ego), self.social(h_ego, h_nbr, batch.mask)], axis=-1)

    def encode_temporal(self, ego_past: np.ndarray) -> np.ndarray:
        h = run_lstm(self, "rnn", Tensor(np.asarray(ego_past, dtype=float)[None]), self.hidden)
        return self.temporal(h).data[0]

    def encode_social(self, ego_past, neighbor_pasts, mask) -> np.ndarray:
        w = SceneWindow(np.asarray(ego_past, float), None, np.asarray(neighbor_pasts, float).reshape(-1, len(ego_past), 2),
                        np.asarray(mask, bool))
        batch = collate([w], with_future=False)
        h_ego, h_nbr = self._encode_agents(batch)
        return self.social(h_ego, h_nbr, batch.mask).data[0]

    def guidance(self, window: SceneWindow) -> GuidanceFeature:
        g = self.forward(collate([window.observation()], with_future=False)).data[0]
        return GuidanceFeature(g[: self.feature_dim].copy(), g[self.feature_dim :].copy())

    def attention_weights(self, batch: Batch) -> np.ndarray:
        """Attention over neighbors, (B, heads, N); for inspection and tests."""
        h_ego, h_nbr = self._encode_agents(batch)
        b, n, _ = h_nbr.shape
        q = split_heads(apply_dense(self, "query", h_ego).reshape(b, 1, self.feature_dim), self.heads).data
        k = split_heads(apply_dense(self, "key", h_nbr), self.heads).data
        s = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
        s = np.where(batch.mask[:, None, None, :], s, -np.inf)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        return (e / e.sum(axis=-1, keepdims=True))[:, :, 0, :]

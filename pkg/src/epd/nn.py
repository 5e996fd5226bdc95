"""Parameter containers and the handful of layers the models share."""

from __future__ import annotations

import hashlib

import numpy as np

from .autograd import Tensor, concat, layer_norm


class Module:
    """Flat, dotted-name parameter store.

    Subclasses register leaves with :meth:`param`; :attr:`params` maps names
    to tensors that require gradients.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if n.startswith(prefix)}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for n, t in self.params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    def zero_(self) -> None:
        for t in self.params.values():
            t.data[...] = 0.0

    def fingerprint(self) -> str:
        return params_hash(self.params)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


def params_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def glorot(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y + b if b is not None else y


def add_dense(m: Module, rng, name: str, n_in: int, n_out: int, gain: float = 1.0) -> None:
    m.param(f"{name}.w", glorot(rng, n_in, n_out, gain))
    m.param(f"{name}.b", np.zeros(n_out))


def apply_dense(m: Module, name: str, x: Tensor) -> Tensor:
    return dense(x, m[f"{name}.w"], m[f"{name}.b"])


def add_mlp(m: Module, rng, name: str, sizes: list[int], last_gain: float = 1.0) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = last_gain if i == len(sizes) - 2 else 1.0
        add_dense(m, rng, f"{name}.{i}", a, b, gain)


def apply_mlp(m: Module, name: str, x: Tensor, n_layers: int, act: str = "silu") -> Tensor:
    for i in range(n_layers):
        x = apply_dense(m, f"{name}.{i}", x)
        if i < n_layers - 1:
            x = x.silu() if act == "silu" else x.tanh()
    return x


def add_lstm(m: Module, rng, name: str, n_in: int, hidden: int) -> None:
    w = np.concatenate([glorot(rng, n_in + hidden, hidden) for _ in range(4)], axis=1)
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0  # forget gate
    m.param(f"{name}.w", w)
    m.param(f"{name}.b", b)


def run_lstm(m: Module, name: str, seq: Tensor, hidden: int) -> Tensor:
    """Final hidden state of an LSTM over ``seq`` of shape (batch, steps, features)."""
    w, b = m[f"{name}.w"], m[f"{name}.b"]
    batch, steps = seq.shape[0], seq.shape[1]
    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    H = hidden
    for t in range(steps):
        z = concat([seq[:, t, :], h], axis=-1) @ w + b
        i = z[:, :H].sigmoid()
        f = z[:, H : 2 * H].sigmoid()
        o = z[:, 2 * H : 3 * H].sigmoid()
        g = z[:, 3 * H :].tanh()
        c = f * c + i * g
        h = o * c.tanh()
    return h


def add_layer_norm(m: Module, name: str, dim: int) -> None:
    m.param(f"{name}.gain", np.ones(dim))
    m.param(f"{name}.bias", np.zeros(dim))


def apply_layer_norm(m: Module, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, m[f"{name}.gain"], m[f"{name}.bias"])


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    ``mask`` broadcasts against the score tensor; False entries are excluded.
    """
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + np.where(mask, 0.0, -1e30)
    return scores.softmax(axis=-1) @ v

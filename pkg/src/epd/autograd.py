"""Reverse-mode automatic differentiation over numpy float64 arrays.

Operations record themselves on the active :class:`Tape` (if any) when at
least one input requires a gradient. Outside a tape nothing is recorded, which
is the fast path used for inference.

    with Tape() as tape:
        loss = ((x @ w).tanh()).sum()
    (gw,) = tape.backward(loss, [w])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None

    def __len__(self):
        return len(self.nodes)

    def backward(self, output: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

        Nodes are visited in exact reverse recording order. Accumulators are
        fresh for every call, so repeated calls are independent.
        """
        if output.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for out, parents, vjp in reversed(self.nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for p, pg in zip(parents, vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = grads[k] + pg if k in grads else pg
        return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


def backward(output: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
    """Backward pass on the currently active tape."""
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    return tape.backward(output, wrt)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


def _result(data: np.ndarray, parents: tuple, vjp: Callable) -> "Tensor":
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.nodes.append((out, parents, vjp))
    return out


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # elementwise arithmetic
    def __add__(self, other):
        other = as_tensor(other)
        _broadcast_shape(self.shape, other.shape, "add")
        a, b = self, other

        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _result(a.data + b.data, (a, b), vjp)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        _broadcast_shape(self.shape, other.shape, "sub")
        a, b = self, other

        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return _result(a.data - b.data, (a, b), vjp)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        _broadcast_shape(self.shape, other.shape, "mul")
        a, b = self, other

        def vjp(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return _result(a.data * b.data, (a, b), vjp)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        _broadcast_shape(self.shape, other.shape, "div")
        a, b = self, other
        out = a.data / b.data

        def vjp(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), vjp)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, power: float):
        if isinstance(power, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self

        def vjp(g):
            return (g * power * a.data ** (power - 1),)

        return _result(a.data**power, (a,), vjp)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        a = self

        def vjp(g):
            full = np.zeros_like(a.data)
            if _needs_add_at(index):
                np.add.at(full, index, g)
            else:
                full[index] = g
            return (full,)

        return _result(a.data[index], (a,), vjp)

    # unary
    def exp(self):
        out = np.exp(self.data)
        return _result(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self
        return _result(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _result(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return _result(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return _result(out, (self,), lambda g: (g * out * (1.0 - out),))

    def silu(self):
        s = _sigmoid(self.data)
        x = self.data
        return _result(x * s, (self,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))

    def clip(self, lo: float | None = None, hi: float | None = None):
        a = self
        out = np.clip(a.data, lo, hi)

        def vjp(g):
            keep = np.ones_like(a.data, dtype=bool)
            if lo is not None:
                keep &= a.data >= lo
            if hi is not None:
                keep &= a.data <= hi
            return (g * keep,)

        return _result(out, (a,), vjp)

    # shape
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        try:
            out = a.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
        return _result(out, (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    # reductions
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def norm(self, axis=None, keepdims: bool = False):
        """Euclidean norm; the gradient at exactly zero is taken as zero."""
        a = self
        out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

        def vjp(g):
            o = out if (axis is None or keepdims) else np.expand_dims(out, axis)
            gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
            safe = np.where(o > 0, o, 1.0)
            return (np.where(o > 0, gg * a.data / safe, 0.0),)

        return _result(out, (a,), vjp)

    def softmax(self, axis: int = -1):
        e = np.exp(self.data - self.data.max(axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)

        def vjp(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return _result(out, (self,), vjp)


def _needs_add_at(index) -> bool:
    # fancy (array) indices may repeat positions; basic slices never do
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        ax = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(ax, 1)
        expanded.append(as_tensor(t).reshape(tuple(shape)))
    return concat(expanded, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def vjp(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv / n * (
                n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _result(xhat * gain.data + bias.data, (x, gain, bias), vjp)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select with a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def vjp(g):
        return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)

    return _result(np.where(mask, a.data, b.data), (a, b), vjp)


@dataclass
class GradCheckReport:
    """Per-parameter relative errors from a finite-difference comparison."""

    errors: dict[str, float]
    tolerance: float
    checked_entries: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self):
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        verdict = "PASS" if self.passed else "FAIL"
        return f"gradcheck {verdict}: max rel err {self.max_error:.3e} (worst: {worst}) tol {self.tolerance:g}"


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` with central finite differences.

    The error for each named parameter is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`` with ``|.|`` the Euclidean
    norm over the checked entries. ``max_entries`` subsamples large tensors
    (indices drawn with ``seed``).
    """
    if not 0.0 < step <= 1e-3:
        raise ValueError(f"step must lie in (0, 1e-3], got {step}")
    names = list(params)
    tensors = [params[n] for n in names]
    with Tape() as tape:
        loss = loss_fn()
    analytic = tape.backward(loss, tensors)

    def evaluate(name, idx) -> float:
        value = float(np.asarray(loss_fn().data).reshape(()))
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss after perturbing {name}{[int(i) for i in idx]}")
        return value

    rng = np.random.default_rng(seed)
    errors, counts = {}, {}
    for name, t, ga in zip(names, tensors, analytic):
        flat = t.data.reshape(-1)
        idx_all = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx_all = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        fd = np.empty(idx_all.size)
        for j, i in enumerate(idx_all):
            orig = flat[i]
            pos = np.unravel_index(i, t.shape)
            flat[i] = orig + step
            up = evaluate(name, pos)
            flat[i] = orig - step
            down = evaluate(name, pos)
            flat[i] = orig
            fd[j] = (up - down) / (2.0 * step)
        an = ga.reshape(-1)[idx_all]
        denom = max(np.linalg.norm(an), np.linalg.norm(fd), 1e-8)
        errors[name] = float(np.linalg.norm(an - fd) / denom)
        counts[name] = int(idx_all.size)
    return GradCheckReport(errors, tolerance, counts)


"""Dense fp64 tensors with tape-based reverse-mode autodiff.

Just enough machinery for a small transformer encoder and the ranking losses.
Every op is a module-level function that computes its forward value with numpy
and, when any input requires a gradient, records a closure that pushes the
upstream gradient back into its inputs.

Broadcasting is restricted to a trailing-shape operand (bias style): ``a + b``
is allowed when ``b.shape`` is a suffix of ``a.shape`` or ``b`` is a Python
scalar.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        Tape.from_root(self).backward(grad)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # one reduction instead of an elementwise mask; any NaN/Inf poisons the sum
    if arr.size and not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.name = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


@dataclass
class Tape:
    """Ops reachable from a root, in execution order (inputs before outputs)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        # creation order is a valid topological order
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.nodes:
            return
        root = self.nodes[-1]
        if grad is None:
            if root.data.size != 1:
                raise DimensionError("backward() without a gradient needs a scalar root")
            grad = np.ones_like(root.data)
        for t in self.nodes:
            if t._backward is not None:
                t.grad = None
        _accum(root, grad)
        for t in reversed(self.nodes):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


# --------------------------------------------------------------------------
# elementwise


def _suffix_reduce(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: _accum(a, g), "add")
    if a.ndim < b.ndim:
        a, b = b, a
    _check_suffix(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, _suffix_reduce(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -float(b))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: _accum(a, g * c), "mul")
    if a.ndim < b.ndim:
        a, b = b, a
    _check_suffix(a, b, "mul")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, _suffix_reduce(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: _accum(a, g * y), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: _accum(a, g / x), "log")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: _accum(a, 2.0 * x * g), "square")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: _accum(a, g * pos), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: _accum(a, g * y * (1.0 - y)), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), i.e. -log sigmoid(-x)."""
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(y, (a,), lambda g: _accum(a, g * _sigmoid(x)), "softplus")


# --------------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(old)), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: _accum(a, np.transpose(g, inv)), "transpose")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style expansion (size-1 or missing leading axes)."""
    shape = tuple(shape)
    src = a.shape
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        _accum(a, g.sum(axis=axes, keepdims=True) if axes else g)

    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(data, (a,), backward, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(data, tensors, backward, "concat")


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, shape))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or (..., m, k) @ (..., k, n) with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading dims differ, {a.shape} @ {b.shape}")
    shared = b.ndim == 2

    def backward(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if shared:
                k = a.shape[-1]
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# --------------------------------------------------------------------------
# normalisation


def softmax(a: Tensor, axis: int = -1, where: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. ``where`` (broadcastable bool) zeroes excluded slots exactly."""
    x = a.data
    if where is None:
        m = x.max(axis=axis, keepdims=True)
        e = np.exp(x - m)
    else:
        m = np.where(where, x, -np.inf).max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(where, np.exp(np.where(where, x - m, 0.0)), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def backward(g):
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), backward, "softmax")


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """log sum exp along ``axis``.

    The exponentials are summed in ascending order, so the result depends only
    on the multiset of values along the axis and not on their arrangement.
    """
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    total = np.sort(e, axis=axis).sum(axis=axis, keepdims=True)
    y = np.squeeze(m + np.log(total), axis=axis)
    p = e / total

    def backward(g):
        _accum(a, np.expand_dims(g, axis) * p)

    return _make(y, (a,), backward, "logsumexp")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit (population) variance, then affine."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accum(gain, _suffix_reduce(g * xhat, gain.shape))
        if bias.requires_grad:
            _accum(bias, _suffix_reduce(g, bias.shape))
        if x.requires_grad:
            gh = g * gain.data
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx)

    return _make(y, (x, gain, bias), backward, "layer_norm")


# --------------------------------------------------------------------------
# indexing


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; output shape is ids.shape + table.shape[1:]."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)].ravel()[0]
        raise IndexError(f"embedding id {int(bad)} out of range [0, {n})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape((-1,) + table.shape[1:]))
        _accum(table, gt)

    return _make(table.data[ids], (table,), backward, "embedding_lookup")


def pick(a: Tensor, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        _accum(a, ga)

    return _make(a.data[rows, idx], (a,), backward, "pick")


# --------------------------------------------------------------------------
# regularisation


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: _accum(x, g * keep), "dropout")


def dropout_rng(seed: int, layer_id: int, step: int) -> np.random.Generator:
    """Counter-style generator keyed on (seed, layer, step)."""
    return np.random.default_rng([seed & 0xFFFFFFFF, layer_id, step])


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and state must align")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"adam: gradient shape {g.shape} != param shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                  self.betas[0], self.betas[1], self.eps)


def grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    norm = grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# --------------------------------------------------------------------------
# checking


def numerical_grad(f: Callable[[], float], x: Tensor, h: float = 1e-5,
                   coords: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x.data`` (in place perturbation).

    With ``coords`` only those entries are filled; the rest stay zero.
    """
    out = np.zeros_like(x.data)
    it = coords if coords is not None else np.ndindex(*x.shape)
    for c in it:
        old = x.data[c]
        x.data[c] = old + h
        fp = f()
        x.data[c] = old - h
        fm = f()
        x.data[c] = old
        out[c] = (fp - fm) / (2 * h)
    return out

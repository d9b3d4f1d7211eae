"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds a node holding its inputs and a closure that maps the output
gradient to input gradients. ``Tensor.backward`` linearizes the reachable
graph into a :class:`Tape` (inputs before outputs) and replays it in reverse.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them (inference, memory updates)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "tape_id")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.tape_id: int | None = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # -- backward ------------------------------------------------------------
    def backward(self) -> Tape:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Only scalar outputs are supported.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {self.shape}")
        tape = Tape.record(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return tape

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return index(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)


class Tape:
    """Topologically ordered record of the nodes reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                node.tape_id = len(order)
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if grad_enabled() and any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data > lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    A 1-D left operand is treated as a row vector.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[0]:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            # shared weight: fold the batch axes into one product
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _make(out, (a, b), backward, "matmul")


# -- reductions --------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    if n < 1:
        raise ShapeError(f"mean over empty axis {axis} of shape {a.shape}")
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / n,), "mean")


def tmax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximizer."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def backward(g):
        full = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis)
        return (full,)

    return _make(out, (a,), backward, "max")


def tmin(a, axis: int, keepdims: bool = False) -> Tensor:
    return neg(tmax(neg(a), axis, keepdims))


# -- shape / movement --------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    ref = parts[0].shape
    ax = axis % len(ref)
    for i, p in enumerate(parts):
        if p.ndim != len(ref) or any(s != r for k, (s, r) in enumerate(zip(p.shape, ref)) if k != ax):
            raise ShapeError(f"concat: part {i} has shape {p.shape}, incompatible with {ref} on axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=ax)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts)))

    return _make(out, parts, backward, "concat")


def stack(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    return concat([reshape(p, p.shape[:axis % (p.ndim + 1)] + (1,) + p.shape[axis % (p.ndim + 1):]) for p in parts], axis)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """``a[..., start:stop, ...]`` along ``axis``."""
    a = as_tensor(a)
    ax = axis % a.ndim
    extent = a.shape[ax]
    if not 0 <= start < stop <= extent:
        raise IndexError(f"slice [{start}:{stop}] out of bounds for axis {axis} with extent {extent}")
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _make(a.data[sl], (a,), backward, "slice")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 1:
        raise ShapeError(f"take expects 1-D indices, got shape {indices.shape}")
    ax = axis % a.ndim

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, ax, 0), indices, np.moveaxis(g, ax, 0))
        return (full,)

    return _make(np.take(a.data, indices, axis=ax), (a,), backward, "take")


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "index")


# -- normalization and losses -----------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layernorm(x, gamma, beta, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.shape[-1]
    if D < 2:
        raise ShapeError(f"layernorm needs at least 2 features, got {D}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(out, (x, gamma, beta), backward, "layernorm")


def l2_normalize(x, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    out = x.data / denom

    def backward(g):
        proj = np.where(big, (g * out).sum(axis=axis, keepdims=True), 0.0)
        return ((g - out * proj) / denom,)

    return _make(out, (x,), backward, "l2_normalize")


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits expects B x C logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {B} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        bad = labels[(labels < 0) | (labels >= C)]
        raise IndexError(f"labels {bad.tolist()} out of range [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    out = np.mean(lse - z[rows, labels])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return _make(out, (logits,), backward, "cross_entropy")

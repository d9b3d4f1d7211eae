"""Parameter containers, transformer sublayers and the Adam optimizer."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Minimal parameter registry: Tensor attributes with requires_grad and child modules."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-12):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02):
        self.w = param(trunc_normal(rng, (d_in, d_out), std))
        self.b = param(np.zeros(d_out))

    def __call__(self, x):
        return T.matmul(x, self.w) + self.b


class MultiHeadAttention(Module):
    """Scaled dot-product attention over (B, n, D) inputs with ``heads`` heads."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, n, D = x.shape
        return T.transpose(T.reshape(x, (B, n, self.heads, D // self.heads)), (0, 2, 1, 3))

    def __call__(self, xq: Tensor, xkv: Tensor):
        B, nq, D = xq.shape
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(D // self.heads))
        weights = T.softmax(scores, axis=-1)
        ctx = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
        return self.o(T.reshape(ctx, (B, nq, D))), weights


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 4):
        self.fc1 = Linear(dim, expansion * dim, rng)
        self.fc2 = Linear(expansion * dim, dim, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm attention + FFN with residuals.

    With ``cross=True`` the keys/values come from a separate token set that
    gets its own layer norm; the residual stream is the query.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, cross: bool = False):
        self.cross = cross
        self.ln_q = LayerNorm(dim)
        if cross:
            self.ln_kv = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, kv: Tensor | None = None) -> Tensor:
        hq = self.ln_q(x)
        hkv = self.ln_kv(kv) if self.cross else hq
        a, weights = self.attn(hq, hkv)
        self.last_weights = weights.data
        x = x + a
        return x + self.ffn(self.ln_ffn(x))


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr != 0.0:
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.1,
          decay_at: float = 0.75, decay: float = 0.1) -> float:
    """Linear warmup from base/10 to base, then one step decay."""
    warm = max(1, int(round(warmup_frac * total_steps)))
    if step < warm:
        return base_lr * (0.1 + 0.9 * step / warm)
    if step >= int(decay_at * total_steps):
        return base_lr * decay
    return base_lr

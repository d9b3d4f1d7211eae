"""Finite-difference checks over every primitive and composed block."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .cpc import PrototypeMemory, cpcl_loss
from .encoder import Encoder, EncoderConfig
from .gradcheck import grad_check
from .losses import id_loss, triplet_loss
from .mii import channel_exchange, cii_block, cmcl_loss, lii_block, sii_block
from .nn import TransformerBlock
from .synthdata import IR, VIS
from .tensor import Tensor


def _cases(seed: int) -> dict[str, tuple[Callable, list]]:
    rng = np.random.default_rng(seed)
    r = lambda *shape: Tensor(rng.normal(size=shape))
    w = lambda *shape: rng.normal(size=shape)
    D, heads = 8, 2
    sii = TransformerBlock(D, heads, rng, cross=True)
    lii = TransformerBlock(D, heads, rng, cross=True)
    cii = TransformerBlock(D, heads, rng, cross=False)
    for blk in (sii, lii, cii):
        # larger weights than the 0.02 init so every path carries gradient
        for p in blk.parameters():
            if p.data.ndim == 2:
                p.data[...] = rng.normal(0, 0.4, size=p.shape)
    enc = Encoder(EncoderConfig(H=8, W=8, P=4, D=8, d=4, L=1, heads=2, seed=seed))
    mem_v = PrototypeMemory(VIS, _unit(rng.normal(size=(3, 4))))
    mem_i = PrototypeMemory(IR, _unit(rng.normal(size=(3, 4))))
    ids6 = [0, 0, 1, 1, 2, 2]
    w34, w24, w2x, w5 = w(3, 4), w(2, 4), w(2, 8), w(5)
    wln, wnorm, w4 = w(2, 8), w(3, 5), w(4)
    return {
        "matmul": (lambda a, b: T.tsum(T.matmul(a, b) * w34[:, :2]), [r(3, 4), r(4, 2)]),
        "add/mul/div": (lambda a, b: T.tsum((a * b + a) / (b * b + 1.0)), [r(3, 4), r(4)]),
        "exp/log/sqrt": (lambda a: T.tsum(T.log(T.exp(a) + 1.0) + T.sqrt(a * a + 1.0)), [r(3, 4)]),
        "tanh/gelu/relu": (lambda a: T.tsum(T.tanh(a) * w34 + T.gelu(a) + T.relu(a + 0.05)), [r(3, 4)]),
        "softmax": (lambda a: T.tsum(T.softmax(a) * w5), [r(5)]),
        "log_softmax": (lambda a: T.tsum(T.log_softmax(a, axis=0) * w34), [r(3, 4)]),
        "layernorm": (lambda x, g, b: T.tsum(T.layernorm(x, g, b) * wln), [r(2, 8), r(8), r(8)]),
        "concat/slice": (lambda a, b: T.tsum(T.slice_axis(T.concat([a, b], axis=1), 1, 1, 5) * w24), [r(2, 2), r(2, 3)]),
        "take/transpose/reshape": (lambda a: T.tsum(T.reshape(T.transpose(T.take(a, [2, 0, 2], 0), (1, 0)), (12,)) ** 2), [r(3, 4)]),
        "mean/sum/max": (lambda a: T.tsum(T.mean(a, axis=0) * w4) + T.tsum(T.tmax(a, 1)) + T.tsum(T.tmin(a, 0)), [r(3, 4)]),
        "l2_normalize": (lambda a: T.tsum(T.l2_normalize(a) * wnorm), [r(3, 5)]),
        "cross_entropy": (lambda a: T.cross_entropy_logits(a, [0, 2, 1, 2]), [r(4, 3)]),
        "encoder": (lambda x: T.tsum(enc.project(enc.encode(x, [VIS, IR])[:, 0, :])), [Tensor(rng.uniform(size=(2, 8, 8)))]),
        "sii": (lambda c, p: T.tsum(sii_block(sii, c, channel_exchange(p)) * w2x[None]), [r(1, 2, D), r(1, 2, 3, D)]),
        "lii": (lambda c, p: T.tsum(lii_block(lii, c, p, 1) * w2x[None]), [r(1, 2, D), r(1, 2, 3, D)]),
        "cii": (lambda o, p: T.tsum(cii_block(cii, o, p) * w2x), [r(2, D), r(2, 2, 2, D)]),
        "cpcl": (lambda b: cpcl_loss(b, ids6, mem_v, mem_i, tau=0.5), [r(6, 4)]),
        "triplet": (lambda f: triplet_loss(f, ids6, margin=0.3), [r(6, 4)]),
        "ce": (lambda f, W: id_loss(f, W, ids6), [r(6, 4), r(4, 3)]),
        "cmcl": (lambda a, b: cmcl_loss([(a, b)]), [r(4, D), r(4, D)]),
    }


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def run_suite(h: float = 1e-6, tol: float = 1e-5, seed: int = 0) -> list[tuple[str, float, bool]]:
    """(name, max relative error, passed) for every check."""
    out = []
    for name, (f, inputs) in _cases(seed).items():
        rep = grad_check(f, inputs, h=h, tol=tol)
        out.append((name, rep.max_rel_err, rep.passed))
    return out


def timed_suite(**kw):
    t0 = time.perf_counter()
    rows = run_suite(**kw)
    return rows, time.perf_counter() - t0

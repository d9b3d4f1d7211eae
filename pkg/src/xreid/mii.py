"""Short-term, long-term and cross-modality token interaction blocks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import ConfigError
from .nn import Module, TransformerBlock
from .tensor import Tensor


def exchange_sources(n_frames: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Source frames for the first and second channel quarters of every frame.

    Neighbours outside the clip fall back to the frame itself.
    """
    t = np.arange(n_frames)
    prev = np.where(t - stride >= 0, t - stride, t)
    nxt = np.where(t + stride < n_frames, t + stride, t)
    return prev, nxt


def channel_exchange(patches, stride: int = 1) -> Tensor:
    """Rebuild each frame's patch tokens from its temporal neighbours.

    ``patches`` has shape (..., T, N, D). Channels [0, D/4) come from frame
    t-stride, [D/4, D/2) from frame t+stride, the rest from frame t.
    """
    patches = T.as_tensor(patches)
    D = patches.shape[-1]
    if D % 4:
        raise ConfigError(f"channel exchange needs D divisible by 4, got {D}")
    prev, nxt = exchange_sources(patches.shape[-3], stride)
    q = D // 4
    return T.concat([
        T.take(T.slice_axis(patches, -1, 0, q), prev, axis=-3),
        T.take(T.slice_axis(patches, -1, q, 2 * q), nxt, axis=-3),
        T.slice_axis(patches, -1, 2 * q, D),
    ], axis=-1)


def lii_pairing(n_frames: int, stride: int) -> np.ndarray:
    """Frame whose patches the [CLS] of each frame attends to (cyclic)."""
    if stride < 0:
        raise ConfigError(f"stride must be >= 0, got {stride}")
    return (np.arange(n_frames) + stride) % n_frames


def _cls_query(block: TransformerBlock, cls: Tensor, kv: Tensor) -> Tensor:
    B, Tn, D = cls.shape
    N = kv.shape[2]
    out = block(T.reshape(cls, (B * Tn, 1, D)), T.reshape(kv, (B * Tn, N, D)))
    return T.reshape(out, (B, Tn, D))


def sii_block(block: TransformerBlock, cls, exchanged) -> Tensor:
    """Per-frame cross-attention: [CLS] (B,T,D) queries its exchanged patches (B,T,N,D)."""
    return _cls_query(block, T.as_tensor(cls), T.as_tensor(exchanged))


def lii_block(block: TransformerBlock, cls, patches, stride: int) -> Tensor:
    """[CLS] of frame t queries the raw patches of frame (t + stride) mod T."""
    patches = T.as_tensor(patches)
    kv = T.take(patches, lii_pairing(patches.shape[1], stride), axis=1)
    return _cls_query(block, T.as_tensor(cls), kv)


def fuse(o_sii: Tensor | None, o_lii: Tensor | None) -> Tensor:
    """Mean over frames of the summed branch outputs; a disabled branch is dropped."""
    parts = [p for p in (o_sii, o_lii) if p is not None]
    if not parts:
        raise ValueError("fuse needs at least one branch")
    total = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return T.mean(total, axis=-2)


def cii_block(block: TransformerBlock, own, other_patches) -> Tensor:
    """Sequence feature (B,D) interacts with each frame of the partner clip (B,T,N,D).

    Position 0 of every [feature; patches] sequence is read back and averaged
    over the partner's frames.
    """
    own, other_patches = T.as_tensor(own), T.as_tensor(other_patches)
    B, Tn, N, D = other_patches.shape
    head = T.reshape(own, (B, 1, 1, D)) + np.zeros((1, Tn, 1, 1))
    seq = T.reshape(T.concat([head, other_patches], axis=2), (B * Tn, 1 + N, D))
    out = block(seq)
    first = T.reshape(T.slice_axis(out, 1, 0, 1), (B, Tn, D))
    return T.mean(first, axis=1)


def cmcl_loss(pairs) -> Tensor:
    """Mean squared L2 distance over (before, after) pairs; rows of 2-D entries count as pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cmcl_loss needs at least one pair")
    sq, count = None, 0
    for before, after in pairs:
        diff = T.as_tensor(before) - T.as_tensor(after)
        s = T.tsum(diff * diff)
        count += 1 if diff.ndim == 1 else diff.shape[0]
        sq = s if sq is None else sq + s
    return sq * (1.0 / count)


@dataclass
class MIIOutputs:
    o_sii: Tensor | None
    o_lii: Tensor | None
    o: Tensor | None


class MII(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.sii = TransformerBlock(dim, heads, rng, cross=True)
        self.lii = TransformerBlock(dim, heads, rng, cross=True)
        self.cii = TransformerBlock(dim, heads, rng, cross=False)
        self.cii_calls = 0

    def __call__(self, cls: Tensor, patches: Tensor, use_sii: bool = True, use_lii: bool = True,
                 sii_stride: int = 1, lii_stride: int = 2) -> MIIOutputs:
        o_sii = sii_block(self.sii, cls, channel_exchange(patches, sii_stride)) if use_sii else None
        o_lii = lii_block(self.lii, cls, patches, lii_stride) if use_lii else None
        o = fuse(o_sii, o_lii) if (use_sii or use_lii) else None
        return MIIOutputs(o_sii, o_lii, o)

    def interact(self, own: Tensor, other_patches: Tensor) -> Tensor:
        self.cii_calls += 1
        return cii_block(self.cii, own, other_patches)

"""Small ViT-style frame encoder shared by both modalities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, TransformerBlock, param, trunc_normal
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    H: int = 32
    W: int = 16
    P: int = 8
    D: int = 64
    d: int = 32
    L: int = 2
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.H % self.P or self.W % self.P:
            raise ConfigError(f"image {self.H}x{self.W} not divisible into {self.P}px patches")
        if self.D % self.heads:
            raise ConfigError(f"token width {self.D} not divisible by {self.heads} heads")

    @property
    def N(self) -> int:
        return (self.H // self.P) * (self.W // self.P)


def patchify(frame: np.ndarray, P: int) -> np.ndarray:
    """Raster-order non-overlapping P x P patches, each flattened row-major."""
    H, W = frame.shape
    if H % P or W % P:
        raise ConfigError(f"frame {H}x{W} not divisible into {P}px patches")
    return frame.reshape(H // P, P, W // P, P).transpose(0, 2, 1, 3).reshape(-1, P * P)


def _patchify_batch(frames: Tensor, P: int) -> Tensor:
    F, H, W = frames.shape
    x = T.reshape(frames, (F, H // P, P, W // P, P))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (F, (H // P) * (W // P), P * P))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 101])
        self.patch_embed = Linear(cfg.P * cfg.P, cfg.D, rng)
        self.cls_token = param(trunc_normal(rng, (cfg.D,)))
        self.pos_embed = param(trunc_normal(rng, (1 + cfg.N, cfg.D)))
        # additive embedding on the [CLS] position, one row per modality
        self.modality_embed = param(trunc_normal(rng, (2, cfg.D)))
        self.layers = [TransformerBlock(cfg.D, cfg.heads, rng) for _ in range(cfg.L)]
        self.ln_post = LayerNorm(cfg.D)
        self.proj = Linear(cfg.D, cfg.d, rng)

    def encode(self, frames, modality) -> Tensor:
        """(F, H, W) frames and per-frame modality ids -> (F, 1+N, D) tokens."""
        frames = T.as_tensor(frames)
        cfg = self.cfg
        if frames.ndim != 3 or frames.shape[1:] != (cfg.H, cfg.W):
            raise ConfigError(f"frames of shape {frames.shape} do not match {cfg.H}x{cfg.W}")
        F = frames.shape[0]
        modality = np.broadcast_to(np.asarray(modality, dtype=np.intp), (F,))
        # pixels in [0, 1] -> roughly zero-mean, unit-scale inputs
        patches = self.patch_embed(_patchify_batch((frames - 0.5) * 4.0, cfg.P))
        cls = T.reshape(self.cls_token + T.take(self.modality_embed, modality, axis=0), (F, 1, cfg.D))
        x = T.concat([cls, patches], axis=1) + self.pos_embed
        for layer in self.layers:
            x = layer(x)
        return self.ln_post(x)

    def encode_frame(self, frame, modality: int = 0):
        tokens = self.encode(T.reshape(T.as_tensor(frame), (1, self.cfg.H, self.cfg.W)), [modality])
        tokens = T.reshape(tokens, (1 + self.cfg.N, self.cfg.D))
        return T.slice_axis(tokens, 0, 0, 1).reshape(self.cfg.D), T.slice_axis(tokens, 0, 1, 1 + self.cfg.N)

    def project(self, cls) -> Tensor:
        return self.proj(cls)


def tap(frame_embeddings, axis: int = 0) -> Tensor:
    """Temporal average pooling over the frame axis."""
    return T.mean(frame_embeddings, axis=axis)

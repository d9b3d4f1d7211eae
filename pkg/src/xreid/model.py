"""Encoder + interaction blocks + classifier, and the composite training objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cpc import PrototypeMemory, cpcl_loss
from .encoder import Encoder, EncoderConfig, tap
from .losses import id_loss, triplet_loss
from .mii import MII, MIIOutputs, cmcl_loss
from .nn import Module, param, trunc_normal
from .synthdata import IR, VIS, VideoClip
from .tensor import Tensor

LOSS_NAMES = ("l_cpcl", "l_tri", "l_ce", "l_cmcl")


@dataclass
class Toggles:
    cpc: bool = True
    mii: bool = True
    sii: bool = True
    lii: bool = True
    cii: bool = True
    tri: bool = True
    ce: bool = True

    @property
    def fused(self) -> bool:
        return self.mii and (self.sii or self.lii)


@dataclass
class Forward:
    b: Tensor            # (B, d) unit sequence embeddings
    b_raw: Tensor        # (B, d) temporal average of projected [CLS] tokens
    feature: Tensor      # (B, d or d+D) unit inference feature
    train_feature: Tensor  # what triplet / CE see; feature is its direction
    cls: Tensor          # (B, T, D)
    patches: Tensor      # (B, T, N, D)
    mii: MIIOutputs | None


def cross_partners(identities, modalities, clip_ids) -> np.ndarray:
    """For every clip, the same-identity other-modality clip with the lowest clip id."""
    ids, mods, cids = map(np.asarray, (identities, modalities, clip_ids))
    out = np.empty(len(ids), dtype=np.intp)
    for i in range(len(ids)):
        cand = np.flatnonzero((ids == ids[i]) & (mods != mods[i]))
        if cand.size == 0:
            raise ValueError(f"clip {cids[i]} (identity {ids[i]}) has no cross-modality partner in batch")
        out[i] = cand[np.argmin(cids[cand])]
    return out


class XReID(Module):
    def __init__(self, enc_cfg: EncoderConfig, n_ids: int, toggles: Toggles | None = None,
                 sii_stride: int = 1, lii_stride: int = 2):
        self.enc_cfg = enc_cfg
        self.n_ids = n_ids
        self.toggles = toggles or Toggles()
        self.sii_stride = sii_stride
        self.lii_stride = lii_stride
        self.encoder = Encoder(enc_cfg)
        self.mii = MII(enc_cfg.D, enc_cfg.heads, np.random.default_rng([enc_cfg.seed, 202]))
        self.classifier = param(trunc_normal(np.random.default_rng([enc_cfg.seed, 303]),
                                             (self.feature_dim, n_ids), std=0.02))

    @property
    def feature_dim(self) -> int:
        return self.enc_cfg.d + (self.enc_cfg.D if self.toggles.fused else 0)

    def forward(self, frames: np.ndarray, modalities) -> Forward:
        """frames: (B, T, H, W); modalities: (B,)."""
        B, Tn, H, W = frames.shape
        cfg = self.enc_cfg
        mods = np.repeat(np.asarray(modalities, dtype=np.intp), Tn)
        tokens = T.reshape(self.encoder.encode(frames.reshape(B * Tn, H, W), mods), (B, Tn, 1 + cfg.N, cfg.D))
        cls = T.reshape(T.slice_axis(tokens, 2, 0, 1), (B, Tn, cfg.D))
        patches = T.slice_axis(tokens, 2, 1, 1 + cfg.N)
        b_raw = tap(self.encoder.project(cls), axis=1)
        b = T.l2_normalize(b_raw, axis=-1)
        out = None
        raw = b_raw
        if self.toggles.mii:
            out = self.mii(cls, patches, self.toggles.sii, self.toggles.lii, self.sii_stride, self.lii_stride)
            if out.o is not None:
                raw = T.concat([b_raw, out.o], axis=-1)
        # losses see the raw concatenation; retrieval uses its direction
        feature = T.l2_normalize(raw, axis=-1)
        return Forward(b, b_raw, feature, raw, cls, patches, out)

    def cmcl(self, fw: Forward, identities, modalities, clip_ids) -> Tensor:
        """Average of the per-modality constraint terms over every enabled branch."""
        partners = cross_partners(identities, modalities, clip_ids)
        other = T.take(fw.patches, partners, axis=0)
        branches = [o for o in (fw.mii.o_sii, fw.mii.o_lii) if o is not None] if fw.mii else []
        if not branches:
            branches = [fw.cls]
        mods = np.asarray(modalities)
        terms = []
        for seq in branches:
            before = T.mean(seq, axis=1)
            after = self.mii.interact(before, other)
            for m in (VIS, IR):
                rows = np.flatnonzero(mods == m)
                terms.append(cmcl_loss([(T.take(before, rows, 0), T.take(after, rows, 0))]))
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total * (1.0 / len(terms))

    def losses(self, clips: list[VideoClip], memories: dict[str, PrototypeMemory] | None,
               tau: float = 1.0, margin: float = 0.3):
        """Composite objective and its components; disabled terms contribute exactly 0."""
        frames = np.stack([c.frames for c in clips])
        ids = np.array([c.identity for c in clips])
        mods = np.array([c.modality for c in clips])
        cids = np.array([c.clip_id for c in clips])
        fw = self.forward(frames, mods)
        terms: dict[str, Tensor | None] = dict.fromkeys(LOSS_NAMES)
        if self.toggles.cpc:
            terms["l_cpcl"] = cpcl_loss(fw.b, ids, memories["vis"], memories["ir"], tau)
        if self.toggles.tri:
            terms["l_tri"] = triplet_loss(fw.train_feature, ids, margin)
        if self.toggles.ce:
            terms["l_ce"] = id_loss(fw.train_feature, self.classifier, ids)
        if self.toggles.mii and self.toggles.cii:
            terms["l_cmcl"] = self.cmcl(fw, ids, mods, cids)
        total = None
        for t in terms.values():
            if t is not None:
                total = t if total is None else total + t
        if total is None:
            raise ValueError("every loss component is disabled")
        report = {k: (0.0 if v is None else float(v.data)) for k, v in terms.items()}
        report["l_total"] = float(total.data)
        return total, report, fw

    def embed(self, clips: list[VideoClip], batch: int = 32) -> np.ndarray:
        """Inference embeddings; the cross-modality block is never run here."""
        out = []
        with T.no_grad():
            for i in range(0, len(clips), batch):
                chunk = clips[i:i + batch]
                fw = self.forward(np.stack([c.frames for c in chunk]), [c.modality for c in chunk])
                out.append(fw.feature.data)
        return np.concatenate(out, axis=0)

    def sequence_embeddings(self, clips: list[VideoClip], batch: int = 32) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(clips), batch):
                chunk = clips[i:i + batch]
                cfg = self.enc_cfg
                frames = np.stack([c.frames for c in chunk])
                B, Tn = frames.shape[:2]
                mods = np.repeat([c.modality for c in chunk], Tn)
                tokens = self.encoder.encode(frames.reshape(B * Tn, cfg.H, cfg.W), mods)
                v = self.encoder.project(T.slice_axis(tokens, 1, 0, 1).reshape(B, Tn, cfg.D))
                out.append(T.l2_normalize(tap(v, axis=1), axis=-1).data)
        return np.concatenate(out, axis=0)

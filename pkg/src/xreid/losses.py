"""Batch-hard triplet loss and identity cross-entropy."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

_BIG = 1e9


def pairwise_distances(features) -> Tensor:
    f = T.as_tensor(features)
    B, d = f.shape
    diff = T.reshape(f, (B, 1, d)) - T.reshape(f, (1, B, d))
    return T.sqrt(T.clamp_min(T.tsum(diff * diff, axis=-1), 1e-12))


def triplet_loss(features, identities, margin: float = 0.3, reduce: bool = True) -> Tensor:
    """Batch-hard triplet loss with modality-agnostic positive/negative pools.

    Per anchor: hardest positive is the farthest other same-identity sample,
    hardest negative the nearest different-identity sample.
    """
    ids = np.asarray(identities)
    same = ids[:, None] == ids[None, :]
    pos = same & ~np.eye(len(ids), dtype=bool)
    if not pos.any(axis=1).all():
        lonely = sorted(set(ids[~pos.any(axis=1)].tolist()))
        raise ValueError(f"identities {lonely} have a single sample; batch-hard needs positives")
    if not (~same).any(axis=1).all():
        raise ValueError("batch-hard triplet needs at least two identities")
    dist = pairwise_distances(features)
    hardest_pos = T.tmax(dist + np.where(pos, 0.0, -_BIG), axis=1)
    hardest_neg = T.tmin(dist + np.where(same, _BIG, 0.0), axis=1)
    per_anchor = T.relu(hardest_pos - hardest_neg + margin)
    return T.mean(per_anchor) if reduce else per_anchor


def id_loss(features, classifier, identities) -> Tensor:
    return T.cross_entropy_logits(T.matmul(features, classifier), identities)

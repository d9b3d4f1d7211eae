"""Per-modality identity prototype memories and the cross-modal collaboration loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .synthdata import IR, VIS
from .tensor import Tensor


class MemoryInitError(ValueError):
    pass


class SelectionError(LookupError):
    pass


def _unit(v: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    return v / np.maximum(n, eps)


@dataclass
class PrototypeMemory:
    """One unit-norm prototype per identity. Plain arrays: never part of a gradient tape."""

    modality: int
    entries: np.ndarray  # (Y, d)
    momentum: float = 0.2

    @property
    def n_ids(self) -> int:
        return self.entries.shape[0]


def init_memory(embeddings: np.ndarray, identities, n_ids: int, modality: int,
                momentum: float = 0.2) -> PrototypeMemory:
    """Prototype = normalized mean of the (unit) sequence embeddings of each identity."""
    emb = _unit(np.asarray(embeddings, dtype=np.float64))
    ids = np.asarray(identities)
    missing = [y for y in range(n_ids) if not np.any(ids == y)]
    if missing:
        raise MemoryInitError(f"no {'VIS' if modality == VIS else 'IR'} clips for identities {missing}")
    entries = np.stack([emb[ids == y].mean(axis=0) for y in range(n_ids)])
    return PrototypeMemory(modality, _unit(entries), momentum)


def select_hard_cross(memory: PrototypeMemory, features: np.ndarray, identities, modalities,
                      y: int, same_modality: bool = False) -> tuple[int, np.ndarray]:
    """Lowest-cosine sample of identity ``y`` from the other modality (or the same one).

    Returns (batch index, feature). Ties go to the lowest index.
    """
    ids = np.asarray(identities)
    mods = np.asarray(modalities)
    wanted = memory.modality if same_modality else 1 - memory.modality
    cand = np.flatnonzero((ids == y) & (mods == wanted))
    if cand.size == 0:
        raise SelectionError(f"no modality-{wanted} sample of identity {y} in batch")
    sims = _unit(features[cand]) @ memory.entries[y]
    i = int(cand[np.argmin(sims)])
    return i, features[i]


def momentum_update(memory: PrototypeMemory, y: int, b_star: np.ndarray, renormalize: bool = True) -> np.ndarray:
    entry = memory.momentum * memory.entries[y] + (1.0 - memory.momentum) * np.asarray(b_star, dtype=np.float64)
    if renormalize:
        entry = _unit(entry)
    memory.entries[y] = entry
    return entry


def update_memories(memories: dict, features: np.ndarray, identities, modalities,
                    same_modality: bool = False) -> None:
    """One cross-modal hard update per identity per memory; identities lacking a partner are skipped."""
    features = _unit(np.asarray(features, dtype=np.float64))
    for mem in memories.values():
        for y in sorted(set(int(i) for i in identities)):
            picks = [False, True] if same_modality else [False]
            for same in picks:
                try:
                    _, b = select_hard_cross(mem, features, identities, modalities, y, same_modality=same)
                except SelectionError:
                    continue
                momentum_update(mem, y, b)


def cpcl_loss(b, identities, mem_vis: PrototypeMemory, mem_ir: PrototypeMemory, tau: float = 1.0) -> Tensor:
    """Softmax contrast of every sample against both memories' in-batch prototypes.

    The denominator spans the P identities present in the batch. Returns the
    average of the VIS-memory and IR-memory terms, each a mean over samples.
    """
    ids = np.asarray(identities, dtype=np.intp)
    present = np.unique(ids)
    for mem in (mem_vis, mem_ir):
        if present.size and present.max() >= mem.n_ids:
            raise KeyError(f"identities {present[present >= mem.n_ids].tolist()} not in memory of size {mem.n_ids}")
    targets = np.searchsorted(present, ids)
    bn = T.l2_normalize(b, axis=-1)
    terms = []
    for mem in (mem_vis, mem_ir):
        protos = Tensor(mem.entries[present].T.copy())  # (d, P), constant
        terms.append(T.cross_entropy_logits(T.matmul(bn, protos) * (1.0 / tau), targets))
    return (terms[0] + terms[1]) * 0.5


def memory_params(memories: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, mem in memories.items():
        for y in range(mem.n_ids):
            out[f"mem.{name}.{y}"] = mem.entries[y]
    return out


def memories_from_params(params: dict[str, np.ndarray], momentum: float = 0.2) -> dict:
    out = {}
    for name, modality in (("vis", VIS), ("ir", IR)):
        keys = sorted((int(k.rsplit(".", 1)[1]), k) for k in params if k.startswith(f"mem.{name}."))
        if keys:
            out[name] = PrototypeMemory(modality, np.stack([params[k] for _, k in keys]), momentum)
    return out

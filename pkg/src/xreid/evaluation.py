"""Cross-modality retrieval: feature extraction, CMC and mAP."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .synthdata import IR, VIS, VideoClip

PROTOCOLS = {"I2V": (IR, VIS), "V2I": (VIS, IR)}
RANKS = (1, 5, 20)
EVAL_HEADER = ("protocol", "rank1", "rank5", "rank20", "map")


class ProtocolError(ValueError):
    pass


@dataclass
class RetrievalRun:
    query_emb: np.ndarray
    query_ids: np.ndarray
    query_clip_ids: np.ndarray
    gallery_emb: np.ndarray
    gallery_ids: np.ndarray
    gallery_clip_ids: np.ndarray
    protocol: str = "I2V"

    def __post_init__(self):
        overlap = set(self.query_clip_ids.tolist()) & set(self.gallery_clip_ids.tolist())
        if overlap:
            raise ProtocolError(f"clips {sorted(overlap)} appear in both query and gallery")
        missing = sorted(set(self.query_ids.tolist()) - set(self.gallery_ids.tolist()))
        if missing:
            raise ProtocolError(f"query identities {missing} absent from gallery")


@dataclass
class MetricsReport:
    protocol: str
    ranks: dict[int, float]
    mAP: float
    ap: np.ndarray = field(repr=False)

    def row(self) -> dict:
        return {"protocol": self.protocol, "rank1": self.ranks[1], "rank5": self.ranks[5],
                "rank20": self.ranks[20], "map": self.mAP}


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def ranked_matches(run: RetrievalRun) -> np.ndarray:
    """(n_query, n_gallery) boolean relevance in ranked order (cosine distance, ties by clip id)."""
    dist = 1.0 - _unit(run.query_emb) @ _unit(run.gallery_emb).T
    out = np.empty(dist.shape, dtype=bool)
    for i in range(dist.shape[0]):
        order = np.lexsort((run.gallery_clip_ids, dist[i]))
        out[i] = run.gallery_ids[order] == run.query_ids[i]
    return out


def cmc(run: RetrievalRun, ks=RANKS) -> dict[int, float]:
    matches = ranked_matches(run)
    first = matches.argmax(axis=1)
    return {k: float(np.mean(first < k)) for k in ks}


def average_precision(relevant_ranked: np.ndarray) -> float:
    # correctly rounded sums keep the result independent of summation order
    hits = np.flatnonzero(relevant_ranked)
    return math.fsum(np.arange(1, hits.size + 1) / (hits + 1)) / hits.size


def mean_ap(run: RetrievalRun) -> tuple[float, np.ndarray]:
    ap = np.array([average_precision(m) for m in ranked_matches(run)])
    return math.fsum(ap) / ap.size, ap


def build_run(emb: np.ndarray, clips: list[VideoClip], protocol: str) -> RetrievalRun:
    qm, gm = PROTOCOLS[protocol]
    mods = np.array([c.modality for c in clips])
    ids = np.array([c.identity for c in clips])
    cids = np.array([c.clip_id for c in clips])
    q, g = mods == qm, mods == gm
    return RetrievalRun(emb[q], ids[q], cids[q], emb[g], ids[g], cids[g], protocol)


def evaluate_embeddings(emb: np.ndarray, clips: list[VideoClip]) -> list[MetricsReport]:
    reports = []
    for protocol in PROTOCOLS:
        run = build_run(emb, clips, protocol)
        m, ap = mean_ap(run)
        reports.append(MetricsReport(protocol, cmc(run), m, ap))
    return reports


def extract_features(model, clips: list[VideoClip]) -> np.ndarray:
    """Unit embeddings [sequence feature; fused interaction feature]; CII not involved."""
    return model.embed(clips)


def evaluate(model, clips: list[VideoClip]) -> list[dict]:
    return [r.row() for r in evaluate_embeddings(extract_features(model, clips), clips)]


def modality_gap(emb: np.ndarray, clips: list[VideoClip]) -> float:
    """Mean over identities of the cosine distance between VIS and IR feature centroids."""
    ids = np.array([c.identity for c in clips])
    mods = np.array([c.modality for c in clips])
    gaps = []
    for y in np.unique(ids):
        cv = emb[(ids == y) & (mods == VIS)].mean(axis=0)
        ci = emb[(ids == y) & (mods == IR)].mean(axis=0)
        gaps.append(1.0 - cv @ ci / (np.linalg.norm(cv) * np.linalg.norm(ci)))
    return float(np.mean(gaps))

"""PK batch sampling, the training loop and checkpoint I/O."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, read_arrays, write_arrays
from .cpc import PrototypeMemory, init_memory, memories_from_params, memory_params, update_memories
from .encoder import EncoderConfig
from .model import LOSS_NAMES, Toggles, XReID
from .nn import Adam, lr_at
from .synthdata import IR, VIS, Dataset, VideoClip

log = logging.getLogger(__name__)

STEP_HEADER = ("step", "epoch", "l_total", "l_cpcl", "l_tri", "l_ce", "l_cmcl")


class SamplingError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class BatchSpec:
    P: int = 4
    K: int = 2
    T: int = 4

    @property
    def size(self) -> int:
        return self.P * self.K * 2


@dataclass
class TrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 20
    lr: float = 3e-4
    warmup_frac: float = 0.1
    decay_at: float = 0.75
    seed: int = 0
    mu: float = 0.2
    tau: float = 1.0
    sii_stride: int = 1
    lii_stride: int = 2
    margin: float = 0.3
    P: int = 4
    K: int = 2
    D: int = 64
    d: int = 32
    layers: int = 2
    heads: int = 4
    patch: int = 8
    same_modality_update: bool = False
    eval_every_epoch: bool = True
    toggles: Toggles = field(default_factory=Toggles)

    def disable(self, names) -> TrainConfig:
        for n in names:
            if not hasattr(self.toggles, n):
                raise ValueError(f"unknown component {n!r}")
            setattr(self.toggles, n, False)
        return self


def sample_batch(clips: list[VideoClip], spec: BatchSpec, rng: np.random.Generator) -> list[VideoClip]:
    """P identities without replacement, then K VIS and K IR clips of each."""
    pools: dict[tuple[int, int], list[VideoClip]] = {}
    for c in clips:
        pools.setdefault((c.identity, c.modality), []).append(c)
    ids = sorted({c.identity for c in clips})
    eligible = [y for y in ids if all(len(pools.get((y, m), [])) >= spec.K for m in (VIS, IR))]
    if len(eligible) < spec.P:
        short = [(y, "VIS" if m == VIS else "IR") for y in ids for m in (VIS, IR)
                 if len(pools.get((y, m), [])) < spec.K]
        raise SamplingError(f"only {len(eligible)} identities have {spec.K} clips per modality "
                            f"(need {spec.P}); short: {short}")
    chosen = rng.choice(np.array(eligible), size=spec.P, replace=False)
    batch = []
    for y in chosen:
        for m in (VIS, IR):
            pool = pools[(int(y), m)]
            for j in rng.choice(len(pool), size=spec.K, replace=False):
                batch.append(pool[int(j)])
    return batch


def build_model(cfg: TrainConfig, ds: Dataset) -> XReID:
    enc = EncoderConfig(H=ds.H, W=ds.W, P=cfg.patch, D=cfg.D, d=cfg.d, L=cfg.layers, heads=cfg.heads, seed=cfg.seed)
    return XReID(enc, ds.n_ids, Toggles(**vars(cfg.toggles)), cfg.sii_stride, cfg.lii_stride)


def build_memories(model: XReID, clips: list[VideoClip], n_ids: int, mu: float) -> dict[str, PrototypeMemory]:
    emb = model.sequence_embeddings(clips)
    ids = np.array([c.identity for c in clips])
    mods = np.array([c.modality for c in clips])
    return {name: init_memory(emb[mods == m], ids[mods == m], n_ids, m, mu)
            for name, m in (("vis", VIS), ("ir", IR))}


def _meta(model: XReID, T: int) -> np.ndarray:
    c, t = model.enc_cfg, model.toggles
    return np.array([c.H, c.W, c.P, c.D, c.d, c.L, c.heads, T, model.n_ids,
                     t.cpc, t.mii, t.sii, t.lii, t.cii, t.tri, t.ce, model.sii_stride, model.lii_stride], dtype=float)


def save_checkpoint(path, model: XReID, memories: dict | None, T: int) -> None:
    arrays = {"meta.arch": _meta(model, T)}
    for name, p in model.named_parameters().items():
        arrays[name.replace("encoder.", "enc.", 1) if name.startswith("encoder.") else name] = p.data
    if memories:
        arrays.update(memory_params(memories))
    write_arrays(arrays, path)


def load_checkpoint(path, ds: Dataset | None = None) -> tuple[XReID, dict]:
    arrays = read_arrays(path)
    if "meta.arch" not in arrays:
        raise CheckpointError("checkpoint has no meta.arch record")
    m = arrays["meta.arch"].astype(int).tolist()
    if len(m) != 18:
        raise CheckpointError(f"meta.arch has {len(m)} fields, expected 18")
    H, W, P, D, d, L, heads, T, Y, cpc, mii, sii, lii, cii, tri, ce, s_sii, s_lii = m
    if ds is not None and (ds.H, ds.W, ds.T, ds.n_ids) != (H, W, T, Y):
        raise CheckpointError(f"checkpoint expects {H}x{W} frames, T={T}, Y={Y}; "
                              f"dataset has {ds.H}x{ds.W}, T={ds.T}, Y={ds.n_ids}")
    model = XReID(EncoderConfig(H, W, P, D, d, L, heads), Y,
                  Toggles(*map(bool, (cpc, mii, sii, lii, cii, tri, ce))), s_sii, s_lii)
    for name, p in model.named_parameters().items():
        key = name.replace("encoder.", "enc.", 1) if name.startswith("encoder.") else name
        if key not in arrays:
            raise CheckpointError(f"missing parameter {key}")
        if arrays[key].shape != p.shape:
            raise CheckpointError(f"parameter {key}: checkpoint shape {arrays[key].shape}, model {p.shape}")
        p.data[...] = arrays[key]
    return model, memories_from_params(arrays)


@dataclass
class TrainResult:
    model: XReID
    memories: dict | None
    steps: list[dict]
    epochs: list[dict]


def train(ds: Dataset, cfg: TrainConfig, out_dir=None, evaluate_fn=None) -> TrainResult:
    """Memory init, then per step: sample, forward, losses, Adam step, memory update."""
    train_clips = ds.split("train")
    test_clips = ds.split("test")
    model = build_model(cfg, ds)
    memories = build_memories(model, train_clips, ds.n_ids, cfg.mu) if cfg.toggles.cpc else None
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 404])
    spec = BatchSpec(cfg.P, cfg.K, ds.T)
    total_steps = cfg.epochs * cfg.steps_per_epoch
    steps, epochs = [], []
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            batch = sample_batch(train_clips, spec, rng)
            loss, report, fw = model.losses(batch, memories, cfg.tau, cfg.margin)
            if not math.isfinite(report["l_total"]):
                raise DivergenceError(f"non-finite total loss {report['l_total']} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(step, total_steps, cfg.lr, cfg.warmup_frac, cfg.decay_at))
            if memories is not None:
                update_memories(memories, fw.b.data, [c.identity for c in batch],
                                [c.modality for c in batch], cfg.same_modality_update)
                for mem in memories.values():
                    assert np.allclose(np.linalg.norm(mem.entries, axis=1), 1.0, atol=1e-9)
            steps.append({"step": step, "epoch": epoch, **{k: report[k] for k in ("l_total",) + LOSS_NAMES}})
            step += 1
        if evaluate_fn is not None and (cfg.eval_every_epoch or epoch == cfg.epochs - 1) and test_clips:
            for row in evaluate_fn(model, test_clips):
                epochs.append({"epoch": epoch, **row})
        log.info("epoch %d: l_total=%.4f", epoch, steps[-1]["l_total"] if steps else float("nan"))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "ckpt", model, memories, ds.T)
        write_csv(out / "metrics.csv", STEP_HEADER, steps)
        if epochs:
            write_csv(out / "epoch_metrics.csv", ("epoch", "protocol", "rank1", "rank5", "rank20", "map"), epochs)
    return TrainResult(model, memories, steps, epochs)


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])

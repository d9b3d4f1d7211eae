"""Variant grids: component ablation, interaction-block toggles and stride sweeps."""
from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np

from .evaluation import evaluate_embeddings, extract_features, modality_gap
from .model import Toggles
from .synthdata import Dataset
from .trainer import TrainConfig, train, write_csv

log = logging.getLogger(__name__)

ABLATE_HEADER = ("variant", "protocol", "rank1", "rank5", "rank20", "map", "seed")
SEEDS = (1, 2, 3)

# benchmark recipe for the grids: short enough that 64 training clips are not
# memorized long before the end, sharp prototype softmax
BASE_CONFIG = TrainConfig(epochs=10, steps_per_epoch=30, lr=1e-3, tau=0.05)


def _toggle_name(sii: bool, lii: bool, cii: bool) -> str:
    on = [n for n, v in (("sii", sii), ("lii", lii), ("cii", cii)) if v]
    return "+".join(on) if on else "none"


# row order follows the usual presentation: singles, pairs with cii, then sii+lii
_TOGGLE_ROWS = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 0), (1, 1, 1)]


def grid_variants(grid: str) -> list[tuple[str, dict]]:
    """(variant name, TrainConfig overrides) for each row of a grid."""
    if grid == "components":
        return [("baseline", {"toggles": Toggles(cpc=False, mii=False)}),
                ("+cpc", {"toggles": Toggles(mii=False)}),
                ("+cpc+mii", {"toggles": Toggles()})]
    if grid == "toggles":
        # built on top of CPC, so the all-off row is the +cpc model
        return [(_toggle_name(*map(bool, r)), {"toggles": Toggles(sii=bool(r[0]), lii=bool(r[1]), cii=bool(r[2]))})
                for r in _TOGGLE_ROWS]
    if grid == "sii_stride":
        return [(f"S={s}", {"sii_stride": s}) for s in range(1, 5)]
    if grid == "lii_stride":
        return [(f"S={s}", {"lii_stride": s}) for s in range(0, 5)]
    raise ValueError(f"unknown grid {grid!r}; expected one of {GRIDS}")


GRIDS = ("components", "toggles", "sii_stride", "lii_stride")


def _key(cfg: TrainConfig):
    d = dataclasses.asdict(cfg)
    t = d["toggles"]
    # MII with every block off trains the same model as MII off
    if not (t["sii"] or t["lii"] or t["cii"]):
        t["mii"] = False
    if not t["mii"]:
        t.update(sii=False, lii=False, cii=False)
    d["toggles"] = tuple(sorted(t.items()))
    d.pop("eval_every_epoch")
    return tuple(sorted(d.items()))


class Runner:
    """Trains and evaluates configs, reusing results for configs seen before.

    Besides the retrieval metrics it keeps the test-set modality gap of each run.
    """

    def __init__(self, ds: Dataset):
        self.ds = ds
        self.cache: dict = {}
        self.gaps: dict = {}
        self.n_trained = 0

    def _run(self, cfg: TrainConfig):
        k = _key(cfg)
        if k not in self.cache:
            res = train(self.ds, cfg)
            test = self.ds.split("test")
            emb = extract_features(res.model, test)
            self.cache[k] = [r.row() for r in evaluate_embeddings(emb, test)]
            self.gaps[k] = modality_gap(emb, test)
            self.n_trained += 1
        return k

    def metrics(self, cfg: TrainConfig) -> list[dict]:
        return self.cache[self._run(cfg)]

    def gap(self, cfg: TrainConfig) -> float:
        return self.gaps[self._run(cfg)]


def run_grid(runner: Runner, grid: str, base: TrainConfig, seeds=SEEDS) -> list[dict]:
    rows = []
    for name, over in grid_variants(grid):
        for seed in seeds:
            cfg = dataclasses.replace(base, seed=seed, eval_every_epoch=False, **over)
            log.info("grid %s variant %s seed %d", grid, name, seed)
            for m in runner.metrics(cfg):
                rows.append({"variant": name, **m, "seed": seed})
    return rows


def mean_map(rows: list[dict]) -> dict[tuple[str, str], float]:
    """(variant, protocol) -> mAP averaged over seeds."""
    acc: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        acc.setdefault((r["variant"], r["protocol"]), []).append(r["map"])
    return {k: float(np.mean(v)) for k, v in acc.items()}


def ablate(ds: Dataset, base: TrainConfig, out_dir, grids=GRIDS, seeds=SEEDS, figures: bool = True) -> dict[str, list[dict]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner = Runner(ds)
    results = {}
    for g in grids:
        rows = run_grid(runner, g, base, seeds)
        write_csv(out / f"{g}.csv", ABLATE_HEADER, rows)
        if figures:
            from .plotting import plot_grid
            plot_grid(rows, g, out / f"{g}.png")
        results[g] = rows
    return results

"""Command line entry point: gen | train | eval | ablate | gradcheck."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from . import ablation
from .evaluation import EVAL_HEADER, evaluate
from .synthdata import SynthConfig, generate, read_dataset, write_dataset
from .trainer import TrainConfig, load_checkpoint, train, write_csv

COMPONENTS = ("cpc", "mii", "sii", "lii", "cii", "tri", "ce")


def _train_flags(p: argparse.ArgumentParser, defaults: TrainConfig) -> None:
    p.set_defaults(base_config=defaults)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--steps-per-epoch", type=int, default=defaults.steps_per_epoch)
    p.add_argument("--p", type=int, default=defaults.P, help="identities per batch")
    p.add_argument("--k", type=int, default=defaults.K, help="clips per identity and modality")
    p.add_argument("--t", type=int, default=None, help="frames per clip (must match the dataset)")
    p.add_argument("--mu", type=float, default=defaults.mu, help="memory momentum")
    p.add_argument("--tau", type=float, default=defaults.tau, help="prototype softmax temperature")
    p.add_argument("--stride", type=int, default=None, help="set both interaction strides")
    p.add_argument("--sii-stride", type=int, default=defaults.sii_stride)
    p.add_argument("--lii-stride", type=int, default=defaults.lii_stride)
    p.add_argument("--margin", type=float, default=defaults.margin)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--disable", nargs="+", choices=COMPONENTS, default=[], metavar="COMPONENT", help="any of " + ", ".join(COMPONENTS))


def _config(a: argparse.Namespace) -> TrainConfig:
    # fields without a flag keep the subcommand's defaults
    cfg = dataclasses.replace(a.base_config, epochs=a.epochs, steps_per_epoch=a.steps_per_epoch, lr=a.lr,
                              seed=a.seed, mu=a.mu, tau=a.tau, sii_stride=a.sii_stride, lii_stride=a.lii_stride,
                              margin=a.margin, P=a.p, K=a.k, toggles=dataclasses.replace(a.base_config.toggles))
    if a.stride is not None:
        cfg.sii_stride = cfg.lii_stride = a.stride
    return cfg.disable(a.disable)


def _load_data(a):
    ds = read_dataset(a.data)
    if getattr(a, "t", None) is not None and a.t != ds.T:
        raise ValueError(f"--t {a.t} does not match dataset T={ds.T}")
    return ds


def cmd_gen(a) -> int:
    cfg = SynthConfig(n_ids=a.ids, clips_per_modality=a.clips, T=a.t, H=a.height, W=a.width, gap=a.gap,
                      jitter=a.jitter, noise=a.noise, p_occ=a.occlusion, seed=a.seed)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(generate(cfg), a.out)
    return 0


def cmd_train(a) -> int:
    ds = _load_data(a)
    cfg = _config(a)
    train(ds, cfg, out_dir=a.out, evaluate_fn=evaluate)
    return 0


def _emit(rows, header, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(out, header, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{r[h]:.6f}" if isinstance(r[h], float) else r[h] for h in header])


def cmd_eval(a) -> int:
    ds = _load_data(a)
    model, _ = load_checkpoint(a.ckpt, ds)
    _emit(evaluate(model, ds.split(a.split)), EVAL_HEADER, a.out)
    return 0


def cmd_ablate(a) -> int:
    ds = _load_data(a)
    base = _config(a)
    seeds = tuple(int(s) for s in a.seeds.split(","))
    ablation.ablate(ds, base, a.out, grids=a.grids, seeds=seeds, figures=not a.no_figures)
    return 0


def cmd_gradcheck(a) -> int:
    from .gradsuite import timed_suite
    rows, secs = timed_suite(h=a.h, tol=a.tol)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("check", "max_rel_err", "passed"))
    for name, err, ok in rows:
        w.writerow((name, f"{err:.6e}", int(ok)))
    print(f"# {sum(ok for *_, ok in rows)}/{len(rows)} passed in {secs:.1f}s", file=sys.stderr)
    return 0 if all(ok for *_, ok in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xreid", description="Cross-modality video re-identification on synthetic data")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a synthetic two-modality dataset")
    s = SynthConfig()
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=s.seed)
    g.add_argument("--ids", type=int, default=s.n_ids)
    g.add_argument("--clips", type=int, default=s.clips_per_modality, help="clips per identity and modality")
    g.add_argument("--t", type=int, default=s.T)
    g.add_argument("--height", type=int, default=s.H)
    g.add_argument("--width", type=int, default=s.W)
    g.add_argument("--gap", type=float, default=s.gap, help="modality gap in [0, 1]")
    g.add_argument("--jitter", type=float, default=s.jitter)
    g.add_argument("--noise", type=float, default=s.noise)
    g.add_argument("--occlusion", type=float, default=s.p_occ)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model and write ckpt + metrics.csv")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _train_flags(t, TrainConfig())
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="I2V / V2I retrieval metrics as CSV")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.add_argument("--out", default=None, help="CSV path (default: stdout)")
    e.set_defaults(fn=cmd_eval)

    ab = sub.add_parser("ablate", help="train/evaluate the variant grids; one CSV and one PNG per grid")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--grids", nargs="+", choices=ablation.GRIDS, default=list(ablation.GRIDS))
    ab.add_argument("--seeds", default=",".join(map(str, ablation.SEEDS)))
    ab.add_argument("--no-figures", action="store_true")
    _train_flags(ab, ablation.BASE_CONFIG)
    ab.set_defaults(fn=cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference checks of every op and block")
    gc.add_argument("--h", type=float, default=1e-6)
    gc.add_argument("--tol", type=float, default=1e-5)
    gc.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.fn(a)
    except Exception as exc:  # report, don't dump a traceback at the user
        if a.verbose:
            raise
        print(f"xreid {a.cmd}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

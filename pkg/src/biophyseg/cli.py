"""Command line entry point: ``biophyseg <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import gradcheck, growth, metrics, synth, trainer, volio
from .fields import Field3D

log = logging.getLogger("biophyseg")


def _load_config(path):
    return json.loads(Path(path).read_text()) if path else {}


def _train_config(args) -> trainer.TrainConfig:
    d = _load_config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.lambda1 is not None:
        d["lambda1"] = args.lambda1
    if args.lambda2 is not None:
        d["lambda2"] = args.lambda2
    if args.activation:
        d["activation"] = args.activation
    if args.no_bc:
        d["use_bc"] = False
    if args.no_pde:
        d["use_pde"] = False
    if args.train_size is not None:
        d["train_size"] = args.train_size
    if args.drop_channels:
        d["drop_channels"] = [int(c) for c in args.drop_channels.split(",") if c]
    if getattr(args, "steps", None) is not None:
        d["steps"] = args.steps
    if getattr(args, "data", None):
        d["dataset"] = args.data
    return trainer.TrainConfig.from_dict(d)


def cmd_simulate(args):
    cfg = {"dims": [16, 16, 16], "d": 0.5, "rho": 0.1, "dt": 0.02, "steps": 500,
           "snapshot_every": 100, "u0": "gaussian", "sigma": 2.0, "amplitude": 0.8}
    cfg.update(_load_config(args.config))
    dims = tuple(cfg["dims"])
    if cfg["u0"] == "gaussian":
        centre = [(n - 1) / 2 for n in dims]
        u0 = growth.gaussian_bump(dims, centre, cfg["sigma"], cfg["amplitude"])
    else:
        u0 = np.full(dims, float(cfg["u0"]))
    params = growth.GrowthParams.uniform(dims, cfg["d"], cfg["rho"], cfg["dt"], cfg["steps"],
                                         cfg["snapshot_every"])
    res = growth.simulate(Field3D(u0), params)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "snapshots.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "time", "mean", "mass", "max"])
        for i, (t, f) in enumerate(res.snapshots):
            volio.write_volume(out / f"snapshot_{i:04d}.bpv", f.data, f.spacing, time=t)
            w.writerow([i, repr(t), repr(float(f.data.mean())), repr(float(f.data.sum())),
                        repr(float(f.data.max()))])
    print(f"wrote {len(res.snapshots)} snapshots to {out}")
    return 0


def cmd_gen_data(args):
    cfg = {"n_cases": 20, "dims": [32, 32, 32], "base_seed": 0, "noise": 0.1}
    cfg.update(_load_config(args.config))
    if args.seed is not None:
        cfg["base_seed"] = args.seed
    if args.n_cases is not None:
        cfg["n_cases"] = args.n_cases
    manifest = trainer.build_dataset(args.out_dir, cfg["n_cases"], cfg["base_seed"],
                                     tuple(cfg["dims"]), noise=cfg["noise"])
    print(json.dumps({k: len(v) for k, v in manifest["splits"].items()}))
    return 0


def cmd_train(args):
    cfg = _train_config(args)
    if not cfg.dataset:
        print("train: --data (or 'dataset' in the config) is required", file=sys.stderr)
        return 2
    _, cases = trainer.load_split(cfg.dataset, "train", cfg.train_size)
    result = trainer.train(cfg, cases)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(out / "checkpoint.bpv")
    (out / "losses.csv").write_text(result.loss_csv())
    last = result.rows[-1]
    print(f"step {last['step']} total {last['total']:.6f} dice {last['dice']:.6f}")
    return 0


def cmd_eval(args):
    ckpt = trainer.Checkpoint.load(args.checkpoint)
    data = args.data or ckpt.config.dataset
    ids, cases = trainer.load_split(data, args.split)
    rows = trainer.evaluate(ckpt, cases, ids)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_csv(out / "metrics.csv", rows + metrics.summarise(rows))
    excluded = metrics.excluded_count(rows)
    print(f"mean dice {trainer.mean_dice(rows):.4f}; hd95 excluded for {excluded} region(s)")
    return 0


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    results = gradcheck.run_suite(seed)
    worst = 0.0
    for name, err in results.items():
        print(f"{name:<28s} max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"overall max relative error {worst:.3e}")
    return 0 if worst < gradcheck.TOLERANCE else 1


def cmd_export_slice(args):
    vol, _ = volio.read_volume(args.volume)
    volio.export_slice(vol, args.output, args.channel, args.index)
    print(f"wrote {args.output}")
    return 0


def cmd_ablate(args):
    cfg = _train_config(args)
    data = cfg.dataset
    if not data:
        print("ablate: --data is required", file=sys.stderr)
        return 2
    _, pool = trainer.load_split(data, "train")
    _, test = trainer.load_split(data, "test")
    sizes = [int(s) for s in args.sizes.split(",")]
    seeds = range(args.seeds)
    rows = trainer.ablate(cfg, pool, test, sizes, seeds,
                          progress=lambda r: print(json.dumps(r), flush=True))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["train_size", "variant", "seed", "mean_dice"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    with open(out / "ablation_summary.csv", "w", newline="") as fh:
        summary = trainer.summarise_ablation(rows)
        w = csv.DictWriter(fh, list(summary[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biophyseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out-dir", default=".")
        return sp

    def training_flags(sp):
        sp.add_argument("--data", help="dataset directory written by gen-data")
        sp.add_argument("--lambda1", type=float)
        sp.add_argument("--lambda2", type=float)
        sp.add_argument("--activation", choices=["sine", "relu"])
        sp.add_argument("--no-bc", action="store_true")
        sp.add_argument("--no-pde", action="store_true")
        sp.add_argument("--train-size", type=int)
        sp.add_argument("--drop-channels", help="comma separated channel indices")
        sp.add_argument("--steps", type=int)

    common(sub.add_parser("simulate", help="forward growth run")).set_defaults(fn=cmd_simulate)
    sp = common(sub.add_parser("gen-data", help="build a synthetic dataset"))
    sp.add_argument("--n-cases", type=int)
    sp.set_defaults(fn=cmd_gen_data)
    sp = common(sub.add_parser("train", help="train the segmentation model"))
    training_flags(sp)
    sp.set_defaults(fn=cmd_train)
    sp = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--split", default="test")
    sp.set_defaults(fn=cmd_eval)
    sp = common(sub.add_parser("gradcheck", help="run the gradient suites"), out=False)
    sp.set_defaults(fn=cmd_gradcheck)
    sp = sub.add_parser("export-slice", help="axial slice of a volume as PGM")
    sp.add_argument("volume")
    sp.add_argument("output")
    sp.add_argument("--channel", type=int, default=0)
    sp.add_argument("--index", type=int)
    sp.set_defaults(fn=cmd_export_slice)
    sp = common(sub.add_parser("ablate", help="activation/BC/data-size sweeps"))
    training_flags(sp)
    sp.add_argument("--sizes", default="2,4,8")
    sp.add_argument("--seeds", type=int, default=5)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

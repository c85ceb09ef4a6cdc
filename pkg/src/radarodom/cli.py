"""Command line entry point: ``radarodom {synth,train,infer,eval,plot}``.

Exit codes: 0 success, 2 bad input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .dataio import DataError, SynthConfig, load_sequence, synth_generate, write_sequence, tomllib
from .geom import PoseError, read_kitti, write_kitti
from .gradcheck import NonFiniteError
from .harness import NumericError, TrainConfig, evaluate, infer_sequence, train, zero_motion
from .icp import icp_baseline
from .model import OdometryNet
from .params import CheckpointError
from .plot import plot_emit

BAD_INPUT = 2
NUMERIC = 3


def read_config(path):
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def train_config(raw, seed=None):
    d = dict(raw.get("train", {}))
    if "model" in raw:
        d["model"] = raw["model"]
    cfg = TrainConfig.from_dict(d)
    return cfg if seed is None else replace(cfg, seed=seed)


def _gt_at_origin(seq):
    traj = seq.trajectory()
    return traj.transformed(traj.poses[0].inverse())


def cmd_synth(args):
    raw = read_config(args.config).get("synth", {})
    known = {f.name for f in fields(SynthConfig)}
    count = int(raw.pop("count", args.count))
    profiles = raw.pop("profiles", None) or [args.profile]
    fmt = raw.pop("format", args.format)
    bad = set(raw) - known
    if bad:
        raise DataError(f"unknown synth keys: {sorted(bad)}")
    base = SynthConfig(**raw)
    if args.frames:
        base = replace(base, n_frames=args.frames)
    seed = base.seed if args.seed is None else args.seed
    out = Path(args.out)
    for i in range(count):
        cfg = replace(base, seed=seed + i, profile=profiles[i % len(profiles)])
        if args.noiseless:
            cfg = cfg.noiseless()
        seq_id = f"{args.prefix}{i:02d}"
        path = write_sequence(synth_generate(cfg, seq_id), out / seq_id, fmt)
        print(path)
    return 0


def cmd_train(args):
    cfg = train_config(read_config(args.config), args.seed)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    seqs = [load_sequence(s) for s in args.sequence]
    train(cfg, seqs, out_dir=args.out, log=print)
    print(Path(args.out) / "model.ckpt")
    return 0


def cmd_infer(args):
    net = OdometryNet.from_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in args.sequence:
        seq = load_sequence(s)
        res = infer_sequence(net, seq.frames, seq.fov_deg, seq.height)
        write_kitti(out / f"{seq.seq_id}.txt", res.trajectory)
        meta = {"seq": seq.seq_id, "ms_per_pair": res.ms_per_pair,
                "skipped_pairs": [i for i, f in enumerate(res.trajectory.flags) if f]}
        (out / f"{seq.seq_id}.json").write_text(json.dumps(meta, indent=2))
        print(f"{seq.seq_id}: {len(seq)} poses, {res.ms_per_pair:.1f} ms/pair")
    return 0


def _predictions(args, seqs):
    preds, ms = {}, {}
    if args.baseline == "icp":
        for s in seqs:
            preds[s.seq_id] = icp_baseline(s.frames)
    elif args.baseline == "zero":
        for s in seqs:
            preds[s.seq_id] = zero_motion(s.frames)
    elif args.checkpoint:
        net = OdometryNet.from_checkpoint(args.checkpoint)
        for s in seqs:
            res = infer_sequence(net, s.frames, s.fov_deg, s.height)
            preds[s.seq_id], ms[s.seq_id] = res.trajectory, res.ms_per_pair
    elif args.pred:
        pdir = Path(args.pred)
        for s in seqs:
            f = pdir / f"{s.seq_id}.txt" if pdir.is_dir() else pdir
            preds[s.seq_id] = read_kitti(f)
    else:
        raise DataError("need one of --pred, --checkpoint or --baseline")
    return preds, ms


def cmd_eval(args):
    seqs = [load_sequence(s) for s in args.sequence]
    gt = {s.seq_id: _gt_at_origin(s) for s in seqs}
    preds, ms = _predictions(args, seqs)
    report = evaluate(gt, preds, ms_per_pair=ms)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_plot(args):
    seqs = [load_sequence(s) for s in args.sequence]
    gt = {s.seq_id: _gt_at_origin(s) for s in seqs}
    preds, _ = _predictions(args, seqs)
    report = evaluate(gt, preds)
    for s in seqs:
        trajs = {"ground truth": gt[s.seq_id], "estimate": preds[s.seq_id]}
        sub = evaluate({s.seq_id: gt[s.seq_id]}, {s.seq_id: preds[s.seq_id]})
        for p in plot_emit(args.out, trajs, sub, stem=s.seq_id):
            print(p)
    for p in plot_emit(args.out, None, report, stem="all"):
        print(p)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="radarodom", description="4D radar odometry toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seq=True, out=True):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, default=None)
        if out:
            p.add_argument("--out", required=True, help="output directory")
        if seq:
            p.add_argument("--sequence", action="append", required=True,
                           help="sequence directory (repeatable)")

    p = sub.add_parser("synth", help="generate synthetic sequences")
    common(p, seq=False)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--profile", default="mixed", choices=["straight", "turn", "mixed"])
    p.add_argument("--format", default="csv", choices=["csv", "bin"])
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--prefix", default="seq")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on sequences with ground truth")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict trajectories")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_infer)

    for name, func, helptext in (("eval", cmd_eval, "segment errors against ground truth"),
                                 ("plot", cmd_plot, "trajectory SVG and per-length CSV")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--pred", help="KITTI pose file or directory of <seq>.txt files")
        p.add_argument("--baseline", choices=["icp", "zero"])
        p.set_defaults(func=func)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NumericError, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC
    except (DataError, PoseError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())

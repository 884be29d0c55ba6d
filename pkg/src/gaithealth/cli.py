"""Command-line entry point: ``gaithealth <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Every subcommand reads and writes the run-directory layout documented in
``gaithealth.pipeline``. Failures exit nonzero and print one JSON object,
``{"error": <type>, "message": <text>, "command": <subcommand>}``, on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from . import synth_gait as sg


class UsageError(Exception):
    pass


def _config(args) -> pl.PipelineConfig:
    cfg = pl.PipelineConfig.from_json(args.config) if args.config else pl.PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _read(directory) -> list:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest in {directory}")
    return sg.read_dataset(directory)


def _data_dir(args, out: Path) -> Path:
    return Path(args.data) if args.data else out / "data"


def _checkpoint(args, out: Path) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else out / "checkpoints" / "phase1.npz"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def cmd_synth_data(args, cfg, out):
    if args.subjects is None:
        splits = pl.make_datasets(cfg, out)
        return {name: len(seqs) for name, seqs in splits.items()}
    frames = args.frames or cfg.data.frames
    seqs = sg.generate_dataset(args.subjects, cfg.seed, frames=frames, fps=cfg.data.fps, size=tuple(cfg.data.size))
    manifest = sg.write_dataset(seqs, out, master_seed=cfg.seed)
    return {"manifest": str(manifest), "sequences": len(seqs)}


def cmd_train_phase1(args, cfg, out):
    data = _data_dir(args, out)
    train, val = _read(data / "pose_train"), _read(data / "pose_val")
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    res = pl.train_phase1(cfg, train, val, out)
    if val:
        pl.evaluate_model(res.model, val, batch=cfg.eval_batch).write_json(out / "phase1" / "metrics.json")
    return {"checkpoint": str(res.checkpoint), "eval": res.eval_log[-1] if res.eval_log else None}


def cmd_extract_features(args, cfg, out):
    model = pl.load_model(_checkpoint(args, out), cfg)
    seqs = _read(_data_dir(args, out) / "gait")
    table = pl.extract_features(model, seqs, cfg.pool_factor, cfg.eval_batch)
    path = out / "features" / "features.npz"
    table.save(path)
    return {"features": str(path), "rows": len(table.ids), "dim": int(table.features.shape[1])}


def cmd_train_phase2(args, cfg, out):
    path = Path(args.features) if args.features else out / "features" / "features.npz"
    if not path.exists():
        raise FileNotFoundError(f"feature table not found: {path}")
    table = pl.FeatureTable.load(path)
    res = pl.train_phase2(table, pl.make_folds(table.ids, cfg.folds, cfg.seed), cfg.svr)
    dest = out / "phase2" / "report.json"
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(json.dumps(res.to_dict(), indent=2))
    return {"report": str(dest), "indicator_errors": res.report.indicator_errors}


def cmd_evaluate(args, cfg, out):
    model = pl.load_model(_checkpoint(args, out), cfg)
    seqs = _read(_data_dir(args, out) / args.split)
    rep = pl.evaluate_model(model, seqs, batch=cfg.eval_batch)
    rep.write_json(out / "eval" / "metrics.json")
    rep.write_frame_csv(out / "eval" / "per_frame.csv")
    return {"aggregate": rep.aggregate}


def cmd_ablate(args, cfg, out):
    data = Path(args.data) if args.data else None
    splits = {name: _read(data / name) for name in ("pose_train", "pose_val", "gait")} if data else None
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    tables = pl.ablate(cfg, splits, out)
    return {"table": str(out / "ablation" / "ablation.md"), "pose": tables["pose"]}


def cmd_report(args, cfg, out):
    run = Path(args.run) if args.run else out
    if not run.is_dir():
        raise FileNotFoundError(f"run directory not found: {run}")
    bundle = pl.report(run, out / "report")
    return {"bundle": str(out / "report" / "bundle.json"), "metric_reports": len(bundle["metric_reports"])}


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-phase1": cmd_train_phase1,
    "extract-features": cmd_extract_features,
    "train-phase2": cmd_train_phase2,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps them from
    # overwriting values given before the subcommand name
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="JSON pipeline config")
    p.add_argument("--seed", type=int, default=d(None))
    p.add_argument("--out", default=d("run"), help="run directory (default: ./run)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaithealth", parents=[_global_flags(False)])
    common = _global_flags(True)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth-data", parents=[common], help="generate synthetic gait datasets")
    p.add_argument("--subjects", type=int, help="write one dataset of N subjects to --out")
    p.add_argument("--frames", type=int)
    for name in ("train-phase1", "ablate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--data", help="directory holding pose_train/pose_val/gait datasets")
        p.add_argument("--epochs", type=int)
    for name in ("extract-features", "evaluate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--data")
        p.add_argument("--checkpoint")
    sub.choices["evaluate"].add_argument("--split", default="pose_val")
    sub.add_parser("train-phase2", parents=[common]).add_argument("--features")
    sub.add_parser("report", parents=[common]).add_argument("--run", help="run directory to collate (default: --out)")
    return parser


def _fail(command, exc, code=1) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": command}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code in (0, None):
            return 0
        return _fail(None, UsageError("invalid command line"), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(args.out)
        result = COMMANDS[args.command](args, cfg, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        return _fail(args.command, exc)
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands: gen-data, train, eval, infer, sweep-tau, report. Exit codes:
0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, DataError, DivergenceError, EgomatchError
from . import pipeline, wire, world


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gen = cfg.generator()
    train_set = world.make_dataset(cfg.seed, args.size, cfg.nonoverlap_mix, gen)
    world.save_dataset(out / "train.jsonl", train_set)
    test_set = world.make_dataset(cfg.seed + 1, args.test_size,
                                  cfg.nonoverlap_mix, gen)
    world.save_dataset(out / "test.jsonl", test_set)
    print(f"wrote {len(train_set)} train / {len(test_set)} test instances to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    dataset = world.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.npz"
    try:
        model = pipeline.train(cfg, dataset, seed=cfg.seed, log=print)
    except DivergenceError as exc:
        snap = getattr(exc, "snapshot", None)
        if snap is not None:
            model = pipeline.init_model(cfg)
            pipeline._restore(model, snap)
            pipeline.save_checkpoint(model, ckpt_path)
            print(f"training diverged; last finite checkpoint saved to {ckpt_path}",
                  file=sys.stderr)
        raise
    pipeline.save_checkpoint(model, ckpt_path)
    print(f"checkpoint saved to {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    model = pipeline.load_checkpoint(args.checkpoint)
    dataset = world.load_dataset(args.data)
    report = pipeline.evaluate(model, dataset, tau=args.tau)
    pipeline.write_report(report, args.format, args.out)
    summary = {k: v for k, v in report.to_json().items() if k != "rows"}
    print(json.dumps(summary, indent=2))
    print(f"report written to {args.out}")
    return 0


def _cmd_infer(args) -> int:
    model = pipeline.load_checkpoint(args.checkpoint)
    try:
        ego_bytes = Path(args.ego).read_bytes()
        mate_bytes = Path(args.mate).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read packet: {exc}") from exc
    result = pipeline.infer(model, ego_bytes, mate_bytes)
    text = json.dumps(result)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _cmd_sweep_tau(args) -> int:
    model = pipeline.load_checkpoint(args.checkpoint)
    dataset = world.load_dataset(args.data)
    try:
        taus = [float(t) for t in args.grid.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad tau grid {args.grid!r}: {exc}") from exc
    rows = pipeline.sweep_tau(model, dataset, taus)
    csv_text = pipeline.sweep_to_csv(rows)
    Path(args.out).write_text(csv_text, encoding="utf-8")
    print(csv_text, end="")
    print(f"sweep written to {args.out}")
    return 0


def _cmd_report(args) -> int:
    try:
        obj = json.loads(Path(args.input).read_text(encoding="utf-8"))
        report = pipeline.MetricsReport.from_json(obj)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read report {args.input}: {exc}") from exc
    pipeline.write_report(report, args.format, args.out)
    print(f"report written to {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="egomatch",
        description="Scene-graph correspondence matching, non-overlap "
                    "detection and egocentric relative pose estimation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="key-value config file")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides the config seed")

    sp = sub.add_parser("gen-data", help="generate synthetic train/test datasets")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--size", type=int, default=2000, help="train instances")
    sp.add_argument("--test-size", type=int, default=400, help="test instances")
    sp.set_defaults(func=_cmd_gen_data)

    sp = sub.add_parser("train", help="train both pipeline levels")
    common(sp)
    sp.add_argument("--data", required=True, help="training dataset (.jsonl[.gz])")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="report file")
    sp.add_argument("--format", choices=("csv", "json"), default="json")
    sp.add_argument("--tau", type=float, default=None,
                    help="override the checkpoint threshold")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("infer", help="overlap decision + pose from two packets")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ego", required=True, help="ego packet file")
    sp.add_argument("--mate", required=True, help="teammate packet file")
    sp.add_argument("--out", help="optional JSON output file")
    sp.set_defaults(func=_cmd_infer)

    sp = sub.add_parser("sweep-tau", help="decision-threshold sweep to CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--grid", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    sp.add_argument("--out", required=True, help="CSV file")
    sp.set_defaults(func=_cmd_sweep_tau)

    sp = sub.add_parser("report", help="re-emit a JSON report as csv or json")
    sp.add_argument("--input", required=True, help="report JSON file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except EgomatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

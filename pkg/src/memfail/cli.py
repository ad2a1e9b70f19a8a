"""Command line: ``memfail <stage> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .features import UnlearnableDatasetError
from .ingest import ParseError
from .model import ManifestMismatchError
from . import pipeline

STAGES = ("gen", "featurize", "train", "evaluate", "analyze", "pipeline", "verify-goldens")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (flags override it)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker process cap (default 1)")
    common.add_argument("--lead", help="lead time(s), comma separated, e.g. 1s,15m,1h")
    common.add_argument("--threshold", type=float, help="alarm probability threshold")
    common.add_argument("--t-i", dest="t_i", help="positive labeling interval, e.g. 72h or lifetime")
    common.add_argument("--out-dir", default="out", type=Path)

    p = argparse.ArgumentParser(prog="memfail", description="DRAM UE prediction from CE logs")
    sub = p.add_subparsers(dest="stage", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic fleet")
    for name, helptext in (("featurize", "logs to labeled training dataset"),
                           ("analyze", "relative UE rate tables and indicator sweeps")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--events", type=Path)
        sp.add_argument("--specs", type=Path)
    sp = sub.add_parser("train", parents=[common], help="dataset to model")
    sp.add_argument("--dataset", type=Path)
    sp = sub.add_parser("evaluate", parents=[common], help="model and logs to metrics")
    sp.add_argument("--model", type=Path)
    sp.add_argument("--events", type=Path)
    sp.add_argument("--specs", type=Path)
    sub.add_parser("pipeline", parents=[common], help="gen, featurize, train and evaluate")
    sp = sub.add_parser("verify-goldens", help="re-run the pinned golden corpus and diff it")
    sp.add_argument("--goldens", type=Path, help="golden directory (default: the checked-in corpus)")
    return p


def _effective_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "threshold": args.threshold, "t_i": args.t_i, "threads": args.threads}
    if args.lead:
        overrides["leads"] = [x for x in args.lead.split(",") if x.strip()]
    return load_config(args.config, overrides)


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="warning: %(message)s", stream=sys.stderr, force=True)

    if args.stage == "verify-goldens":
        from .goldens import verify_goldens
        report = verify_goldens(args.goldens)
        print(report.text())
        return 0 if report.ok else 1

    try:
        cfg = _effective_config(args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2

    out: Path = args.out_dir
    print(f"stage={args.stage} seed={cfg.seed} config_hash={cfg.hash()} threads={cfg.threads}")
    print("effective config: " + json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")))
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
        events = getattr(args, "events", None) or out / "events.jsonl"
        specs = getattr(args, "specs", None) or out / "specs.csv"
        if args.stage == "gen":
            stats = pipeline.gen_stage(cfg, out)
            print(f"generated {stats['dimms']} DIMMs, {stats['ces']} CEs, {stats['ues']} UEs in {out}")
        elif args.stage == "featurize":
            ds = pipeline.featurize_stage(cfg, events, specs, out)
            n_pos = 0 if ds.y is None else int((ds.y == 1).sum())
            print(f"wrote {len(ds)} samples ({n_pos} positive) to {out / 'train.csv'}")
        elif args.stage == "train":
            model = pipeline.train_stage(cfg, args.dataset or out / "train.csv", out)
            print(f"wrote {len(model.trees)}-tree {model.mode} model to {out / 'model.jsonl'}")
        elif args.stage == "evaluate":
            print(pipeline.evaluate_stage(cfg, args.model or out / "model.jsonl", events, specs, out))
        elif args.stage == "analyze":
            print(pipeline.analyze_stage(cfg, events, specs, out))
        elif args.stage == "pipeline":
            print(pipeline.run_pipeline(cfg, out))
    except (pipeline.StageError, ParseError, UnlearnableDatasetError, ManifestMismatchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Command line entry point: ``dcan {gen-data,train,infer,eval,analyze-rf}``.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import SyntheticSpec, generate_synthetic, write_corpus
from .model import ConfigError, ModelConfig
from .pipeline import NumericFailure, RunConfig, evaluate, format_table, infer, load_config, train
from .rfanalyze import format_report

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_gen_data(args) -> int:
    raw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = SyntheticSpec.from_dict(raw)
    features, annotations, subsets = generate_synthetic(spec)
    path = write_corpus(args.out, features, annotations, subsets)
    print(f"wrote {len(features)} videos to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    result = train(cfg, args.corpus, args.out, subset=args.subset, max_steps=args.max_steps)
    last = result["records"][-1] if result["records"] else {}
    print(f"steps {result['steps']}  final loss {last.get('total', float('nan')):.4f}")
    print(f"checkpoint {result['checkpoint']}  sha256 {result['hash']}")
    return 0


def cmd_infer(args) -> int:
    cfg = _run_config(args)
    results = infer(args.checkpoint, args.features, cfg, args.out, subset=args.subset)
    print(f"wrote proposals for {len(results)} videos to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    metrics = evaluate(args.proposals, args.annotations, cfg.metric, args.out, subset=args.subset)
    sys.stdout.write(format_table(metrics))
    return 0


def cmd_analyze_rf(args) -> int:
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        model = ModelConfig.from_dict(raw.get("model", raw))
    else:
        model = ModelConfig().validate()
    sys.stdout.write(format_report(model))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a seeded synthetic feature corpus")
    p.add_argument("--spec", help="SyntheticSpec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a corpus manifest")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--subset", default="train")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="generate proposals from a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="corpus directory or manifest.json")
    p.add_argument("--out", required=True, help="proposal JSON path")
    p.add_argument("--subset")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="AR@AN, AUC and mAP for a proposal file")
    p.add_argument("--config")
    p.add_argument("--proposals", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", help="directory for metrics.json, metrics.txt and ar_an.png")
    p.add_argument("--subset", help="evaluate only annotation entries of this subset")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-rf", help="receptive-field contiguity report")
    p.add_argument("--config")
    p.set_defaults(func=cmd_analyze_rf)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, KeyError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

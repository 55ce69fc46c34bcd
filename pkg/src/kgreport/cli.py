"""Command line entry points: corpus synthesis, graph and vocabulary builds,
training, evaluation and single-case decoding."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import apply_overrides, load_run_config
from .extraction import (build_clinical_graph, default_pipeline,
                         graph_manifest, manifest_to_json)
from .synth import synthesize_corpus
from .training import decode_case, evaluate, load_dataset, train
from .vocab import build_vocab

log = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgreport",
        description="Graph-grounded report generation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a deterministic synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=12,
                   help="feature rows per case file")
    p.add_argument("--cols", type=int, default=1024,
                   help="feature columns per case file")

    p = sub.add_parser("extract-graph",
                       help="build the clinical graph from train reports")
    p.add_argument("--in", dest="dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats", default=None,
                   help="manifest path (default: OUT.stats.json)")

    p = sub.add_parser("build-vocab",
                       help="build the report vocabulary from train reports")
    p.add_argument("--in", dest="dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-frequency", type=int, default=3)

    p = sub.add_parser("train", help="train a model from a run config file")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[],
                   metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--seed", type=int, default=None,
                   help="replace the configured seed")
    p.add_argument("--resume", action="store_true",
                   help="continue from checkpoint_last.kgck")

    p = sub.add_parser("evaluate", help="score a finished run on one split")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--checkpoint", default="best", choices=("best", "last"))

    p = sub.add_parser("decode", help="generate one report from a feature file")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", default="best", choices=("best", "last"))
    return parser


def _train_records(dataset):
    return [r for r in load_dataset(dataset) if r["split"] == "train"]


def _run_config(run_dir):
    path = Path(run_dir) / "run_config.toml"
    if not path.exists():
        raise FileNotFoundError(f"no run configuration at {path}")
    cfg = load_run_config(path)
    # artifacts live where they were found, not where the run once wrote them
    return dataclasses.replace(cfg, out_dir=str(run_dir))


def _cmd_synth(args) -> int:
    records = synthesize_corpus(args.seed, args.cases, args.out,
                                feature_rows=args.rows, feature_cols=args.cols)
    print(f"wrote {len(records)} cases under {args.out}")
    return 0


def _cmd_extract_graph(args) -> int:
    records = _train_records(args.dataset)
    graph = build_clinical_graph(records, default_pipeline())
    graph.to_tsv(args.out)
    manifest = graph_manifest(graph, [r["id"] for r in records])
    stats_path = Path(args.stats or f"{args.out}.stats.json")
    stats_path.write_text(manifest_to_json(manifest) + "\n", encoding="utf-8")
    print(f"graph: {manifest['entities']} entities, {manifest['relations']} "
          f"relations, {manifest['triples']} triples from "
          f"{manifest['reports']} reports")
    return 0


def _cmd_build_vocab(args) -> int:
    vocab = build_vocab(_train_records(args.dataset),
                        min_frequency=args.min_frequency)
    vocab.save(args.out)
    print(f"vocabulary: {len(vocab)} tokens")
    return 0


def _cmd_train(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args.override)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    summary = train(cfg, resume=args.resume)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_evaluate(args) -> int:
    metrics = evaluate(_run_config(args.run), checkpoint=args.checkpoint,
                       split=args.split)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def _cmd_decode(args) -> int:
    print(decode_case(_run_config(args.run), args.features,
                      checkpoint=args.checkpoint))
    return 0


_COMMANDS = {"synth": _cmd_synth, "extract-graph": _cmd_extract_graph,
             "build-vocab": _cmd_build_vocab, "train": _cmd_train,
             "evaluate": _cmd_evaluate, "decode": _cmd_decode}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, OSError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

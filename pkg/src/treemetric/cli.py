"""Command-line interface.

Subcommands: simulate, run, reconstruct, evaluate, quartet-stats, tree-stats.
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from .errors import ConfigError, DataError, NumericalError
from .harness import (
    ExperimentConfig,
    cmd_quartet_stats,
    cmd_run,
    cmd_simulate,
    cmd_tree_stats,
    feature_distances,
    load_distance_csv,
    load_experiment_config,
)
from .metrics import evaluate_trees
from .quartets import LabelPrior, PartitionPrior
from .reconstruct import neighbor_joining
from .simulate import SimulationConfig
from .treeio import load_feature_csv, read_newick_file, write_newick_file


def _parse_seeds(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def _default_threads() -> int:
    return int(os.environ.get("TREEMETRIC_THREADS", "1"))


def _out_dir(arg: str | None) -> str | None:
    if arg is not None:
        return arg
    root = os.environ.get("TREEMETRIC_OUT_ROOT")
    return root


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treemetric",
        description="Tree-metric learning toolkit: simulate lineage data, train "
                    "quartet-metric embeddings, reconstruct and compare trees.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset directory")
    p.add_argument("--config", required=True, help="JSON file of simulation fields")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("run", help="full experiment: data -> train -> evaluate")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="run a single seed")
    p.add_argument("--seeds", type=str, default=None, help="seed range A..B or list a,b,c")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("--out", default=None, help="output directory (default: TREEMETRIC_OUT_ROOT)")
    p.add_argument("--permute", choices=["leaf", "cell", "gene"], default=None,
                   help="train on a permuted table (null-model run)")

    p = sub.add_parser("reconstruct", help="neighbor joining from a CSV matrix")
    p.add_argument("--input", required=True, help="distance or feature CSV")
    p.add_argument("--kind", choices=["distances", "features"], default="distances")
    p.add_argument("--metric", choices=["euclidean", "squared"], default="euclidean",
                   help="distance on feature rows (features mode)")
    p.add_argument("--out", required=True, help="output Newick path")

    p = sub.add_parser("evaluate", help="compare two trees (RF, quartet distance)")
    p.add_argument("reference", help="reference tree (Newick)")
    p.add_argument("estimate", help="estimated tree (Newick)")
    p.add_argument("--stratify-level", type=int, default=None,
                   help="stratify quartets by reference-tree clades at this level")
    p.add_argument("--stratify-labeled", default=None,
                   help="file of labeled leaf names (one per line)")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the JSON report here")

    p = sub.add_parser("quartet-stats", help="prior proportion and count tables")
    p.add_argument("--k-range", default=None, help="clade counts, e.g. 2..16")
    p.add_argument("--tree", default=None, help="Newick tree for exact level counts")
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out", default=None)

    p = sub.add_parser("tree-stats", help="shape statistics of a rooted tree")
    p.add_argument("tree", help="Newick tree")
    p.add_argument("--unit-lengths", action="store_true")
    p.add_argument("--out", default=None)
    return parser


def _emit(payload: dict, out_path: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _quartet_stats_csv(stats: dict, out_path: str | None) -> None:
    rows = stats.get("theoretical", []) + stats.get("tree_levels", [])
    if "partial_labels" in stats:
        rows.append(stats["partial_labels"])
    stream = open(out_path, "w", newline="", encoding="utf-8") if out_path else sys.stdout
    try:
        fields = sorted({k for row in rows for k in row})
        writer = csv.DictWriter(stream, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if out_path:
            stream.close()


def _dispatch(args) -> None:
    if args.command == "simulate":
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read simulation config: {exc}") from None
        if args.seed is not None:
            raw["seed"] = args.seed
        try:
            sim = SimulationConfig(**{**raw, "alt_partitions": tuple(raw.get("alt_partitions", (1.0,)))})
        except TypeError as exc:
            raise ConfigError(f"bad simulation config: {exc}") from None
        paths = cmd_simulate(sim, args.out)
        _emit(paths, None)

    elif args.command == "run":
        cfg = load_experiment_config(args.config)
        if args.seed is not None and args.seeds is not None:
            raise ConfigError("use either --seed or --seeds, not both")
        if args.seed is not None:
            cfg.seeds = [args.seed]
        elif args.seeds is not None:
            cfg.seeds = _parse_seeds(args.seeds)
        if args.permute is not None:
            cfg.permute = args.permute
        report = cmd_run(cfg, out_dir=_out_dir(args.out), threads=args.threads)
        failures = [e for e in report.per_seed if "error" in e]
        _emit(report.as_dict(), None)
        if len(failures) == len(report.per_seed):
            raise NumericalError("every seed failed")

    elif args.command == "reconstruct":
        if args.kind == "distances":
            matrix, labels = load_distance_csv(args.input)
        else:
            table = load_feature_csv(args.input)
            matrix, labels = feature_distances(table, args.metric), table.row_labels
        tree = neighbor_joining(matrix, labels)
        write_newick_file(tree, args.out)

    elif args.command == "evaluate":
        reference = read_newick_file(args.reference)
        estimate = read_newick_file(args.estimate)
        strata = None
        if args.stratify_level is not None:
            strata = PartitionPrior.from_tree_level(reference, args.stratify_level)
        elif args.stratify_labeled is not None:
            with open(args.stratify_labeled, encoding="utf-8") as fh:
                labeled_names = {line.strip() for line in fh if line.strip()}
            labels = reference.leaf_labels
            strata = LabelPrior(labels,
                                frozenset(i for i, l in enumerate(labels) if l in labeled_names))
        report = evaluate_trees(reference, estimate, strata=strata,
                                samples=args.samples, seed=args.seed)
        _emit(report.as_dict(), args.out)

    elif args.command == "quartet-stats":
        k_range = None
        if args.k_range:
            lo, hi = args.k_range.split("..", 1)
            k_range = (int(lo), int(hi))
        tree = read_newick_file(args.tree) if args.tree else None
        stats = cmd_quartet_stats(k_range=k_range, tree=tree, level=args.level,
                                  kappa=args.kappa, n=args.n)
        if args.format == "csv":
            _quartet_stats_csv(stats, args.out)
        else:
            _emit(stats, args.out)

    elif args.command == "tree-stats":
        tree = read_newick_file(args.tree)
        _emit(cmd_tree_stats(tree, unit_lengths=args.unit_lengths), args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

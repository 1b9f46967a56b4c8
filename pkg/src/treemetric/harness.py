"""Experiment harness: configuration, dataset directories, and the
simulate -> train -> reconstruct -> evaluate pipeline with per-seed reports.

An experiment config is a JSON object with these sections (all optional
fields shown with their defaults):

    {
      "simulation": {...},            # SimulationConfig fields, or instead:
      "data_dir": "path",             # a directory written by `simulate`
      "supervision": {"kind": "supervised", "level": null, "kappa": null,
                       "prior_seed": 0},
      "loss": {"loss": "quartet", "lambda_additivity": 2.0, "w_close": 1.0,
                "w_push": 10.0, "lambda_deviation": 0.01,
                "lambda_sparsity": 0.0, "margin": 0.5,
                "metric": "euclidean", "quartets_per_step": 32},
      "model": {"hidden": [256, 256], "output_dim": 128, "gating": false,
                 "projection": false, "gate_temperature": 1.0,
                 "dropout_data": 0.0, "dropout_metric": 0.0},
      "train": {"steps": 1000, "learning_rate": 0.001, "momentum": 0.9,
                 "eval_interval": 0},
      "seeds": [0],
      "permute": null                  # or "leaf" | "cell" | "gene"
    }

Reports embed the fully resolved config; identical configs and seeds give
byte-identical reports apart from the "timing" block.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, TreemetricError
from .learn import (
    EmbeddingModel,
    LossConfig,
    Supervision,
    TrainSettings,
    forward,
    save_model,
    train,
)
from .metrics import delta_percent, evaluate_trees, quartet_distance, rf_distance, stratified_qd
from .quartets import (
    LabelPrior,
    PartitionPrior,
    balanced_unknown_fraction,
    exact_known_counts,
    labeled_fraction_curve,
    theoretical_partition_proportions,
)
from .reconstruct import neighbor_joining
from .simulate import Dataset, SimulationConfig, simulate_dataset
from .treeio import (
    FeatureTable,
    load_feature_csv,
    permute_dataset,
    read_newick_file,
    save_feature_csv,
    write_newick_file,
)
from .trees import Tree, tree_stats

__all__ = [
    "ExperimentConfig",
    "RunReport",
    "load_experiment_config",
    "save_dataset",
    "load_dataset",
    "cmd_simulate",
    "cmd_run",
    "cmd_quartet_stats",
    "feature_distances",
    "load_distance_csv",
    "save_distance_csv",
]

_DEFAULTS = {
    "supervision": {"kind": "supervised", "level": None, "kappa": None, "prior_seed": 0},
    "loss": {
        "loss": "quartet",
        "lambda_additivity": 2.0,
        "w_close": 1.0,
        "w_push": 10.0,
        "lambda_deviation": 0.01,
        "lambda_sparsity": 0.0,
        "margin": 0.5,
        "metric": "euclidean",
        "quartets_per_step": 32,
    },
    "model": {
        "hidden": [256, 256],
        "output_dim": 128,
        "gating": False,
        "projection": False,
        "gate_temperature": 1.0,
        "dropout_data": 0.0,
        "dropout_metric": 0.0,
    },
    "train": {"steps": 1000, "learning_rate": 1e-3, "momentum": 0.9, "eval_interval": 0},
}


def _merge_section(name: str, given: dict) -> dict:
    base = dict(_DEFAULTS[name])
    unknown = sorted(set(given) - set(base))
    if unknown:
        raise ConfigError(f"unknown keys in '{name}' section: {unknown}")
    base.update(given)
    return base


@dataclass
class ExperimentConfig:
    simulation: SimulationConfig | None
    data_dir: str | None
    supervision: dict
    loss: dict
    model: dict
    train: dict
    seeds: list[int]
    permute: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = sorted(set(raw) - {"simulation", "data_dir", "supervision",
                                     "loss", "model", "train", "seeds", "permute"})
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        has_sim = "simulation" in raw and raw["simulation"] is not None
        has_dir = "data_dir" in raw and raw["data_dir"] is not None
        if has_sim == has_dir:
            raise ConfigError("exactly one data source: 'simulation' or 'data_dir'")
        sim = None
        if has_sim:
            try:
                sim = SimulationConfig(**{**raw["simulation"],
                                          "alt_partitions": tuple(raw["simulation"].get("alt_partitions", (1.0,)))})
            except TypeError as exc:
                raise ConfigError(f"bad simulation section: {exc}") from None
        data_dir = raw.get("data_dir")
        if data_dir is not None and not Path(data_dir).is_dir():
            raise ConfigError(f"data_dir {data_dir!r} does not exist")
        seeds = raw.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or \
                not all(isinstance(s, int) for s in seeds):
            raise ConfigError("'seeds' must be a nonempty list of integers")
        permute = raw.get("permute")
        if permute not in (None, "leaf", "cell", "gene"):
            raise ConfigError(f"invalid permute mode {permute!r}")
        cfg = cls(
            simulation=sim,
            data_dir=data_dir,
            supervision=_merge_section("supervision", raw.get("supervision", {})),
            loss=_merge_section("loss", raw.get("loss", {})),
            model=_merge_section("model", raw.get("model", {})),
            train=_merge_section("train", raw.get("train", {})),
            seeds=list(seeds),
            permute=permute,
        )
        if cfg.supervision["kind"] not in ("supervised", "partition", "partial", "unsupervised"):
            raise ConfigError(f"unknown supervision kind {cfg.supervision['kind']!r}")
        if cfg.supervision["kind"] == "partition" and cfg.supervision["level"] is None:
            raise ConfigError("partition supervision needs 'level'")
        if cfg.supervision["kind"] == "partial" and cfg.supervision["kappa"] is None:
            raise ConfigError("partial supervision needs 'kappa'")
        return cfg

    def as_dict(self) -> dict:
        return {
            "simulation": None if self.simulation is None else self.simulation.as_dict(),
            "data_dir": self.data_dir,
            "supervision": self.supervision,
            "loss": self.loss,
            "model": self.model,
            "train": self.train,
            "seeds": self.seeds,
            "permute": self.permute,
        }


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw)


# --------------------------------------------------------------------------- #
# dataset directories
# --------------------------------------------------------------------------- #


def save_dataset(dataset: Dataset, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_newick_file(dataset.tree, out / "tree.nwk")
    save_feature_csv(dataset.train, out / "train.csv")
    save_feature_csv(dataset.test, out / "test.csv")
    for i, alt in enumerate(dataset.alt_trees):
        write_newick_file(alt, out / f"alt_{i}.nwk")
    if dataset.config is not None:
        with open(out / "config.json", "w", encoding="utf-8") as fh:
            json.dump(dataset.config.as_dict(), fh, indent=2, sort_keys=True)
    return {
        "tree": str(out / "tree.nwk"),
        "train": str(out / "train.csv"),
        "test": str(out / "test.csv"),
        "alt_trees": [str(out / f"alt_{i}.nwk") for i in range(len(dataset.alt_trees))],
    }


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    tree = read_newick_file(root / "tree.nwk")
    train_table = load_feature_csv(root / "train.csv")
    test_table = load_feature_csv(root / "test.csv")
    alt = []
    i = 0
    while (root / f"alt_{i}.nwk").exists():
        alt.append(read_newick_file(root / f"alt_{i}.nwk"))
        i += 1
    config = None
    if (root / "config.json").exists():
        with open(root / "config.json", encoding="utf-8") as fh:
            raw = json.load(fh)
        config = SimulationConfig(**{**raw, "alt_partitions": tuple(raw["alt_partitions"])})
    return Dataset(tree, train_table, test_table, alt, config)


def cmd_simulate(sim_config: SimulationConfig, out_dir) -> dict:
    """Generate a dataset and write it as a directory; deterministic per seed."""
    dataset = simulate_dataset(sim_config)
    return save_dataset(dataset, out_dir)


# --------------------------------------------------------------------------- #
# distances on disk
# --------------------------------------------------------------------------- #


def feature_distances(table: FeatureTable, metric: str = "euclidean") -> np.ndarray:
    """Pairwise distance matrix of table rows (euclidean or squared)."""
    X = table.values
    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    if metric == "squared" or metric == "squared_euclidean":
        return sq
    if metric == "euclidean":
        return np.sqrt(sq)
    raise ConfigError(f"unknown metric {metric!r}")


def save_distance_csv(matrix: np.ndarray, labels, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["leaf", *labels])
        for lbl, row in zip(labels, np.asarray(matrix)):
            writer.writerow([lbl, *[repr(float(x)) for x in row]])


def load_distance_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError("empty distance file")
    labels = rows[0][1:]
    n = len(labels)
    if len(rows) != n + 1:
        raise DataError("distance matrix must be square with a label header")
    matrix = np.empty((n, n))
    for i, row in enumerate(rows[1:]):
        if len(row) != n + 1 or row[0] != labels[i]:
            raise DataError(f"row {i + 2} does not match the header labels")
        matrix[i] = [float(x) for x in row[1:]]
    if not np.isfinite(matrix).all():
        raise DataError("distance matrix contains non-finite entries")
    return matrix, labels


# --------------------------------------------------------------------------- #
# full runs
# --------------------------------------------------------------------------- #


def _build_supervision(cfg: ExperimentConfig, dataset: Dataset, seed: int) -> Supervision:
    kind = cfg.supervision["kind"]
    if kind == "supervised":
        return Supervision.supervised(dataset.tree)
    if kind == "partition":
        prior = PartitionPrior.from_tree_level(dataset.tree, int(cfg.supervision["level"]))
        return Supervision.from_partition(prior)
    if kind == "partial":
        prior = LabelPrior.random(
            dataset.tree.leaf_labels,
            float(cfg.supervision["kappa"]),
            int(cfg.supervision["prior_seed"]) + seed,
        )
        return Supervision.partial(prior, dataset.tree)
    return Supervision.unsupervised()


def _strata_prior(supervision: Supervision):
    if supervision.kind == "partition":
        return supervision.partition
    if supervision.kind == "partial":
        return supervision.labels
    return None


def _stratified_deltas(base: dict | None, recon: dict | None) -> dict | None:
    if base is None or recon is None:
        return None
    out = {}
    for cls, b in base.items():
        if cls in recon and b > 0:
            out[cls] = delta_percent(b, recon[cls])
    return out


def run_one_seed(config_dict: dict, seed: int, out_dir: str | None) -> dict:
    """Build/load the dataset for one seed, train, evaluate, write artifacts.
    Returns the per-seed report entry."""
    cfg = ExperimentConfig.from_dict(config_dict)
    started = time.perf_counter()
    if cfg.simulation is not None:
        sim = SimulationConfig(**{**cfg.simulation.as_dict(),
                                  "alt_partitions": tuple(cfg.simulation.alt_partitions),
                                  "seed": seed})
        dataset = simulate_dataset(sim)
    else:
        dataset = load_dataset(cfg.data_dir)
    if cfg.permute:
        dataset = Dataset(dataset.tree,
                          permute_dataset(dataset.train, cfg.permute, seed),
                          dataset.test, dataset.alt_trees, dataset.config)

    tree = dataset.tree
    labels = list(tree.leaf_labels)
    supervision = _build_supervision(cfg, dataset, seed)
    strata = _strata_prior(supervision)

    test_aligned = dataset.test.reordered(labels)
    base_matrix = feature_distances(test_aligned, cfg.loss["metric"])
    base_tree = neighbor_joining(base_matrix, labels)
    base_rf = rf_distance(tree, base_tree)
    base_qd = quartet_distance(tree, base_tree, seed=seed)
    base_strat = stratified_qd(tree, base_tree, strata, seed=seed) if strata else None

    steps = int(cfg.train["steps"])
    artifacts: dict = {}
    if steps == 0:
        # no training: the reconstruction is the raw-data baseline itself
        recon_tree = base_tree
        train_rf = None
        history = None
        model = None
    else:
        loss_config = LossConfig(supervision=supervision, **cfg.loss)
        widths = [dataset.train.n_cols, *cfg.model["hidden"], cfg.model["output_dim"]]
        model = EmbeddingModel.create(
            widths,
            seed=seed,
            gating=bool(cfg.model["gating"]),
            projection=bool(cfg.model["projection"]),
            gate_temperature=float(cfg.model["gate_temperature"]),
            dropout_data=float(cfg.model["dropout_data"]),
            dropout_metric=float(cfg.model["dropout_metric"]),
        )
        settings = TrainSettings(
            steps=steps,
            learning_rate=float(cfg.train["learning_rate"]),
            momentum=float(cfg.train["momentum"]),
            eval_interval=int(cfg.train["eval_interval"]),
        )
        model, history = train(model, dataset, loss_config, settings, seed=seed)
        z_train = forward(model, dataset.train.reordered(labels).values)
        train_tree = neighbor_joining(feature_distances(
            FeatureTable(labels, [f"z{i}" for i in range(z_train.shape[1])], z_train),
            "euclidean"), labels)
        train_rf = rf_distance(tree, train_tree)
        z_test = forward(model, test_aligned.values)
        recon_tree = neighbor_joining(feature_distances(
            FeatureTable(labels, [f"z{i}" for i in range(z_test.shape[1])], z_test),
            "euclidean"), labels)

    report = evaluate_trees(tree, recon_tree, base_rf=base_rf, base_qd=base_qd,
                            strata=strata, seed=seed)
    entry = {
        "seed": seed,
        "base_rf": base_rf,
        "base_qd": base_qd,
        "base_stratified": base_strat,
        "train_rf": train_rf,
        "test_rf": report.rf,
        "test_qd": report.qd,
        "delta_rf": report.delta_rf,
        "delta_qd": report.delta_qd,
        "stratified": report.stratified,
        "stratified_deltas": _stratified_deltas(base_strat, report.stratified),
        "qd_mode": report.qd_mode,
        "artifacts": artifacts,
    }
    if out_dir is not None:
        seed_dir = Path(out_dir) / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        if history is not None:
            _write_history_csv(history, seed_dir / "history.csv")
            artifacts["history"] = str(seed_dir / "history.csv")
        if model is not None:
            save_model(model, seed_dir / "model.json")
            artifacts["model"] = str(seed_dir / "model.json")
        write_newick_file(recon_tree, seed_dir / "reconstructed.nwk")
        artifacts["reconstructed"] = str(seed_dir / "reconstructed.nwk")
    entry["wall_clock_s"] = time.perf_counter() - started
    return entry


def _write_history_csv(history, path) -> None:
    rows = history.rows()
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    evals_path = Path(path).with_name("evals.csv")
    if history.evals:
        with open(evals_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(history.evals[0]))
            writer.writeheader()
            writer.writerows(history.evals)


@dataclass
class RunReport:
    config: dict
    per_seed: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"config": self.config, "per_seed": self.per_seed,
                "aggregate": self.aggregate, "timing": self.timing}


_AGGREGATE_KEYS = ("base_rf", "base_qd", "train_rf", "test_rf", "test_qd",
                   "delta_rf", "delta_qd")


def aggregate_entries(entries: list[dict]) -> dict:
    """Mean/SD per score over the successful seeds; recomputable from the
    per-seed entries."""
    out = {}
    good = [e for e in entries if "error" not in e]
    for key in _AGGREGATE_KEYS:
        values = [e[key] for e in good if e.get(key) is not None]
        if values:
            arr = np.array(values, dtype=float)
            out[key] = {"mean": float(arr.mean()), "sd": float(arr.std())}
    return out


def cmd_run(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> RunReport:
    """Run every seed (optionally in parallel worker processes), aggregate,
    and write ``report.json``.  A failing seed is recorded and the run
    continues."""
    started = time.perf_counter()
    config_dict = cfg.as_dict()
    entries: list[dict] = []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {seed: pool.submit(run_one_seed, config_dict, seed,
                                         str(out_dir) if out_dir else None)
                       for seed in cfg.seeds}
            for seed in cfg.seeds:
                try:
                    entries.append(futures[seed].result())
                except TreemetricError as exc:
                    entries.append({"seed": seed, "error": str(exc)})
    else:
        for seed in cfg.seeds:
            try:
                entries.append(run_one_seed(config_dict, seed,
                                            str(out_dir) if out_dir else None))
            except TreemetricError as exc:
                entries.append({"seed": seed, "error": str(exc)})

    timing = {"wall_clock_s": time.perf_counter() - started,
              "per_seed_s": {str(e["seed"]): e.pop("wall_clock_s")
                             for e in entries if "wall_clock_s" in e}}
    report = RunReport(config=config_dict, per_seed=entries,
                       aggregate=aggregate_entries(entries), timing=timing)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
    return report


# --------------------------------------------------------------------------- #
# stats subcommands
# --------------------------------------------------------------------------- #


def cmd_quartet_stats(
    k_range: tuple[int, int] | None = None,
    tree: Tree | None = None,
    level: int | None = None,
    kappa: float | None = None,
    n: int | None = None,
) -> dict:
    """Proportion/count tables for clade priors and partial labels."""
    out: dict = {}
    if k_range is not None:
        lo, hi = k_range
        rows = []
        for k in range(lo, hi + 1):
            props = theoretical_partition_proportions(k)
            resolvable = props[(2, 2)] + props[(2, 1, 1)]
            rows.append({
                "k": k,
                "p4": float(props[(4,)]),
                "p31": float(props[(3, 1)]),
                "p22": float(props[(2, 2)]),
                "p211": float(props[(2, 1, 1)]),
                "p1111": float(props[(1, 1, 1, 1)]),
                "resolvable": float(resolvable),
            })
        best = max(rows, key=lambda r: r["resolvable"])
        out["theoretical"] = rows
        out["argmax_resolvable_k"] = best["k"]
    if tree is not None and level is not None:
        rows = []
        for lvl in range(1, level + 1):
            counts = exact_known_counts(tree, lvl)
            rows.append({
                "level": lvl,
                "n": counts.n,
                "total_quartets": counts.total,
                "known": counts.known,
                "proportion": counts.proportion,
                "balanced_unknown_limit": balanced_unknown_fraction(lvl),
            })
        out["tree_levels"] = rows
    if kappa is not None:
        fractions = labeled_fraction_curve(kappa, n)
        row = {"kappa": kappa, "known": fractions.known,
               "partial": fractions.partial, "unknown": fractions.unknown}
        if fractions.counts:
            row.update(fractions.counts)
        out["partial_labels"] = row
    if not out:
        raise ConfigError("quartet-stats needs --k-range, --tree/--level, or --kappa")
    return out


def cmd_tree_stats(tree: Tree, unit_lengths: bool = False) -> dict:
    stats = tree_stats(tree, unit_lengths=unit_lengths)
    return {
        "n_leaves": tree.n_leaves,
        "colless": stats.colless,
        "diameter": stats.diameter,
        "depth_mean": stats.depth_mean,
        "depth_sd": stats.depth_sd,
        "faiths_pd": stats.faiths_pd,
        "mean_pairwise_distance": stats.mean_pairwise_distance,
    }

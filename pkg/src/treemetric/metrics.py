"""Topology comparison: Robinson-Foulds, exact/sampled quartet distance,
stratified quartet distances, and relative-improvement scores."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateInputError
from .quartets import (
    LabelPrior,
    PartitionPrior,
    classify_by_labels,
    classify_by_partition,
    quartet_count,
    sample_quartets,
)
from .trees import Tree, bipartitions, path_distance_matrix, topology_codes

__all__ = [
    "EXACT_QD_LIMIT",
    "DEFAULT_QD_SAMPLES",
    "EvalReport",
    "rf_distance",
    "quartet_distance",
    "stratified_qd",
    "delta_percent",
    "evaluate_trees",
]

EXACT_QD_LIMIT = 2_000_000
DEFAULT_QD_SAMPLES = 100_000


def _common_labels(t1: Tree, t2: Tree) -> list[str]:
    if sorted(t1.leaf_labels) != sorted(t2.leaf_labels):
        raise DataError("trees must share an identical leaf label set")
    return sorted(t1.leaf_labels)


def _bipartition_masks(tree: Tree, labels: list[str]) -> set[int]:
    """Bipartitions re-expressed as bitmasks over the common label order."""
    position = {lbl: i for i, lbl in enumerate(labels)}
    slot = [position[lbl] for lbl in tree.leaf_labels]
    full = (1 << len(labels)) - 1
    masks = set()
    for bp in bipartitions(tree):
        mask = 0
        for local in range(len(labels)):
            if bp.mask >> local & 1:
                mask |= 1 << slot[local]
        if mask & 1 == 0:
            mask = full & ~mask
        masks.add(mask)
    return masks


def rf_distance(t1: Tree, t2: Tree) -> float:
    """Normalized Robinson-Foulds distance: the symmetric difference of the
    two nontrivial bipartition sets over their combined size.  0 iff the
    unrooted topologies agree; 1 when no bipartition is shared."""
    labels = _common_labels(t1, t2)
    b1 = _bipartition_masks(t1, labels)
    b2 = _bipartition_masks(t2, labels)
    denom = len(b1) + len(b2)
    if denom == 0:
        return 0.0
    return len(b1 ^ b2) / denom


def _aligned_matrix(tree: Tree, labels: list[str]) -> np.ndarray:
    order = [list(tree.leaf_labels).index(lbl) for lbl in labels]
    return path_distance_matrix(tree)[np.ix_(order, order)]


def _quartet_index_array(n: int, mode, samples: int, seed: int):
    """(quartet index array, mode record) for exact or sampled evaluation."""
    total = quartet_count(n)
    if mode == "auto":
        mode = "exact" if total <= EXACT_QD_LIMIT else "sampled"
    if mode == "exact":
        return np.array(list(itertools.combinations(range(n), 4))), ("exact", total, None)
    if mode == "sampled":
        count = min(samples, total)
        return np.array(sample_quartets(n, count, seed)), ("sampled", count, seed)
    raise DataError(f"unknown quartet distance mode {mode!r}")


def quartet_distance(
    t1: Tree,
    t2: Tree,
    mode: str = "auto",
    samples: int = DEFAULT_QD_SAMPLES,
    seed: int = 0,
) -> float:
    """Fraction of quartets induced differently by the two trees.

    An unresolved quartet differs from every resolved topology (two
    unresolved quartets agree).  Sampling, used above ``EXACT_QD_LIMIT``
    quartets in auto mode, gives an unbiased estimate of the exact value.
    """
    labels = _common_labels(t1, t2)
    n = len(labels)
    if n < 4:
        raise DegenerateInputError("quartet distance needs at least 4 leaves")
    quartets, _ = _quartet_index_array(n, mode, samples, seed)
    codes1 = topology_codes(_aligned_matrix(t1, labels), quartets)
    codes2 = topology_codes(_aligned_matrix(t2, labels), quartets)
    return float(np.mean(codes1 != codes2))


def _classes_for(quartets: np.ndarray, strata, labels: list[str]) -> list:
    if isinstance(strata, PartitionPrior):
        prior = strata.reindexed(labels)
        return ["Known" if classify_by_partition(q, prior)[1] else "Unknown"
                for q in quartets]
    if isinstance(strata, LabelPrior):
        prior = strata.reindexed(labels)
        return [classify_by_labels(q, prior).value for q in quartets]
    if callable(strata):
        return [strata(tuple(labels[i] for i in q)) for q in quartets]
    raise DataError("strata must be a prior or a callable on label 4-tuples")


def stratified_qd(
    t1: Tree,
    t2: Tree,
    strata,
    mode: str = "auto",
    samples: int = DEFAULT_QD_SAMPLES,
    seed: int = 0,
) -> dict:
    """Quartet distance split by quartet class.

    ``strata`` is a :class:`PartitionPrior` (classes Known/Unknown), a
    :class:`LabelPrior` (Known/Partial/Unknown), or a callable mapping a
    4-tuple of leaf labels to a class.  Classes without members are absent
    from the result.  Under exact enumeration the class values recombine,
    weighted by class size, to the overall quartet distance.
    """
    labels = _common_labels(t1, t2)
    n = len(labels)
    if n < 4:
        raise DegenerateInputError("quartet distance needs at least 4 leaves")
    quartets, _ = _quartet_index_array(n, mode, samples, seed)
    codes1 = topology_codes(_aligned_matrix(t1, labels), quartets)
    codes2 = topology_codes(_aligned_matrix(t2, labels), quartets)
    differs = codes1 != codes2
    classes = _classes_for(quartets, strata, labels)
    totals: dict = {}
    wrong: dict = {}
    for cls, bad in zip(classes, differs):
        totals[cls] = totals.get(cls, 0) + 1
        wrong[cls] = wrong.get(cls, 0) + bool(bad)
    return {cls: wrong[cls] / totals[cls] for cls in totals}


def delta_percent(base: float, recon: float) -> float:
    """Relative improvement (base - recon) / base; negative when the
    reconstruction is worse than the baseline."""
    if base == 0:
        raise DataError("baseline score of 0 leaves relative improvement undefined")
    return (base - recon) / base


@dataclass
class EvalReport:
    """Bundle of comparison scores for one reconstructed tree."""

    rf: float
    qd: float
    delta_rf: float | None = None
    delta_qd: float | None = None
    stratified: dict | None = None
    qd_mode: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "rf": self.rf,
            "qd": self.qd,
            "delta_rf": self.delta_rf,
            "delta_qd": self.delta_qd,
            "stratified": self.stratified,
            "qd_mode": self.qd_mode,
        }


def evaluate_trees(
    reference: Tree,
    reconstructed: Tree,
    base_rf: float | None = None,
    base_qd: float | None = None,
    strata=None,
    mode: str = "auto",
    samples: int = DEFAULT_QD_SAMPLES,
    seed: int = 0,
) -> EvalReport:
    """RF/QD of a reconstruction against a reference, with optional
    improvement scores relative to a baseline and stratified quartet
    distances."""
    n = len(reference.leaf_labels)
    total = quartet_count(n) if n >= 4 else 0
    actual_mode = mode
    if mode == "auto":
        actual_mode = "exact" if total <= EXACT_QD_LIMIT else "sampled"
    report = EvalReport(
        rf=rf_distance(reference, reconstructed),
        qd=quartet_distance(reference, reconstructed, mode, samples, seed),
        qd_mode={"mode": actual_mode,
                 "samples": None if actual_mode == "exact" else min(samples, total),
                 "seed": None if actual_mode == "exact" else seed},
    )
    if base_rf is not None:
        report.delta_rf = delta_percent(base_rf, report.rf)
    if base_qd is not None:
        report.delta_qd = delta_percent(base_qd, report.qd)
    if strata is not None:
        report.stratified = stratified_qd(reference, reconstructed, strata,
                                          mode, samples, seed)
    return report

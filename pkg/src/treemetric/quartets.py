"""Quartet enumeration, distance sums, and supervision combinatorics.

Counting operations use exact integer/rational arithmetic; floating point
only enters for the asymptotic formulas.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterator

import numpy as np

from .errors import DataError, DegenerateInputError, QuartetError
from .rng import SAMPLING, stream
from .trees import QuartetTopology, Tree

__all__ = [
    "QuartetSums",
    "PartitionPrior",
    "LabelPrior",
    "LabelClass",
    "KnownQuartetCounts",
    "LabelFractions",
    "quartet_count",
    "enumerate_quartets",
    "sample_quartets",
    "distance_sums",
    "classify_by_partition",
    "resolve_from_partition",
    "classify_by_labels",
    "theoretical_partition_proportions",
    "exact_known_counts",
    "balanced_unknown_fraction",
    "labeled_fraction_curve",
]

COMPOSITIONS = ((4,), (3, 1), (2, 2), (2, 1, 1), (1, 1, 1, 1))
RESOLVABLE = ((2, 2), (2, 1, 1))


def quartet_count(n: int) -> int:
    return math.comb(n, 4)


def enumerate_quartets(n: int) -> Iterator[tuple[int, int, int, int]]:
    """All C(n, 4) strictly increasing 4-tuples of leaf indices."""
    if n < 4:
        raise DegenerateInputError(f"need at least 4 leaves, got {n}")
    return itertools.combinations(range(n), 4)


def sample_quartets(n: int, count: int, seed: int) -> list[tuple[int, int, int, int]]:
    """Uniform sample of quartets without replacement, deterministic per seed."""
    total = quartet_count(n)
    if count > total:
        raise DataError(f"requested {count} quartets but only {total} exist")
    rng = stream(seed, SAMPLING)
    if total <= 4 * count or total <= 200_000:
        everything = list(enumerate_quartets(n))
        picked = rng.choice(total, size=count, replace=False)
        return [everything[i] for i in sorted(picked)]
    chosen: set[tuple[int, int, int, int]] = set()
    while len(chosen) < count:
        q = tuple(sorted(int(x) for x in rng.choice(n, size=4, replace=False)))
        chosen.add(q)
    return sorted(chosen)


@dataclass(frozen=True)
class QuartetSums:
    """The three pairing sums of a sorted quartet (a, b, c, d):
    s1 = D(a,b)+D(c,d), s2 = D(a,c)+D(b,d), s3 = D(a,d)+D(b,c)."""

    s1: float
    s2: float
    s3: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.s1, self.s2, self.s3)


def _sorted_quartet(quartet) -> tuple[int, int, int, int]:
    q = tuple(int(i) for i in quartet)
    if len(q) != 4 or len(set(q)) != 4:
        raise QuartetError(f"quartet must hold 4 distinct leaves, got {q}")
    return tuple(sorted(q))


def distance_sums(matrix: np.ndarray, quartet) -> QuartetSums:
    a, b, c, d = _sorted_quartet(quartet)
    m = np.asarray(matrix)
    return QuartetSums(
        float(m[a, b] + m[c, d]),
        float(m[a, c] + m[b, d]),
        float(m[a, d] + m[b, c]),
    )


# --------------------------------------------------------------------------- #
# priors
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class PartitionPrior:
    """Assignment of every leaf to one of k broad clades.

    ``clade_of`` is indexed by position in ``labels``; clade ids are dense
    ``0 .. k-1``.  ``level`` records the branching depth when the prior was
    derived from a tree.
    """

    labels: tuple[str, ...]
    clade_of: tuple[int, ...]
    k: int
    level: int | None = None

    def __post_init__(self):
        if len(self.labels) != len(self.clade_of):
            raise DataError("clade assignment does not cover the leaves")
        if self.k < 2:
            raise DataError("need at least 2 clades")
        present = set(self.clade_of)
        if not present <= set(range(self.k)):
            raise DataError("clade ids must be dense 0..k-1")

    @classmethod
    def from_tree_level(cls, tree: Tree, level: int) -> "PartitionPrior":
        """Clades = leaf sets below each depth-``level`` node of a rooted
        binary tree.  Raises if the tree is unrooted, non-binary, or has any
        leaf above that depth."""
        if tree.root is None:
            raise DataError("partition prior needs a rooted tree")
        if not tree.is_binary():
            raise DataError("partition prior needs a binary tree")
        if level < 1:
            raise DataError("level must be >= 1")
        adj = tree.adjacency()
        clade_of = [-1] * tree.n_leaves
        clade_heads: list[int] = []
        stack = [(tree.root, 0, -1, -1)]
        while stack:
            node, depth, parent, clade = stack.pop()
            if depth == level and clade < 0:
                clade = len(clade_heads)
                clade_heads.append(node)
            if node < tree.n_leaves:
                if clade < 0:
                    raise DataError(
                        f"leaf {tree.leaf_labels[node]} sits above level {level}"
                    )
                clade_of[node] = clade
                continue
            for child, _ in adj[node]:
                if child != parent:
                    stack.append((child, depth + 1, node, clade))
        return cls(tree.leaf_labels, tuple(clade_of), len(clade_heads), level)

    def clade_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for c in self.clade_of:
            sizes[c] += 1
        return sizes

    def reindexed(self, labels) -> "PartitionPrior":
        lookup = dict(zip(self.labels, self.clade_of))
        missing = [l for l in labels if l not in lookup]
        if missing:
            raise DataError(f"prior does not cover labels {missing}")
        return PartitionPrior(tuple(labels), tuple(lookup[l] for l in labels),
                              self.k, self.level)


class LabelClass(Enum):
    KNOWN = "Known"
    PARTIAL = "Partial"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class LabelPrior:
    """Subset of leaves with known lineage labels."""

    labels: tuple[str, ...]
    labeled: frozenset[int]

    def __post_init__(self):
        if not self.labeled <= set(range(len(self.labels))):
            raise DataError("labeled set must be leaf indices")

    @property
    def kappa(self) -> float:
        return len(self.labeled) / len(self.labels)

    @classmethod
    def random(cls, labels, kappa: float, seed: int) -> "LabelPrior":
        """Uniformly chosen floor(kappa * n) labeled leaves."""
        labels = tuple(labels)
        if not 0.0 <= kappa <= 1.0:
            raise DataError("kappa must lie in [0, 1]")
        n = len(labels)
        count = int(math.floor(kappa * n))
        rng = stream(seed, SAMPLING, 1)
        picked = rng.choice(n, size=count, replace=False)
        return cls(labels, frozenset(int(i) for i in picked))

    def reindexed(self, labels) -> "LabelPrior":
        lookup = {l: (i in self.labeled) for i, l in enumerate(self.labels)}
        missing = [l for l in labels if l not in lookup]
        if missing:
            raise DataError(f"prior does not cover labels {missing}")
        return LabelPrior(
            tuple(labels),
            frozenset(i for i, l in enumerate(labels) if lookup[l]),
        )


def classify_by_partition(quartet, prior: PartitionPrior):
    """Clade-multiplicity composition of a quartet plus whether the prior
    resolves its topology (compositions (2,2) and (2,1,1) do)."""
    q = _sorted_quartet(quartet)
    counts: dict[int, int] = {}
    for i in q:
        if i >= len(prior.clade_of):
            raise QuartetError(f"leaf index {i} not covered by the prior")
        counts[prior.clade_of[i]] = counts.get(prior.clade_of[i], 0) + 1
    composition = tuple(sorted(counts.values(), reverse=True))
    return composition, composition in RESOLVABLE


def resolve_from_partition(quartet, prior: PartitionPrior) -> QuartetTopology:
    """Topology implied by clade membership: co-clade leaves are siblings.
    Only valid for resolvable compositions."""
    q = _sorted_quartet(quartet)
    composition, known = classify_by_partition(q, prior)
    if not known:
        raise QuartetError(f"composition {composition} is not resolvable")
    clades = [prior.clade_of[i] for i in q]
    if composition == (2, 2):
        partner = next(j for j in range(1, 4) if clades[j] == clades[0])
    else:
        pair = [j for j in range(4) if clades.count(clades[j]) == 2]
        # either position 0 sits in the co-clade pair, or the pair's
        # complement {0, partner} determines the same pairing
        partner = pair[1] if 0 in pair else ({1, 2, 3} - set(pair)).pop()
    return QuartetTopology(partner - 1)


def classify_by_labels(quartet, prior: LabelPrior) -> LabelClass:
    q = _sorted_quartet(quartet)
    hits = sum(1 for i in q if i in prior.labeled)
    if hits == 4:
        return LabelClass.KNOWN
    if hits == 0:
        return LabelClass.UNKNOWN
    return LabelClass.PARTIAL


# --------------------------------------------------------------------------- #
# closed-form and exact proportions
# --------------------------------------------------------------------------- #


def theoretical_partition_proportions(k: int) -> dict[tuple, Fraction]:
    """Probability of each clade-composition when four leaves draw their
    clades i.i.d. uniformly from k clades.  Exact rationals, summing to 1."""
    if k < 2:
        raise DataError("need k >= 2 clades")
    k3 = Fraction(k**3)
    return {
        (4,): Fraction(1) / k3,
        (3, 1): Fraction(4 * (k - 1)) / k3,
        (2, 2): Fraction(3 * (k - 1)) / k3,
        (2, 1, 1): Fraction(6 * (k - 1) * (k - 2)) / k3,
        (1, 1, 1, 1): Fraction((k - 1) * (k - 2) * (k - 3)) / k3,
    }


@dataclass(frozen=True)
class KnownQuartetCounts:
    n: int
    total: int
    count_22: int
    count_211: int

    @property
    def known(self) -> int:
        return self.count_22 + self.count_211

    @property
    def proportion(self) -> float:
        return self.known / self.total


def exact_known_counts(sizes_or_tree, level: int | None = None) -> KnownQuartetCounts:
    """Exact count of resolvable quartets given clade sizes (or a rooted tree
    plus a branching level to derive them from)."""
    if isinstance(sizes_or_tree, Tree):
        if level is None:
            raise DataError("a tree argument needs a level")
        sizes = PartitionPrior.from_tree_level(sizes_or_tree, level).clade_sizes()
    else:
        sizes = [int(s) for s in sizes_or_tree]
    if any(s < 1 for s in sizes):
        raise DataError("clade sizes must be >= 1")
    n = sum(sizes)
    pairs = [math.comb(s, 2) for s in sizes]
    count_22 = sum(
        pairs[a] * pairs[b] for a in range(len(sizes)) for b in range(a + 1, len(sizes))
    )
    count_211 = 0
    for a in range(len(sizes)):
        singles = [sizes[b] for b in range(len(sizes)) if b != a]
        cross = (sum(singles) ** 2 - sum(s * s for s in singles)) // 2
        count_211 += pairs[a] * cross
    return KnownQuartetCounts(n, math.comb(n, 4), count_22, count_211)


def balanced_unknown_fraction(level: int, exact_n: int | None = None) -> float:
    """Fraction of quartets left unresolved by a level-``level`` clade prior
    on a full balanced binary tree.

    Without ``exact_n`` this is the large-tree limit: 0.625 at level 1 and
    1/2**(3L) + 1/2**(2L-2) for deeper levels.  With ``exact_n`` the exact
    complement of the resolvable-quartet proportion is returned instead.
    """
    if level < 1:
        raise DataError("level must be >= 1")
    if exact_n is not None:
        k = 2**level
        if exact_n % k != 0:
            raise DataError(f"{exact_n} leaves do not split into {k} equal clades")
        counts = exact_known_counts([exact_n // k] * k)
        return 1.0 - counts.proportion
    if level == 1:
        return 0.625
    return 2.0 ** (-3 * level) + 2.0 ** (2 - 2 * level)


@dataclass(frozen=True)
class LabelFractions:
    known: float
    partial: float
    unknown: float
    counts: dict | None = None


def labeled_fraction_curve(kappa: float, n: int | None = None) -> LabelFractions:
    """Known/partial/unknown quartet fractions at labeled-leaf fraction kappa.

    Asymptotically known = kappa**4 and unknown = (1-kappa)**4; with ``n``
    given, exact counts use ell = floor(kappa * n) labeled leaves.
    """
    if not 0.0 <= kappa <= 1.0:
        raise DataError("kappa must lie in [0, 1]")
    if n is None:
        known = kappa**4
        unknown = (1.0 - kappa) ** 4
        return LabelFractions(known, 1.0 - known - unknown, unknown)
    ell = int(math.floor(kappa * n))
    total = math.comb(n, 4)
    known = math.comb(ell, 4)
    unknown = math.comb(n - ell, 4)
    partial = total - known - unknown
    return LabelFractions(
        known / total,
        partial / total,
        unknown / total,
        counts={"known": known, "partial": partial, "unknown": unknown, "total": total},
    )

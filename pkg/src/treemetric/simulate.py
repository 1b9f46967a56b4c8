"""Synthetic lineage datasets.

A dataset is built in stages: a binary topology, random edge lengths, signal
features diffused along the tree (each child state adds an independent
zero-mean Gaussian increment whose variance is the edge length), train/test
replicates of the signals, plus two kinds of distractor columns: unstructured
Gaussian noise and features diffused on *alternative* trees over leaf
partitions.  Every stage draws from its own seeded stream, so a config fully
determines the dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import rng
from .errors import ConfigError, DataError, DegenerateInputError
from .treeio import FeatureTable
from .trees import Tree

__all__ = [
    "SimulationConfig",
    "Dataset",
    "full_binary_topology",
    "random_binary_topology",
    "sample_edge_lengths",
    "brownian_signals",
    "sigma_bar_signal",
    "gaussian_noise_features",
    "alternative_tree_noise",
    "make_supervised_replicate",
    "simulate_dataset",
    "empirical_distance_matrix",
]


@dataclass(frozen=True)
class SimulationConfig:
    n_leaves: int
    w_max: float
    n_signal: int
    n_noise: int = 0
    n_altsig: int = 0
    alpha: float = 0.0
    beta: float = 0.0
    alt_partitions: tuple[float, ...] = (1.0,)
    n_alt_trees_per_partition: int = 1
    topology: str = "balanced"
    seed: int = 0

    def __post_init__(self):
        if self.n_leaves < 4:
            raise ConfigError("need at least 4 leaves")
        if self.w_max <= 1.0:
            raise ConfigError("w_max must exceed 1")
        if self.n_signal < 1:
            raise ConfigError("need at least one signal feature")
        if min(self.n_noise, self.n_altsig) < 0 or min(self.alpha, self.beta) < 0:
            raise ConfigError("feature counts and scales must be nonnegative")
        if self.topology not in ("balanced", "random"):
            raise ConfigError(f"unknown topology kind {self.topology!r}")
        if self.topology == "balanced" and 2 ** int(math.log2(self.n_leaves)) != self.n_leaves:
            raise ConfigError("balanced topology needs a power-of-two leaf count")
        if self.n_altsig > 0:
            if abs(sum(self.alt_partitions) - 1.0) > 1e-9:
                raise ConfigError("partition fractions must sum to 1")
            if self.n_alt_trees_per_partition < 1:
                raise ConfigError("need at least one alternative tree per partition")

    @property
    def n_alt_columns(self) -> int:
        if self.n_altsig == 0:
            return 0
        return len(self.alt_partitions) * self.n_alt_trees_per_partition * self.n_altsig

    @property
    def total_features(self) -> int:
        return self.n_signal + self.n_noise + self.n_alt_columns

    @property
    def snr(self) -> float:
        distractors = self.n_noise + self.n_alt_columns
        return math.inf if distractors == 0 else self.n_signal / distractors

    def as_dict(self) -> dict:
        d = asdict(self)
        d["alt_partitions"] = list(self.alt_partitions)
        return d


@dataclass
class Dataset:
    """Ground-truth tree plus train/test feature tables and the alternative
    trees used for the structured distractor columns."""

    tree: Tree
    train: FeatureTable
    test: FeatureTable
    alt_trees: list[Tree] = field(default_factory=list)
    config: SimulationConfig | None = None

    @property
    def roles(self) -> list[str] | None:
        return self.train.roles


# --------------------------------------------------------------------------- #
# topology and lengths
# --------------------------------------------------------------------------- #


def _leaf_name(i: int, n: int) -> str:
    width = max(2, len(str(n - 1)))
    return f"L{i:0{width}d}"


def full_binary_topology(depth: int) -> Tree:
    """Rooted complete binary tree with 2**depth leaves and unit lengths."""
    if depth < 2:
        raise DataError("need depth >= 2 (at least 4 leaves)")
    n_leaves = 2**depth
    n_nodes = 2 * n_leaves - 1
    edges = []
    next_internal = [n_leaves]

    def build(level: int) -> int:
        if level == depth:
            node = build.leaf_counter
            build.leaf_counter += 1
            return node
        left = build(level + 1)
        right = build(level + 1)
        node = next_internal[0]
        next_internal[0] += 1
        edges.append((node, left, 1.0))
        edges.append((node, right, 1.0))
        return node

    build.leaf_counter = 0
    root = build(0)
    labels = tuple(_leaf_name(i, n_leaves) for i in range(n_leaves))
    return Tree(n_nodes, tuple(edges), labels, root)


def random_binary_topology(n_leaves: int, seed: int) -> Tree:
    """Rooted binary tree grown by repeatedly splitting a uniformly chosen
    pendant edge; unit lengths."""
    if n_leaves < 4:
        raise DataError("need at least 4 leaves")
    gen = rng.stream(seed, rng.TOPOLOGY)
    # grow with scratch ids: 0 = root; leaves/internals appended as created
    edges: dict[int, tuple[int, int]] = {}  # edge id -> (upper, lower)
    nodes = 3
    edges[0] = (0, 1)
    edges[1] = (0, 2)
    leaves = {1, 2}
    pendant = [0, 1]
    next_edge = 2
    while len(leaves) < n_leaves:
        pick = pendant[int(gen.integers(len(pendant)))]
        upper, leaf = edges[pick]
        mid, new_leaf = nodes, nodes + 1
        nodes += 2
        edges[pick] = (upper, mid)
        edges[next_edge] = (mid, leaf)
        edges[next_edge + 1] = (mid, new_leaf)
        leaves.add(new_leaf)
        # the split edge is pendant only if its lower end still is a leaf
        pendant.remove(pick)
        pendant.extend([next_edge, next_edge + 1])
        next_edge += 2

    leaf_ids = sorted(leaves)
    remap = {old: new for new, old in enumerate(leaf_ids)}
    internal_ids = [u for u in range(nodes) if u not in leaves]
    for new, old in enumerate(internal_ids):
        remap[old] = len(leaf_ids) + new
    tree_edges = tuple(
        (remap[a], remap[b], 1.0) for a, b in edges.values()
    )
    labels = tuple(_leaf_name(i, n_leaves) for i in range(n_leaves))
    return Tree(nodes, tree_edges, labels, remap[0])


def sample_edge_lengths(tree: Tree, w_max: float, seed: int) -> Tree:
    """Independent Uniform(1, w_max) length per edge."""
    if w_max <= 1.0:
        raise DataError("w_max must exceed 1")
    gen = rng.stream(seed, rng.EDGE_LENGTHS)
    return tree.with_lengths(gen.uniform(1.0, w_max, size=len(tree.edges)))


# --------------------------------------------------------------------------- #
# features
# --------------------------------------------------------------------------- #


def _diffuse(tree: Tree, n_features: int, gen: np.random.Generator, m: int | None):
    """Brownian states at the leaves; shape (n_leaves, f) or (m, n_leaves, f).

    The anchor state is zero; each edge adds N(0, length) per feature.  Leaf
    differences depend only on path lengths, so an unrooted tree may anchor
    anywhere; the root is used when present.
    """
    anchor = tree.root if tree.root is not None else tree.n_nodes - 1
    shape = (n_features,) if m is None else (m, n_features)
    adj = tree.adjacency()
    lengths = [w for _a, _b, w in tree.edges]
    states: dict[int, np.ndarray] = {anchor: np.zeros(shape)}
    stack = [anchor]
    while stack:
        u = stack.pop()
        for v, eidx in adj[u]:
            if v in states:
                continue
            states[v] = states[u] + gen.normal(0.0, math.sqrt(lengths[eidx]), size=shape)
            stack.append(v)
    leaves = [states[i] for i in range(tree.n_leaves)]
    return np.stack(leaves, axis=0) if m is None else np.stack(leaves, axis=1)


def brownian_signals(tree: Tree, n_signal: int, seed: int, replicates: int | None = None):
    """Signal features diffused along the tree.

    Returns a FeatureTable of leaf rows; with ``replicates`` an array of
    shape (replicates, n_leaves, n_signal) of i.i.d. realizations instead.
    """
    gen = rng.stream(seed, rng.SIGNALS)
    values = _diffuse(tree, n_signal, gen, replicates)
    if replicates is not None:
        return values
    cols = [f"sig{j:03d}" for j in range(n_signal)]
    return FeatureTable(list(tree.leaf_labels), cols, values, ["signal"] * n_signal)


def sigma_bar_signal(values: np.ndarray) -> float:
    """Mean over columns of the per-column standard deviation across rows."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 0.0
    return float(values.std(axis=0).mean())


def gaussian_noise_features(
    row_labels, n_noise: int, alpha: float, sigma_bar: float, seed: int
) -> FeatureTable:
    """Unstructured i.i.d. N(0, (alpha * sigma_bar)^2) columns."""
    if alpha < 0:
        raise DataError("alpha must be nonnegative")
    gen = rng.stream(seed, rng.NOISE)
    values = gen.normal(0.0, alpha * sigma_bar, size=(len(row_labels), n_noise))
    cols = [f"noise{j:03d}" for j in range(n_noise)]
    return FeatureTable(list(row_labels), cols, values, ["noise"] * n_noise)


def _partition_sizes(n: int, fractions) -> list[int]:
    bounds = np.round(np.cumsum(fractions) * n).astype(int)
    sizes = np.diff(np.concatenate([[0], bounds])).tolist()
    if sum(sizes) != n:
        sizes[-1] += n - sum(sizes)
    return [int(s) for s in sizes]


def _alt_structures(leaf_labels, config: SimulationConfig, seed: int):
    """Alternative trees plus each tree's member-leaf order.  Structure only;
    feature values are drawn separately so replicates can share trees."""
    labels = list(leaf_labels)
    gen = rng.stream(seed, rng.ALT_TREES)
    order = [labels[i] for i in gen.permutation(len(labels))]
    sizes = _partition_sizes(len(labels), config.alt_partitions)
    if min(sizes) < 4:
        raise DegenerateInputError(f"partition sizes {sizes} include one below 4 leaves")
    w_alt = config.beta * config.w_max
    lo = min(1.0, w_alt)
    structures = []
    start = 0
    for p, size in enumerate(sizes):
        members = order[start : start + size]
        start += size
        for t in range(config.n_alt_trees_per_partition):
            topo = random_binary_topology(size, int(gen.integers(2**63)))
            topo = topo.relabeled(dict(zip(topo.leaf_labels, members)))
            lengths = gen.uniform(lo, w_alt, size=len(topo.edges)) if w_alt > lo \
                else np.full(len(topo.edges), w_alt)
            structures.append((p, t, topo.with_lengths(lengths), members))
    return structures


def _alt_columns(leaf_labels, structures, n_altsig, sigma_bar, seed: int) -> FeatureTable:
    labels = list(leaf_labels)
    index = {lbl: i for i, lbl in enumerate(labels)}
    gen = rng.stream(seed, rng.ALT_SIGNALS_TRAIN)
    blocks = []
    cols = []
    for p, t, tree, members in structures:
        values = np.empty((len(labels), n_altsig))
        # non-members carry plain noise at the signal scale so every leaf has
        # a complete feature vector
        values[:] = gen.normal(0.0, sigma_bar, size=values.shape)
        diffused = _diffuse(tree, n_altsig, gen, None)
        for row, lbl in zip(diffused, tree.leaf_labels):
            values[index[lbl]] = row
        blocks.append(values)
        cols.extend(f"alt{p}t{t}_{j:03d}" for j in range(n_altsig))
    stacked = np.hstack(blocks) if blocks else np.empty((len(labels), 0))
    return FeatureTable(labels, cols, stacked, ["altsig"] * len(cols))


def alternative_tree_noise(leaf_labels, config: SimulationConfig, seed: int,
                           sigma_bar: float = 1.0):
    """Structured distractor columns diffused on independent random trees
    over a seeded partition of the leaves.  Non-member leaves are filled with
    N(0, sigma_bar^2) noise so every row is complete.  Returns
    (table, alt trees)."""
    structures = _alt_structures(leaf_labels, config, seed)
    table = _alt_columns(leaf_labels, structures, config.n_altsig, sigma_bar, seed)
    return table, [s[2] for s in structures]


def make_supervised_replicate(signals: FeatureTable, seed: int) -> FeatureTable:
    """Signals plus a small independent perturbation, N(0, (0.1 sigma_bar)^2)
    per entry, giving a second draw of the same leaves for train/test splits."""
    gen = rng.stream(seed, rng.REPLICATE_TRAIN)
    scale = 0.1 * sigma_bar_signal(signals.values)
    out = signals.copy()
    out.values = signals.values + gen.normal(0.0, scale, size=signals.values.shape)
    return out


def simulate_dataset(config: SimulationConfig) -> Dataset:
    """Assemble a full dataset: topology -> edge lengths -> signals ->
    train/test replicates, with noise and alternative-tree columns drawn
    independently for each replicate."""
    seed = config.seed
    if config.topology == "balanced":
        topo = full_binary_topology(int(math.log2(config.n_leaves)))
    else:
        topo = random_binary_topology(config.n_leaves, seed)
    tree = sample_edge_lengths(topo, config.w_max, seed)
    signals = brownian_signals(tree, config.n_signal, seed)
    sbar = sigma_bar_signal(signals.values)

    train = make_supervised_replicate(signals, rng.stream(seed, rng.REPLICATE_TRAIN).integers(2**63))
    test = make_supervised_replicate(signals, rng.stream(seed, rng.REPLICATE_TEST).integers(2**63))

    labels = list(tree.leaf_labels)
    alt_trees: list[Tree] = []
    for which, table in (("train", train), ("test", test)):
        parts = [table]
        if config.n_noise > 0:
            noise_seed = rng.stream(seed, rng.NOISE if which == "train" else rng.NOISE_TEST)
            parts.append(gaussian_noise_features(labels, config.n_noise, config.alpha,
                                                 sbar, int(noise_seed.integers(2**63))))
        if config.n_altsig > 0:
            structures = _alt_structures(labels, config, seed)
            stream_id = rng.ALT_SIGNALS_TRAIN if which == "train" else rng.ALT_SIGNALS_TEST
            draw_seed = int(rng.stream(seed, stream_id).integers(2**63))
            parts.append(_alt_columns(labels, structures, config.n_altsig, sbar, draw_seed))
            if not alt_trees:
                alt_trees = [s[2] for s in structures]
        combined = parts[0]
        for extra in parts[1:]:
            combined = combined.hstack(extra)
        if which == "train":
            train_full = combined
        else:
            test_full = combined
    return Dataset(tree, train_full, test_full, alt_trees, config)


def empirical_distance_matrix(replicates) -> np.ndarray:
    """Mean squared Euclidean distance between leaves over i.i.d. replicates:
    entry (i, j) averages ||X_m(i) - X_m(j)||^2 over m."""
    if isinstance(replicates, np.ndarray):
        if replicates.ndim != 3:
            raise DataError("replicate array must have shape (m, n, d)")
        stack = replicates.astype(float)
    else:
        arrays = []
        for rep in replicates:
            arrays.append(rep.values if isinstance(rep, FeatureTable) else np.asarray(rep, dtype=float))
        if not arrays:
            raise DegenerateInputError("need at least one replicate")
        if len({a.shape for a in arrays}) != 1:
            raise DataError("replicates must share one shape")
        stack = np.stack(arrays)
    m, n, _d = stack.shape
    out = np.zeros((n, n))
    for i in range(n):
        diff = stack[:, i : i + 1, :] - stack[:, i + 1 :, :]
        if diff.shape[1]:
            out[i, i + 1 :] = (diff**2).sum(axis=2).mean(axis=0)
    return out + out.T

"""Edge-weighted, leaf-labeled trees.

Leaves occupy node indices ``0 .. n_leaves-1`` and are the only named nodes;
internal nodes are anonymous indices.  A tree is *rooted* when ``root`` names
a (degree-2, for binary trees) internal node, otherwise it is unrooted.  All
operations are pure functions over immutable trees.

Distance matrices throughout the package are plain ``numpy`` arrays whose
row/column order follows ``tree.leaf_labels`` (or an explicitly passed label
list); there is no wrapper class.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DataError, DegenerateInputError, QuartetError

__all__ = [
    "Tree",
    "Bipartition",
    "QuartetTopology",
    "FourPointResult",
    "TreeStats",
    "path_distance_matrix",
    "min_edge_length",
    "check_four_point",
    "induced_quartet_topology",
    "topology_from_sums",
    "topology_codes",
    "bipartitions",
    "tree_stats",
]


class QuartetTopology(Enum):
    """Unrooted topology of a quartet, relative to its sorted leaf indices
    (a < b < c < d).  ``AB_CD`` pairs the two smallest indices, and so on."""

    AB_CD = 0
    AC_BD = 1
    AD_BC = 2
    UNRESOLVED = 3


# Sibling index pairs for each resolved topology code, in sorted-quartet
# positions: code k pairs position 0 with position k+1.
_PAIRINGS = ((0, 1, 2, 3), (0, 2, 1, 3), (0, 3, 1, 2))


@dataclass(frozen=True)
class Tree:
    """Connected acyclic graph with nonnegative edge lengths.

    Parameters
    ----------
    n_nodes : total node count; leaves are nodes ``0 .. len(leaf_labels)-1``.
    edges : tuples ``(node_a, node_b, length)``; exactly ``n_nodes - 1`` of them.
    leaf_labels : unique name per leaf, in leaf-index order.
    root : index of the root node for rooted trees, else ``None``.
    """

    n_nodes: int
    edges: tuple[tuple[int, int, float], ...]
    leaf_labels: tuple[str, ...]
    root: int | None = None

    def __post_init__(self):
        n = self.n_nodes
        if len(self.edges) != n - 1:
            raise DataError(
                f"tree with {n} nodes must have {n - 1} edges, got {len(self.edges)}"
            )
        if len(set(self.leaf_labels)) != len(self.leaf_labels):
            raise DataError("leaf labels must be pairwise distinct")
        if len(self.leaf_labels) > n:
            raise DataError("more leaf labels than nodes")
        deg = [0] * n
        seen = set()
        for a, b, w in self.edges:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise DataError(f"invalid edge ({a}, {b})")
            if w < 0 or not math.isfinite(w):
                raise DataError(f"edge ({a}, {b}) has invalid length {w}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise DataError(f"duplicate edge ({a}, {b})")
            seen.add(key)
            deg[a] += 1
            deg[b] += 1
        for leaf in range(len(self.leaf_labels)):
            if n > 1 and deg[leaf] != 1:
                raise DataError(f"leaf node {leaf} has degree {deg[leaf]} != 1")
        if self.root is not None and not (0 <= self.root < n):
            raise DataError(f"root index {self.root} out of range")
        # connectivity: |edges| = n-1 plus acyclicity <=> connected; check by BFS
        if n > 1 and len(self._reach(0)) != n:
            raise DataError("tree is not connected")

    # -- basic structure ------------------------------------------------- #

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_labels)

    @property
    def rooted(self) -> bool:
        return self.root is not None

    def adjacency(self) -> list[list[tuple[int, int]]]:
        """Per-node list of ``(neighbor, edge_index)``."""
        adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n_nodes)]
        for idx, (a, b, _w) in enumerate(self.edges):
            adj[a].append((b, idx))
            adj[b].append((a, idx))
        return adj

    def degrees(self) -> list[int]:
        deg = [0] * self.n_nodes
        for a, b, _w in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    def is_binary(self) -> bool:
        """Internal degree 3 everywhere (unrooted), or degree-2 root plus
        degree-3 internals (rooted)."""
        deg = self.degrees()
        for node in range(self.n_leaves, self.n_nodes):
            want = 2 if node == self.root else 3
            if deg[node] != want:
                return False
        return True

    def edge_lengths(self) -> np.ndarray:
        return np.array([w for _a, _b, w in self.edges], dtype=float)

    def with_lengths(self, lengths) -> "Tree":
        """Same topology with replaced edge lengths (aligned with ``edges``)."""
        lengths = np.asarray(lengths, dtype=float)
        if lengths.shape != (len(self.edges),):
            raise DataError("length vector does not match edge count")
        new_edges = tuple(
            (a, b, float(w)) for (a, b, _), w in zip(self.edges, lengths)
        )
        return Tree(self.n_nodes, new_edges, self.leaf_labels, self.root)

    def relabeled(self, mapping) -> "Tree":
        """Rename leaves through ``mapping`` (old label -> new label)."""
        return Tree(
            self.n_nodes,
            self.edges,
            tuple(mapping[lbl] for lbl in self.leaf_labels),
            self.root,
        )

    def _reach(self, start: int) -> set[int]:
        adj = self.adjacency()
        seen = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v, _ in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return seen

    # -- views ------------------------------------------------------------ #

    def unrooted(self) -> "Tree":
        """Unrooted view: a degree-2 root is suppressed and its two incident
        edges merged (lengths added).  Already-unrooted trees are returned
        unchanged."""
        if self.root is None:
            return self
        deg = self.degrees()
        if deg[self.root] != 2:
            return Tree(self.n_nodes, self.edges, self.leaf_labels, None)
        r = self.root
        incident = [(idx, e) for idx, e in enumerate(self.edges) if r in e[:2]]
        (i1, (a1, b1, w1)), (i2, (a2, b2, w2)) = incident
        u = a1 if b1 == r else b1
        v = a2 if b2 == r else b2
        kept = [e for idx, e in enumerate(self.edges) if idx not in (i1, i2)]
        kept.append((u, v, w1 + w2))
        # drop the root index, compacting indices above it
        remap = lambda x: x if x < r else x - 1
        new_edges = tuple((remap(a), remap(b), w) for a, b, w in kept)
        return Tree(self.n_nodes - 1, new_edges, self.leaf_labels, None)


@dataclass(frozen=True)
class Bipartition:
    """Nontrivial leaf bipartition, canonicalized so the side containing
    leaf 0 is ``side_a``.  Stored as a bitmask over leaf indices for fast
    set algebra."""

    mask: int
    n_leaves: int

    @classmethod
    def from_mask(cls, mask: int, n_leaves: int) -> "Bipartition":
        full = (1 << n_leaves) - 1
        if mask & 1 == 0:
            mask = full & ~mask
        if mask == 0 or mask == full:
            raise DataError("bipartition sides must both be nonempty")
        return cls(mask, n_leaves)

    @property
    def side_a(self) -> frozenset[int]:
        return frozenset(i for i in range(self.n_leaves) if self.mask >> i & 1)

    @property
    def side_b(self) -> frozenset[int]:
        return frozenset(i for i in range(self.n_leaves) if not self.mask >> i & 1)

    def __repr__(self):
        a = sorted(self.side_a)
        b = sorted(self.side_b)
        return f"Bipartition({a} | {b})"


@dataclass(frozen=True)
class FourPointResult:
    passed: bool
    max_violation: float
    worst_quartet: tuple[int, int, int, int] | None


@dataclass(frozen=True)
class TreeStats:
    colless: float
    diameter: float
    depth_mean: float
    depth_sd: float
    faiths_pd: float
    mean_pairwise_distance: float


# --------------------------------------------------------------------------- #
# path metrics
# --------------------------------------------------------------------------- #


def _distances_from(tree: Tree, start: int, adj=None) -> np.ndarray:
    if adj is None:
        adj = tree.adjacency()
    dist = np.full(tree.n_nodes, np.nan)
    dist[start] = 0.0
    stack = [start]
    lengths = [w for _a, _b, w in tree.edges]
    while stack:
        u = stack.pop()
        for v, eidx in adj[u]:
            if np.isnan(dist[v]):
                dist[v] = dist[u] + lengths[eidx]
                stack.append(v)
    return dist


def path_distance_matrix(tree: Tree) -> np.ndarray:
    """Leaf-by-leaf matrix of path-length distances, rows/columns in
    ``tree.leaf_labels`` order.  Symmetric with zero diagonal; satisfies the
    four-point condition up to accumulated rounding."""
    L = tree.n_leaves
    if L < 2:
        raise DegenerateInputError("path distances need at least 2 leaves")
    adj = tree.adjacency()
    out = np.zeros((L, L))
    for i in range(L):
        out[i] = _distances_from(tree, i, adj)[:L]
    return (out + out.T) / 2.0  # exact symmetry regardless of traversal order


def min_edge_length(tree: Tree) -> float:
    """Smallest edge length over all pendant and internal edges."""
    if not tree.edges:
        raise DegenerateInputError("tree has no edges")
    return float(min(w for _a, _b, w in tree.edges))


def _quartet_sum_arrays(matrix: np.ndarray, quartets: np.ndarray):
    """Stacked (s1, s2, s3) pairing sums for an (m, 4) array of sorted
    quartet indices."""
    a, b, c, d = (quartets[:, i] for i in range(4))
    s1 = matrix[a, b] + matrix[c, d]
    s2 = matrix[a, c] + matrix[b, d]
    s3 = matrix[a, d] + matrix[b, c]
    return s1, s2, s3


def check_four_point(matrix: np.ndarray, tol: float = 1e-9) -> FourPointResult:
    """Verify the four-point condition: for every quartet the two largest of
    the three pairing sums must agree within ``tol``.  Returns the worst
    violation and its quartet."""
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    if matrix.shape != (n, n):
        raise DataError("distance matrix must be square")
    if not np.allclose(matrix, matrix.T, atol=1e-12, rtol=0.0):
        raise DataError("distance matrix must be symmetric")
    if not np.allclose(np.diag(matrix), 0.0, atol=1e-12):
        raise DataError("distance matrix must have a zero diagonal")
    if n < 4:
        return FourPointResult(True, 0.0, None)
    quartets = np.array(list(itertools.combinations(range(n), 4)))
    sums = np.stack(_quartet_sum_arrays(matrix, quartets), axis=1)
    sums.sort(axis=1)
    gaps = sums[:, 2] - sums[:, 1]  # top1 - top2
    worst = int(np.argmax(gaps))
    max_violation = float(gaps[worst])
    return FourPointResult(
        max_violation <= tol, max_violation, tuple(int(x) for x in quartets[worst])
    )


def topology_from_sums(s1: float, s2: float, s3: float) -> QuartetTopology:
    """Topology whose sibling pairing has the strictly smallest sum; ties
    between the two smallest sums give ``UNRESOLVED``."""
    sums = (s1, s2, s3)
    order = sorted(range(3), key=lambda k: sums[k])
    if sums[order[0]] == sums[order[1]]:
        return QuartetTopology.UNRESOLVED
    return QuartetTopology(order[0])


def topology_codes(matrix: np.ndarray, quartets: np.ndarray) -> np.ndarray:
    """Vectorized ``topology_from_sums`` over an (m, 4) index array; returns
    int codes matching ``QuartetTopology`` values."""
    s1, s2, s3 = _quartet_sum_arrays(matrix, quartets)
    sums = np.stack([s1, s2, s3], axis=1)
    codes = np.argmin(sums, axis=1)
    smallest = sums[np.arange(len(codes)), codes]
    ties = (np.sum(sums == smallest[:, None], axis=1) > 1)
    codes[ties] = QuartetTopology.UNRESOLVED.value
    return codes.astype(np.int64)


def _validated_quartet(tree: Tree, quartet) -> tuple[int, int, int, int]:
    q = tuple(int(i) for i in quartet)
    if len(q) != 4 or len(set(q)) != 4:
        raise QuartetError(f"quartet must hold 4 distinct leaves, got {q}")
    if any(i < 0 or i >= tree.n_leaves for i in q):
        raise QuartetError(f"leaf index out of range in {q}")
    return tuple(sorted(q))


def induced_quartet_topology(tree: Tree, quartet) -> QuartetTopology:
    """Topology induced on four leaves: the sibling pairing minimizing the sum
    of the two within-pair path distances.  ``UNRESOLVED`` on ties, which can
    only arise on non-binary or zero-length-edge trees."""
    a, b, c, d = _validated_quartet(tree, quartet)
    adj = tree.adjacency()
    da = _distances_from(tree, a, adj)
    db = _distances_from(tree, b, adj)
    s1 = da[b] + _distances_from(tree, c, adj)[d]
    s2 = da[c] + db[d]
    s3 = da[d] + db[c]
    return topology_from_sums(s1, s2, s3)


# --------------------------------------------------------------------------- #
# bipartitions and shape statistics
# --------------------------------------------------------------------------- #


def bipartitions(tree: Tree) -> set[Bipartition]:
    """One canonical bipartition per internal edge of the unrooted view.
    A binary unrooted tree on n leaves yields exactly n - 3 of them."""
    t = tree.unrooted()
    L = t.n_leaves
    adj = t.adjacency()
    out: set[Bipartition] = set()
    for a, b, _w in t.edges:
        if a < L or b < L:
            continue  # pendant edge -> trivial split
        # leaves on the a-side of edge (a, b)
        mask = 0
        stack = [a]
        seen = {a, b}
        while stack:
            u = stack.pop()
            if u < L:
                mask |= 1 << u
            for v, _ in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        side = bin(mask).count("1")
        if side >= 2 and L - side >= 2:
            out.add(Bipartition.from_mask(mask, L))
    return out


def _leaf_depths(tree: Tree, lengths) -> np.ndarray:
    adj = tree.adjacency()
    dist = np.full(tree.n_nodes, np.nan)
    dist[tree.root] = 0.0
    stack = [tree.root]
    while stack:
        u = stack.pop()
        for v, eidx in adj[u]:
            if np.isnan(dist[v]):
                dist[v] = dist[u] + lengths[eidx]
                stack.append(v)
    return dist[: tree.n_leaves]


def tree_stats(tree: Tree, unit_lengths: bool = False) -> TreeStats:
    """Shape statistics of a rooted tree.

    Depth statistics use root-to-leaf path lengths on the rooted tree;
    diameter, total branch length, and mean pairwise distance are computed on
    the unrooted view (degree-2 root suppressed).  With ``unit_lengths`` every
    edge length is treated as 1 (after root suppression for the unrooted
    statistics).  The Colless imbalance is normalized by (n-1)(n-2)/2 and is
    only defined for rooted binary trees.
    """
    if tree.root is None:
        raise DataError("tree_stats requires a rooted tree")
    if not tree.is_binary():
        raise DataError("colless imbalance requires a binary tree")
    n = tree.n_leaves
    if n < 3:
        raise DegenerateInputError("tree statistics need at least 3 leaves")

    # Colless: children leaf counts via orientation away from the root.
    adj = tree.adjacency()
    order = []
    parent = {tree.root: None}
    stack = [tree.root]
    while stack:
        u = stack.pop()
        order.append(u)
        for v, _ in adj[u]:
            if v != parent[u]:
                parent[v] = u
                stack.append(v)
    leaves_below = [0] * tree.n_nodes
    children: dict[int, list[int]] = {u: [] for u in range(tree.n_nodes)}
    for u in reversed(order):
        if u < n:
            leaves_below[u] = 1
        if parent[u] is not None:
            children[parent[u]].append(u)
            leaves_below[parent[u]] += leaves_below[u]
    imbalance = sum(
        abs(leaves_below[kids[0]] - leaves_below[kids[1]])
        for u, kids in children.items()
        if len(kids) == 2
    )
    colless = imbalance / (((n - 1) * (n - 2)) / 2)

    rooted_lengths = [1.0 if unit_lengths else w for _a, _b, w in tree.edges]
    depths = _leaf_depths(tree, rooted_lengths)

    flat = tree.unrooted()
    if unit_lengths:
        flat = flat.with_lengths(np.ones(len(flat.edges)))
    dmat = path_distance_matrix(flat)
    iu = np.triu_indices(n, k=1)
    return TreeStats(
        colless=float(colless),
        diameter=float(dmat.max()),
        depth_mean=float(depths.mean()),
        depth_sd=float(depths.std()),
        faiths_pd=float(flat.edge_lengths().sum()),
        mean_pairwise_distance=float(dmat[iu].mean()),
    )

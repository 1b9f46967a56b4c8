"""Distance-based tree building.

Neighbor joining with the standard rate-corrected selection criterion,
Atteson-radius certification, tree path matrices, and nonnegative
least-squares edge-length fitting for a fixed topology.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DataError, DegenerateInputError
from .trees import Tree, min_edge_length, path_distance_matrix

__all__ = [
    "neighbor_joining",
    "AttesonCheck",
    "atteson_certified",
    "path_matrix",
    "NnlsFit",
    "fit_edge_lengths_nnls",
]

log = logging.getLogger(__name__)


def _check_distance_matrix(matrix: np.ndarray, labels) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    n = len(labels)
    if matrix.shape != (n, n):
        raise DataError(f"matrix shape {matrix.shape} does not match {n} labels")
    if not np.isfinite(matrix).all():
        raise DataError("distance matrix contains non-finite entries")
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-9):
        raise DataError("distance matrix must be symmetric")
    return (matrix + matrix.T) / 2.0


def neighbor_joining(matrix: np.ndarray, labels) -> Tree:
    """Agglomerate a distance matrix into an unrooted binary tree.

    Pair selection uses Q(i,j) = (r-2) d(i,j) - R_i - R_j with ties broken by
    the lexicographically smallest position pair; branch lengths follow the
    standard three-point/rate-corrected formulas with negatives clamped to
    zero.  On an additive input the result realizes the input exactly.
    """
    labels = list(labels)
    n = len(labels)
    if n < 3:
        raise DegenerateInputError("neighbor joining needs at least 3 leaves")
    D = _check_distance_matrix(matrix, labels)

    ids = list(range(n))  # tree node id at each working-matrix position
    next_id = n
    edges: list[tuple[int, int, float]] = []
    raw_min = np.inf

    while len(ids) > 3:
        r = len(ids)
        R = D.sum(axis=1)
        Q = (r - 2) * D - R[:, None] - R[None, :]
        np.fill_diagonal(Q, np.inf)
        flat = int(np.argmin(Q))  # first occurrence = smallest (i, j), row-major
        i, j = divmod(flat, r)
        if i > j:
            i, j = j, i
        li = 0.5 * D[i, j] + (R[i] - R[j]) / (2 * (r - 2))
        lj = D[i, j] - li
        raw_min = min(raw_min, li, lj)
        edges.append((next_id, ids[i], max(li, 0.0)))
        edges.append((next_id, ids[j], max(lj, 0.0)))

        merged = 0.5 * (D[i] + D[j] - D[i, j])
        D[i, :] = merged
        D[:, i] = merged
        D[i, i] = 0.0
        keep = [k for k in range(r) if k != j]
        D = D[np.ix_(keep, keep)]
        ids[i] = next_id
        del ids[j]
        next_id += 1

    # resolve the final three nodes around a center
    center = next_id
    next_id += 1
    (a, b, c) = range(3)
    la = 0.5 * (D[a, b] + D[a, c] - D[b, c])
    lb = 0.5 * (D[a, b] + D[b, c] - D[a, c])
    lc = 0.5 * (D[a, c] + D[b, c] - D[a, b])
    raw_min = min(raw_min, la, lb, lc)
    for pos, length in zip((a, b, c), (la, lb, lc)):
        edges.append((center, ids[pos], max(length, 0.0)))
    if raw_min < 0:
        log.debug("neighbor joining clamped negative branch length %.3g", raw_min)
    return Tree(next_id, tuple(edges), tuple(labels), None)


@dataclass(frozen=True)
class AttesonCheck:
    certified: bool
    max_deviation: float
    radius: float


def atteson_certified(matrix: np.ndarray, labels, tree: Tree) -> AttesonCheck:
    """Whether the matrix sits strictly inside the tree's reconstruction
    radius: ||matrix - tree distances||_inf < (min edge length) / 2."""
    if sorted(labels) != sorted(tree.leaf_labels):
        raise DataError("matrix labels do not match tree leaves")
    matrix = _check_distance_matrix(matrix, labels)
    order = [list(labels).index(lbl) for lbl in tree.leaf_labels]
    aligned = matrix[np.ix_(order, order)]
    deviation = float(np.abs(aligned - path_distance_matrix(tree)).max())
    radius = min_edge_length(tree) / 2.0
    return AttesonCheck(deviation < radius, deviation, radius)


def path_matrix(tree: Tree) -> np.ndarray:
    """0/1 matrix with one row per unordered leaf pair (i < j, lexicographic)
    and one column per edge; entry 1 iff the edge lies on the pair's path.
    Multiplying by the edge-length vector gives the vectorized distance
    matrix."""
    L = tree.n_leaves
    adj = tree.adjacency()
    # edge sequence from each leaf to every node, via DFS parent pointers
    rows = []
    for i, j in itertools.combinations(range(L), 2):
        parent_edge = {i: None}
        stack = [i]
        while stack:
            u = stack.pop()
            if u == j:
                break
            for v, eidx in adj[u]:
                if v not in parent_edge:
                    parent_edge[v] = (u, eidx)
                    stack.append(v)
        row = np.zeros(len(tree.edges))
        node = j
        while node != i:
            prev, eidx = parent_edge[node]
            row[eidx] = 1.0
            node = prev
        rows.append(row)
    return np.array(rows)


def _vectorize_matrix(matrix: np.ndarray) -> np.ndarray:
    n = matrix.shape[0]
    iu = np.triu_indices(n, k=1)
    return np.asarray(matrix, dtype=float)[iu]


@dataclass(frozen=True)
class NnlsFit:
    tree: Tree
    residual: float
    iterations: int


def fit_edge_lengths_nnls(topology: Tree, matrix: np.ndarray, labels=None) -> NnlsFit:
    """Least-squares nonnegative edge lengths for a fixed topology.

    Solves min_{E >= 0} ||P E - m||_2 by projected gradient with step
    1/sigma_max(P)^2, warm-started from the clipped unconstrained solution,
    stopping when the relative objective change drops below 1e-10 (or after
    1e5 iterations, which raises :class:`ConvergenceError` carrying the last
    iterate).
    """
    if labels is None:
        labels = topology.leaf_labels
    if sorted(labels) != sorted(topology.leaf_labels):
        raise DataError("matrix labels do not match topology leaves")
    matrix = _check_distance_matrix(matrix, labels)
    order = [list(labels).index(lbl) for lbl in topology.leaf_labels]
    m_vec = _vectorize_matrix(matrix[np.ix_(order, order)])
    P = path_matrix(topology)

    sigma_max = np.linalg.norm(P, 2)
    step = 1.0 / (sigma_max**2)
    lengths = np.clip(np.linalg.lstsq(P, m_vec, rcond=None)[0], 0.0, None)

    def objective(E):
        return float(np.linalg.norm(P @ E - m_vec))

    prev = objective(lengths)
    max_iter = 100_000
    for iteration in range(1, max_iter + 1):
        grad = P.T @ (P @ lengths - m_vec)
        lengths = np.clip(lengths - step * grad, 0.0, None)
        current = objective(lengths)
        if prev == 0.0 or abs(prev - current) / max(prev, 1e-300) < 1e-10:
            return NnlsFit(topology.with_lengths(lengths), current, iteration)
        prev = current
    raise ConvergenceError(
        f"edge-length fit did not converge in {max_iter} iterations",
        lengths=lengths,
        residual=prev,
    )

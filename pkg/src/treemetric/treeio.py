"""Newick parsing/serialization and CSV ingestion for feature tables.

Newick dialect: branch lengths optional (default 1), internal labels ignored
on parse, bracketed comments skipped, trees end with ';'.  Serialization is
deterministic: children are ordered by their smallest contained leaf label
and lengths are printed with fixed precision, so equal trees produce
byte-identical text.

Feature CSV layout: a header row ``leaf,<feature names...>``, an optional
second row ``#roles,<role...>`` tagging each column as one of
``signal | noise | altsig | unknown``, then one row per leaf.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateInputError, IngestionError, NewickParseError
from .rng import PERMUTE, stream
from .trees import Tree

__all__ = [
    "FeatureTable",
    "ROLES",
    "parse_newick",
    "write_newick",
    "read_newick_file",
    "write_newick_file",
    "load_feature_csv",
    "save_feature_csv",
    "aggregate_by_group",
    "permute_dataset",
]

ROLES = ("signal", "noise", "altsig", "unknown")


# --------------------------------------------------------------------------- #
# Newick
# --------------------------------------------------------------------------- #


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, message: str):
        raise NewickParseError(message, self.pos)

    def skip_space(self):
        text, n = self.text, len(self.text)
        while self.pos < n:
            ch = text[self.pos]
            if ch.isspace():
                self.pos += 1
            elif ch == "[":
                close = text.find("]", self.pos)
                if close < 0:
                    self.error("unterminated [comment]")
                self.pos = close + 1
            else:
                return

    def peek(self) -> str:
        self.skip_space()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def take(self) -> str:
        ch = self.peek()
        self.pos += 1
        return ch

    def token(self) -> str:
        """Read a label/number token up to the next structural character."""
        self.skip_space()
        start = self.pos
        text, n = self.text, len(self.text)
        while self.pos < n and text[self.pos] not in "(),:;[" and not text[self.pos].isspace():
            self.pos += 1
        return text[start : self.pos]


def _parse_subtree(sc: _Scanner, nodes: list):
    """Returns (children, label, length) node records appended to ``nodes``;
    each record is (children_indices, label, length)."""
    if sc.peek() == "(":
        sc.take()
        children = [_parse_subtree(sc, nodes)]
        while sc.peek() == ",":
            sc.take()
            children.append(_parse_subtree(sc, nodes))
        if sc.peek() != ")":
            sc.error("expected ',' or ')'")
        sc.take()
        sc.token()  # internal label, ignored
        length = _parse_length(sc)
        nodes.append((children, None, length))
    else:
        label = sc.token()
        if not label:
            sc.error("expected leaf label")
        length = _parse_length(sc)
        nodes.append(((), label, length))
    return len(nodes) - 1


def _parse_length(sc: _Scanner) -> float:
    if sc.peek() != ":":
        return 1.0
    sc.take()
    tok = sc.token()
    try:
        value = float(tok)
    except ValueError:
        sc.error(f"invalid branch length {tok!r}")
    if not math.isfinite(value):
        sc.error(f"non-finite branch length {tok!r}")
    return value


def parse_newick(text: str) -> Tree:
    """Parse Newick text into a :class:`Tree`.

    The top-level node becomes the root when it has exactly two children;
    with three or more the tree is unrooted.  Unary internal nodes are
    collapsed, adding their branch lengths.  Missing lengths default to 1.
    """
    sc = _Scanner(text)
    records: list = []
    top = _parse_subtree(sc, records)
    if sc.peek() != ";":
        sc.error("expected ';'")
    sc.take()
    sc.skip_space()
    if sc.pos != len(sc.text):
        sc.error("trailing garbage after ';'")

    # collapse unary chains (children==1), summing lengths
    def resolve(idx: int, extra: float):
        children, label, length = records[idx]
        while len(children) == 1:
            extra += length
            children, label, length = records[children[0]]
        return children, label, length + extra, idx

    leaf_labels: list[str] = []
    seen: dict[str, int] = {}
    entries = []  # (node_record, resolved_children, label, length)

    def build(idx: int):
        children, label, length, _ = resolve(idx, 0.0)
        if not children:
            if label in seen:
                raise NewickParseError(f"duplicate leaf label {label!r}", sc.pos)
            seen[label] = len(leaf_labels)
            leaf_labels.append(label)
            return ("leaf", seen[label], length)
        return ("internal", [build(c) for c in children], length)

    shape = build(top)
    n_leaves = len(leaf_labels)
    edges: list[tuple[int, int, float]] = []
    counter = [n_leaves]

    def realize(node) -> tuple[int, float]:
        if node[0] == "leaf":
            return node[1], node[2]
        idx = counter[0]
        counter[0] += 1
        for child in node[1]:
            cid, clen = realize(child)
            edges.append((idx, cid, clen))
        return idx, node[2]

    if shape[0] == "leaf":
        return Tree(1, (), (leaf_labels[0],), None)
    top_children = shape[1]
    top_id, _ = realize(shape)
    root = top_id if len(top_children) == 2 else None
    return Tree(counter[0], tuple(edges), tuple(leaf_labels), root)


def write_newick(tree: Tree, precision: int = 6) -> str:
    """Deterministic Newick text: children ordered by smallest contained leaf
    label, lengths printed with ``precision`` digits."""
    if tree.n_leaves == 1:
        return f"{tree.leaf_labels[0]};"
    adj = tree.adjacency()
    lengths = [w for _a, _b, w in tree.edges]
    if tree.root is not None:
        anchor = tree.root
    else:
        smallest = min(range(tree.n_leaves), key=lambda i: tree.leaf_labels[i])
        anchor = adj[smallest][0][0]

    def render(node: int, parent: int) -> tuple[str, str]:
        """(text, min contained leaf label)"""
        if node < tree.n_leaves:
            return tree.leaf_labels[node], tree.leaf_labels[node]
        parts = []
        for child, eidx in adj[node]:
            if child == parent:
                continue
            text, lo = render(child, node)
            parts.append((lo, f"{text}:{lengths[eidx]:.{precision}f}"))
        parts.sort()
        return "(" + ",".join(p for _lo, p in parts) + ")", min(lo for lo, _p in parts)

    body, _ = render(anchor, -1)
    return body + ";"


def read_newick_file(path) -> Tree:
    with open(path, encoding="utf-8") as fh:
        return parse_newick(fh.read())


def write_newick_file(tree: Tree, path, precision: int = 6) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(write_newick(tree, precision) + "\n")


# --------------------------------------------------------------------------- #
# feature tables
# --------------------------------------------------------------------------- #


@dataclass
class FeatureTable:
    """Leaf-aligned feature matrix with optional per-column role tags."""

    row_labels: list[str]
    col_labels: list[str]
    values: np.ndarray
    roles: list[str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n, d = self.values.shape
        if len(self.row_labels) != n or len(self.col_labels) != d:
            raise IngestionError("label lists do not match value matrix shape")
        dupes = [lbl for lbl in set(self.row_labels) if self.row_labels.count(lbl) > 1]
        if dupes:
            raise IngestionError("duplicate leaf names", dupes)
        bad = [self.row_labels[i] for i in np.where(~np.isfinite(self.values).all(axis=1))[0]]
        if bad:
            raise IngestionError("non-finite values", bad)
        if self.roles is not None:
            if len(self.roles) != d:
                raise IngestionError("role row does not match column count")
            unknown = sorted(set(self.roles) - set(ROLES))
            if unknown:
                raise IngestionError(f"unknown roles {unknown}")

    @property
    def n_rows(self) -> int:
        return len(self.row_labels)

    @property
    def n_cols(self) -> int:
        return len(self.col_labels)

    def copy(self) -> "FeatureTable":
        return FeatureTable(
            list(self.row_labels),
            list(self.col_labels),
            self.values.copy(),
            list(self.roles) if self.roles is not None else None,
        )

    def columns_with_role(self, role: str) -> np.ndarray:
        if self.roles is None:
            return np.array([], dtype=int)
        return np.array([i for i, r in enumerate(self.roles) if r == role], dtype=int)

    def reordered(self, labels) -> "FeatureTable":
        """Rows permuted into the given label order."""
        index = {lbl: i for i, lbl in enumerate(self.row_labels)}
        missing = [lbl for lbl in labels if lbl not in index]
        if missing:
            raise DataError(f"labels not present in table: {missing}")
        rows = [index[lbl] for lbl in labels]
        return FeatureTable(
            list(labels),
            list(self.col_labels),
            self.values[rows],
            list(self.roles) if self.roles is not None else None,
        )

    def hstack(self, other: "FeatureTable") -> "FeatureTable":
        """Column-concatenate two tables over identical rows."""
        if self.row_labels != other.row_labels:
            raise DataError("tables must share row labels to concatenate")
        roles = None
        if self.roles is not None and other.roles is not None:
            roles = list(self.roles) + list(other.roles)
        return FeatureTable(
            list(self.row_labels),
            list(self.col_labels) + list(other.col_labels),
            np.hstack([self.values, other.values]),
            roles,
        )


def load_feature_csv(path) -> FeatureTable:
    """Read a feature table, validating shape and finiteness.

    Raises :class:`IngestionError` naming the offending rows for ragged rows,
    non-finite cells, or duplicate leaf names.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestionError("empty file")
    header = rows[0]
    if len(header) < 2:
        raise IngestionError("header must name at least one feature column")
    col_labels = header[1:]
    width = len(header)
    body = rows[1:]
    roles = None
    if body and body[0] and body[0][0] == "#roles":
        if len(body[0]) != width:
            raise IngestionError("role row does not match column count", [2])
        roles = body[0][1:]
        body = body[1:]

    ragged = [i + 1 for i, row in enumerate(rows) if row and len(row) != width]
    if ragged:
        raise IngestionError("ragged rows", ragged)

    labels: list[str] = []
    values = np.empty((len(body), width - 1))
    bad_rows: list[str] = []
    for i, row in enumerate(body):
        labels.append(row[0])
        try:
            values[i] = [float(x) for x in row[1:]]
        except ValueError:
            bad_rows.append(row[0])
            values[i] = np.nan
            continue
        if not np.isfinite(values[i]).all():
            bad_rows.append(row[0])
    if bad_rows:
        raise IngestionError("non-finite or unparseable cells", bad_rows)
    return FeatureTable(labels, col_labels, values, roles)


def save_feature_csv(table: FeatureTable, path) -> None:
    """Write a table in the layout read by :func:`load_feature_csv`; float
    cells use ``repr`` so a save/load round trip is lossless."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["leaf", *table.col_labels])
        if table.roles is not None:
            writer.writerow(["#roles", *table.roles])
        for label, row in zip(table.row_labels, table.values):
            writer.writerow([label, *[repr(float(x)) for x in row]])


def aggregate_by_group(table: FeatureTable, groups) -> FeatureTable:
    """Collapse rows to one per taxon by arithmetic mean.

    ``groups`` maps every row label to its taxon.  Output rows follow the
    order in which taxa first appear among the input rows.
    """
    missing = [lbl for lbl in table.row_labels if lbl not in groups]
    if missing:
        raise DegenerateInputError(f"rows without a taxon assignment: {missing}")
    order: list[str] = []
    members: dict[str, list[int]] = {}
    for i, lbl in enumerate(table.row_labels):
        taxon = groups[lbl]
        if taxon not in members:
            members[taxon] = []
            order.append(taxon)
        members[taxon].append(i)
    empty = [t for t in set(groups.values()) if t not in members]
    if empty:
        raise DegenerateInputError(f"empty groups: {sorted(empty)}")
    values = np.stack([table.values[members[t]].mean(axis=0) for t in order])
    return FeatureTable(order, list(table.col_labels), values,
                        list(table.roles) if table.roles is not None else None)


def permute_dataset(table: FeatureTable, mode: str, seed: int) -> FeatureTable:
    """Null-model shuffles: ``leaf`` permutes row labels only, ``cell``
    permutes the entries within each column, ``gene`` permutes the entries
    within each row.  Deterministic per seed."""
    rng = stream(seed, PERMUTE)
    out = table.copy()
    if mode == "leaf":
        perm = rng.permutation(table.n_rows)
        out.row_labels = [table.row_labels[i] for i in perm]
    elif mode == "cell":
        for j in range(table.n_cols):
            out.values[:, j] = table.values[rng.permutation(table.n_rows), j]
    elif mode == "gene":
        for i in range(table.n_rows):
            out.values[i] = table.values[i, rng.permutation(table.n_cols)]
    else:
        raise DataError(f"unknown permutation mode {mode!r}")
    return out

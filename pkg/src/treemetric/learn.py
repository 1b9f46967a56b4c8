"""Metric-learning core: a rectifier feed-forward embedder with analytic
reverse-mode gradients, the quartet additivity loss with its deviation and
sparsity regularizers, triplet/quadruplet baselines, feature gating with a
straight-through relaxed-binary estimator, and a deterministic SGD loop.

Conventions: rows are points.  In training mode the per-feature gate is a
hard 0/1 draw from a temperature-tau two-logit relaxation whose gradient
flows through the soft "on" probability; in evaluation mode the gate is the
deterministic logit argmax, so evaluation forwards are bitwise reproducible.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import (
    ConfigError,
    DataError,
    QuartetError,
    SupervisionError,
    TrainingDivergedError,
)
from .metrics import quartet_distance, rf_distance
from .quartets import (
    LabelPrior,
    PartitionPrior,
    classify_by_partition,
    enumerate_quartets,
    resolve_from_partition,
)
from .reconstruct import neighbor_joining
from .treeio import FeatureTable
from .trees import QuartetTopology, Tree, path_distance_matrix, topology_codes

__all__ = [
    "EmbeddingModel",
    "Supervision",
    "LossConfig",
    "TrainSettings",
    "TrainHistory",
    "forward",
    "gate_sample",
    "quartet_loss",
    "deviation_loss",
    "sparsity_penalty",
    "triplet_loss",
    "quadruplet_loss",
    "total_objective",
    "train",
    "save_model",
    "load_model",
]

METRICS = ("euclidean", "squared_euclidean")

# pairing k joins positions (PAIR_A[k]) and (PAIR_B[k]) of a sorted quartet
_PAIRS = (((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2)))
_OTHERS = ((1, 2), (0, 2), (0, 1))


# --------------------------------------------------------------------------- #
# model
# --------------------------------------------------------------------------- #


@dataclass
class EmbeddingModel:
    """Feed-forward embedder with optional per-feature gating or a linear
    input projection (the latter used by the unsupervised variant)."""

    weights: list
    biases: list
    gate_logits: np.ndarray | None = None
    gate_temperature: float = 1.0
    gate_hard: bool = True
    projection: np.ndarray | None = None
    dropout_data: float = 0.0
    dropout_metric: float = 0.0

    def __post_init__(self):
        if self.gate_temperature <= 0:
            raise ConfigError("gate temperature must be positive")
        for rate in (self.dropout_data, self.dropout_metric):
            if not 0.0 <= rate < 1.0:
                raise ConfigError("dropout rates must lie in [0, 1)")
        width = self.input_dim
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != width or w.shape[1] != b.shape[0]:
                raise ConfigError("layer shapes do not chain")
            width = w.shape[1]
        if self.gate_logits is not None and self.gate_logits.shape != (self.input_dim, 2):
            raise ConfigError("gate logits must have shape (input_dim, 2)")

    @classmethod
    def create(
        cls,
        layer_widths,
        seed: int = 0,
        gating: bool = False,
        projection: bool = False,
        gate_temperature: float = 1.0,
        gate_hard: bool = True,
        dropout_data: float = 0.0,
        dropout_metric: float = 0.0,
    ) -> "EmbeddingModel":
        """Zero-mean uniform init scaled by 1/sqrt(fan_in); zero biases;
        symmetric (zero) gate logits; identity projection."""
        widths = list(layer_widths)
        if len(widths) < 2:
            raise ConfigError("need at least input and output widths")
        gen = rng.stream(seed, rng.MODEL_INIT)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(gen.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(
            weights,
            biases,
            gate_logits=np.zeros((widths[0], 2)) if gating else None,
            gate_temperature=gate_temperature,
            gate_hard=gate_hard,
            projection=np.eye(widths[0]) if projection else None,
            dropout_data=dropout_data,
            dropout_metric=dropout_metric,
        )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            None if self.gate_logits is None else self.gate_logits.copy(),
            self.gate_temperature,
            self.gate_hard,
            None if self.projection is None else self.projection.copy(),
            self.dropout_data,
            self.dropout_metric,
        )


def save_model(model: EmbeddingModel, path) -> None:
    payload = {
        "format_version": 1,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "gate_logits": None if model.gate_logits is None else model.gate_logits.tolist(),
        "gate_temperature": model.gate_temperature,
        "gate_hard": model.gate_hard,
        "projection": None if model.projection is None else model.projection.tolist(),
        "dropout_data": model.dropout_data,
        "dropout_metric": model.dropout_metric,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_model(path) -> EmbeddingModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != 1:
        raise DataError(f"unsupported model format {payload.get('format_version')!r}")
    return EmbeddingModel(
        [np.array(w) for w in payload["weights"]],
        [np.array(b) for b in payload["biases"]],
        None if payload["gate_logits"] is None else np.array(payload["gate_logits"]),
        payload["gate_temperature"],
        payload["gate_hard"],
        None if payload["projection"] is None else np.array(payload["projection"]),
        payload["dropout_data"],
        payload["dropout_metric"],
    )


# --------------------------------------------------------------------------- #
# forward / backward
# --------------------------------------------------------------------------- #


def _sample_gate(gate_logits, tau, hard, gen):
    """(gate values, soft on-probability).  Gumbel-perturbed two-logit
    softmax; hard mode thresholds while keeping the soft value for the
    straight-through gradient."""
    eps = 1e-20
    u = gen.random(gate_logits.shape)
    gumbel = -np.log(-np.log(u + eps) + eps)
    scaled = (gate_logits + gumbel) / tau
    scaled -= scaled.max(axis=1, keepdims=True)
    expd = np.exp(scaled)
    p_on = expd[:, 1] / expd.sum(axis=1)
    g = (p_on > 0.5).astype(float) if hard else p_on
    return g, p_on


def gate_sample(gate_logits, tau: float, hard: bool, seed: int) -> np.ndarray:
    """Public draw of a gate vector in [0, 1]^d (exactly {0,1} in hard mode)."""
    if tau <= 0:
        raise ConfigError("gate temperature must be positive")
    g, _ = _sample_gate(np.asarray(gate_logits, dtype=float), tau, hard,
                        rng.stream(seed, rng.SAMPLING, 2))
    return g


@dataclass
class _ForwardCache:
    x: np.ndarray
    g: np.ndarray | None
    p_on: np.ndarray | None
    x_gated: np.ndarray
    data_mask: np.ndarray | None
    inputs: list
    preacts: list
    metric_mask: np.ndarray | None


def _forward(model: EmbeddingModel, X: np.ndarray, train_mode: bool, gen) -> tuple:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DataError(
            f"feature width {X.shape} does not match model input {model.input_dim}")
    g = p_on = None
    x_gated = X
    if model.gate_logits is not None:
        if train_mode:
            g, p_on = _sample_gate(model.gate_logits, model.gate_temperature,
                                   model.gate_hard, gen)
        else:
            g = (model.gate_logits[:, 1] > model.gate_logits[:, 0]).astype(float)
            p_on = None
        x_gated = X * g[None, :]
    data_mask = None
    h = x_gated
    if train_mode and model.dropout_data > 0:
        keep = 1.0 - model.dropout_data
        data_mask = (gen.random(h.shape) < keep) / keep
        h = h * data_mask
    inputs, preacts = [], []
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        a = h @ w + b
        preacts.append(a)
        h = a if l == last else np.maximum(a, 0.0)
    metric_mask = None
    if train_mode and model.dropout_metric > 0:
        keep = 1.0 - model.dropout_metric
        metric_mask = (gen.random(h.shape) < keep) / keep
        h = h * metric_mask
    return h, _ForwardCache(X, g, p_on, x_gated, data_mask, inputs, preacts, metric_mask)


def forward(model: EmbeddingModel, features, train_mode: bool = False, seed: int = 0):
    """Embed rows: z_i = f(g * x_i).  Dropout and gate draws apply only in
    training mode and are deterministic per seed."""
    X = features.values if isinstance(features, FeatureTable) else features
    z, _ = _forward(model, X, train_mode, rng.stream(seed, rng.TRAIN_STEP))
    return z


@dataclass
class ModelGrads:
    weights: list
    biases: list
    gate_logits: np.ndarray | None = None
    projection: np.ndarray | None = None


def _backward(model: EmbeddingModel, cache: _ForwardCache, dZ: np.ndarray,
              dg_direct: np.ndarray | None = None) -> ModelGrads:
    """Reverse-mode through the embedder.  ``dg_direct`` carries gradient
    contributions that hit the gate vector without passing through the
    network (the sparsity penalty)."""
    d = dZ
    if cache.metric_mask is not None:
        d = d * cache.metric_mask
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    last = len(model.weights) - 1
    for l in range(last, -1, -1):
        if l != last:
            d = d * (cache.preacts[l] > 0)
        grads_w[l] = cache.inputs[l].T @ d
        grads_b[l] = d.sum(axis=0)
        d = d @ model.weights[l].T
    if cache.data_mask is not None:
        d = d * cache.data_mask
    gate_grad = None
    if model.gate_logits is not None:
        dg = (d * cache.x).sum(axis=0)
        if dg_direct is not None:
            dg = dg + dg_direct
        if cache.p_on is not None:  # straight-through: route through soft prob
            slope = cache.p_on * (1.0 - cache.p_on) / model.gate_temperature
            gate_grad = np.stack([-dg * slope, dg * slope], axis=1)
        else:
            gate_grad = np.zeros_like(model.gate_logits)
    return ModelGrads(grads_w, grads_b, gate_grad, None)


# --------------------------------------------------------------------------- #
# distance helpers
# --------------------------------------------------------------------------- #


def _check_metric(metric: str):
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}, got {metric!r}")


def _pair_dist(za, zb, metric):
    diff = za - zb
    sq = (diff * diff).sum(axis=-1)
    if metric == "squared_euclidean":
        return sq, diff
    return np.sqrt(sq), diff


def _pair_dist_grad(dist, diff, metric):
    """d(distance)/d(za); the zb gradient is its negation.  Zero subgradient
    at coincident points."""
    if metric == "squared_euclidean":
        return 2.0 * diff
    safe = np.where(dist > 0, dist, 1.0)
    return diff / safe[..., None] * (dist > 0)[..., None]


def _full_distances(Z, metric):
    diff = Z[:, None, :] - Z[None, :, :]
    sq = (diff**2).sum(axis=2)
    if metric == "squared_euclidean":
        return sq, diff, sq
    return np.sqrt(sq), diff, sq


# --------------------------------------------------------------------------- #
# loss heads
# --------------------------------------------------------------------------- #


def _quartet_batch(Z, quartets, codes, m0, metric, w_close, w_push):
    """Mean quartet loss over a batch plus the gradient on Z.

    ``codes`` holds the expected-topology code per quartet (0..2), or a
    negative value where the ordering must be read off the observed sums
    (unsupervised or unresolved supervision).
    """
    B = len(quartets)
    Zq = Z[quartets]  # (B, 4, dim)
    dists = np.empty((B, 3, 2))
    diffs = np.empty((B, 3, 2, Z.shape[1]))
    for k, ((p, q), (r, s)) in enumerate(_PAIRS):
        dists[:, k, 0], diffs[:, k, 0] = _pair_dist(Zq[:, p], Zq[:, q], metric)
        dists[:, k, 1], diffs[:, k, 1] = _pair_dist(Zq[:, r], Zq[:, s], metric)
    sums = dists.sum(axis=2)  # (B, 3)

    cmin = np.where(codes >= 0, codes, np.argmin(sums, axis=1)).astype(int)
    ar = np.arange(B)
    o1 = np.array([_OTHERS[c][0] for c in cmin])
    o2 = np.array([_OTHERS[c][1] for c in cmin])
    sa, sb, s3 = sums[ar, o1], sums[ar, o2], sums[ar, cmin]
    close = np.abs(sa - sb)
    push_arg = s3 - 0.5 * (sa + sb) + m0
    active = push_arg > 0
    values = w_close * close + w_push * np.where(active, push_arg, 0.0)

    sign = np.sign(sa - sb)
    coef = np.zeros((B, 3))
    coef[ar, o1] = w_close * sign - 0.5 * w_push * active
    coef[ar, o2] = -w_close * sign - 0.5 * w_push * active
    coef[ar, cmin] = w_push * active

    dZq = np.zeros_like(Zq)
    for k, ((p, q), (r, s)) in enumerate(_PAIRS):
        u1 = _pair_dist_grad(dists[:, k, 0], diffs[:, k, 0], metric)
        u2 = _pair_dist_grad(dists[:, k, 1], diffs[:, k, 1], metric)
        c = coef[:, k, None]
        dZq[:, p] += c * u1
        dZq[:, q] -= c * u1
        dZq[:, r] += c * u2
        dZq[:, s] -= c * u2
    dZ = np.zeros_like(Z)
    np.add.at(dZ, quartets, dZq / B)
    return float(values.mean()), dZ


def _as_code(expected_topology) -> int:
    if expected_topology is None:
        return -1
    if isinstance(expected_topology, QuartetTopology):
        if expected_topology is QuartetTopology.UNRESOLVED:
            return -1
        return expected_topology.value
    code = int(expected_topology)
    if code not in (0, 1, 2):
        raise QuartetError(f"invalid expected topology {expected_topology!r}")
    return code


def quartet_loss(
    embeddings: np.ndarray,
    quartet,
    expected_topology=None,
    m0: float = 0.5,
    metric: str = "euclidean",
    w_close: float = 1.0,
    w_push: float = 1.0,
):
    """Additivity loss of one quartet.

    The pairing sum of the expected sibling topology plays the smallest role
    in the hinge; with no expected topology the observed sums set the
    ordering.  Returns (value, gradient on the four sorted-quartet rows).
    Subgradients at the absolute-value and hinge kinks are zero.
    """
    _check_metric(metric)
    q = tuple(sorted(int(i) for i in quartet))
    if len(set(q)) != 4:
        raise QuartetError(f"quartet must hold 4 distinct leaves, got {quartet}")
    codes = np.array([_as_code(expected_topology)])
    value, dZ = _quartet_batch(
        np.asarray(embeddings, dtype=float), np.array([q]), codes,
        m0, metric, w_close, w_push,
    )
    return value, dZ[list(q)]


def deviation_loss(features, embeddings, metric: str = "euclidean"):
    """Mean squared Frobenius gap between embedding-space and input-space
    distance matrices, (1/N) ||D(Z) - D(X)||_F^2.  Returns (value, gradient
    on the embeddings)."""
    value, dZ, _dref = _deviation_full(
        np.asarray(features, dtype=float), np.asarray(embeddings, dtype=float), metric)
    return value, dZ


def _distance_pullback(e_signed, D, points, metric):
    """Gradient of sum_{i,j} e_ij * D_ij on the point set defining D."""
    if metric == "squared_euclidean":
        w = e_signed
        return 4.0 * (w.sum(axis=1)[:, None] * points - w @ points)
    w = np.where(D > 0, e_signed / np.where(D > 0, D, 1.0), 0.0)
    return 2.0 * (w.sum(axis=1)[:, None] * points - w @ points)


def _deviation_full(ref: np.ndarray, Z: np.ndarray, metric: str):
    _check_metric(metric)
    if ref.shape[0] != Z.shape[0]:
        raise DataError("feature and embedding row counts differ")
    n = Z.shape[0]
    Dz, _diff_z, _ = _full_distances(Z, metric)
    Dx, _diff_x, _ = _full_distances(ref, metric)
    gap = Dz - Dx
    value = float((gap**2).sum() / n)
    e = 2.0 * gap / n  # d value / d Dz over ordered pairs
    dZ = _distance_pullback(e, Dz, Z, metric)
    dref = _distance_pullback(-e, Dx, ref, metric)
    return value, dZ, dref


def sparsity_penalty(g, lambda_sparsity: float) -> float:
    """Mean gate activation scaled by the sparsity weight."""
    g = np.asarray(g, dtype=float)
    if g.size == 0:
        return 0.0
    return float(lambda_sparsity * g.mean())


def _ordered_roles(quartet, source):
    """(anchor, positive, negative, second_negative) positions per the
    ordering source: the closest pair gives anchor/positive, the leaf
    farthest from the anchor the negative."""
    q = tuple(sorted(int(i) for i in quartet))
    best = None
    for a in range(4):
        for b in range(a + 1, 4):
            d = source[q[a], q[b]]
            if best is None or d < best[0]:
                best = (d, a, b)
    _, a, b = best
    rest = [p for p in range(4) if p not in (a, b)]
    d0, d1 = source[q[a], q[rest[0]]], source[q[a], q[rest[1]]]
    far, near = (rest[0], rest[1]) if d0 >= d1 else (rest[1], rest[0])
    return q, a, b, far, near


def triplet_loss(embeddings, quartet, ordering_source=None, margin: float = 0.5):
    """Contrastive baseline: hinge on squared distances,
    [d^2(A,P) - d^2(A,N) + margin]_+.  ``ordering_source`` is a full distance
    matrix defining closest/farthest (embedding distances when omitted).
    Returns (value, gradient on the four sorted-quartet rows)."""
    Z = np.asarray(embeddings, dtype=float)
    source = ordering_source
    if source is None:
        source, _, _ = _full_distances(Z, "euclidean")
    q, a, p, far, _near = _ordered_roles(quartet, source)
    za, zp, zn = Z[q[a]], Z[q[p]], Z[q[far]]
    gap = ((za - zp) ** 2).sum() - ((za - zn) ** 2).sum() + margin
    grad = np.zeros((4, Z.shape[1]))
    if gap > 0:
        grad[a] = 2.0 * (zn - zp)
        grad[p] = -2.0 * (za - zp)
        grad[far] = 2.0 * (za - zn)
    return float(max(gap, 0.0)), grad


def quadruplet_loss(
    embeddings,
    quartet,
    ordering_source=None,
    alpha: float = 0.5,
    beta_margin: float = 0.25,
):
    """Two-hinge baseline adding a second negative pair:
    [d^2(A,P) - d^2(A,N) + alpha]_+ + [d^2(A,P) - d^2(N',N) + beta]_+."""
    Z = np.asarray(embeddings, dtype=float)
    source = ordering_source
    if source is None:
        source, _, _ = _full_distances(Z, "euclidean")
    q, a, p, far, near = _ordered_roles(quartet, source)
    za, zp = Z[q[a]], Z[q[p]]
    zn, zn2 = Z[q[far]], Z[q[near]]
    d_ap = ((za - zp) ** 2).sum()
    gap1 = d_ap - ((za - zn) ** 2).sum() + alpha
    gap2 = d_ap - ((zn2 - zn) ** 2).sum() + beta_margin
    grad = np.zeros((4, Z.shape[1]))
    if gap1 > 0:
        grad[a] += 2.0 * (zn - zp)
        grad[p] += -2.0 * (za - zp)
        grad[far] += 2.0 * (za - zn)
    if gap2 > 0:
        grad[a] += 2.0 * (za - zp)
        grad[p] += -2.0 * (za - zp)
        grad[near] += -2.0 * (zn2 - zn)
        grad[far] += 2.0 * (zn2 - zn)
    return float(max(gap1, 0.0) + max(gap2, 0.0)), grad


# --------------------------------------------------------------------------- #
# supervision and the total objective
# --------------------------------------------------------------------------- #

KINDS = ("supervised", "partition", "partial", "unsupervised")


@dataclass(frozen=True)
class Supervision:
    """Which quartets may be trained on and where their ordering comes from."""

    kind: str
    tree: Tree | None = None
    partition: PartitionPrior | None = None
    labels: LabelPrior | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"supervision kind must be one of {KINDS}")
        if self.kind == "supervised" and self.tree is None:
            raise ConfigError("supervised mode needs the true tree")
        if self.kind == "partition" and self.partition is None:
            raise ConfigError("partition mode needs a partition prior")
        if self.kind == "partial" and (self.labels is None or self.tree is None):
            raise ConfigError("partial mode needs a label prior and the true tree")

    @classmethod
    def supervised(cls, tree: Tree) -> "Supervision":
        return cls("supervised", tree=tree)

    @classmethod
    def from_partition(cls, prior: PartitionPrior) -> "Supervision":
        return cls("partition", partition=prior)

    @classmethod
    def partial(cls, labels: LabelPrior, tree: Tree) -> "Supervision":
        return cls("partial", tree=tree, labels=labels)

    @classmethod
    def unsupervised(cls) -> "Supervision":
        return cls("unsupervised")


@dataclass
class LossConfig:
    supervision: Supervision
    loss: str = "quartet"  # quartet | triplet | quadruplet
    lambda_additivity: float = 2.0
    w_close: float = 1.0
    w_push: float = 10.0
    lambda_deviation: float = 0.01
    lambda_sparsity: float = 0.0
    margin: float = 0.5
    metric: str = "euclidean"
    quartets_per_step: int = 32

    def __post_init__(self):
        _check_metric(self.metric)
        if self.loss not in ("quartet", "triplet", "quadruplet"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        for name in ("lambda_additivity", "w_close", "w_push",
                     "lambda_deviation", "lambda_sparsity", "margin"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.quartets_per_step < 1:
            raise ConfigError("needs at least one quartet per step")


def _expected_codes(quartets: np.ndarray, supervision: Supervision,
                    ref_distances: np.ndarray | None) -> np.ndarray:
    """Expected-topology code per quartet; -1 marks observed ordering."""
    if supervision.kind == "unsupervised":
        return np.full(len(quartets), -1, dtype=int)
    if supervision.kind == "partition":
        codes = np.empty(len(quartets), dtype=int)
        for i, q in enumerate(quartets):
            codes[i] = resolve_from_partition(q, supervision.partition).value
        return codes
    if ref_distances is None:
        ref_distances = path_distance_matrix(supervision.tree)
    codes = topology_codes(ref_distances, quartets)
    codes[codes == QuartetTopology.UNRESOLVED.value] = -1
    return codes


@dataclass
class ObjectiveValue:
    value: float
    grads: ModelGrads
    components: dict


def total_objective(
    model: EmbeddingModel,
    features,
    quartet_batch,
    config: LossConfig,
    ref_distances: np.ndarray | None = None,
    train_mode: bool = False,
    seed: int = 0,
) -> ObjectiveValue:
    """Weighted sum of the quartet head (mean over the batch), the deviation
    regularizer, the gate sparsity penalty, and, in projection mode, the L1
    pull of the projection toward the identity.  Returns the value with
    gradients for every trainable parameter."""
    X = features.values if isinstance(features, FeatureTable) else np.asarray(features, dtype=float)
    quartets = np.asarray(quartet_batch, dtype=int)
    if quartets.ndim != 2 or quartets.shape[1] != 4:
        raise SupervisionError("quartet batch must be a (B, 4) index array; "
                               "an empty allowed set admits no training")
    if len(quartets) == 0:
        raise SupervisionError("supervision admits no quartets")
    quartets = np.sort(quartets, axis=1)
    gen = rng.stream(seed, rng.TRAIN_STEP, 1)
    Z, cache = _forward(model, X, train_mode, gen)

    components: dict = {}
    dZ = np.zeros_like(Z)

    if config.loss == "quartet":
        codes = _expected_codes(quartets, config.supervision, ref_distances)
        head, dZ_head = _quartet_batch(Z, quartets, codes, config.margin,
                                       config.metric, config.w_close, config.w_push)
        dZ += config.lambda_additivity * dZ_head
    else:
        source = None
        if config.supervision.kind in ("supervised", "partial"):
            source = ref_distances if ref_distances is not None \
                else path_distance_matrix(config.supervision.tree)
        elif config.supervision.kind == "partition":
            source = _partition_pseudo_distances(config.supervision.partition)
        head = 0.0
        for q in quartets:
            if config.loss == "triplet":
                value, grad = triplet_loss(Z, q, source, config.margin)
            else:
                value, grad = quadruplet_loss(Z, q, source,
                                              config.margin, config.margin / 2.0)
            head += value
            np.add.at(dZ, np.sort(q), config.lambda_additivity * grad / len(quartets))
        head /= len(quartets)
    components["quartet"] = head
    value = config.lambda_additivity * head

    reference = X if model.projection is None else X @ model.projection.T
    dev, dZ_dev, dref = _deviation_full(reference, Z, config.metric)
    components["deviation"] = dev
    value += config.lambda_deviation * dev
    dZ += config.lambda_deviation * dZ_dev

    dg_direct = None
    if model.gate_logits is not None and cache.g is not None:
        spar = sparsity_penalty(cache.g, config.lambda_sparsity)
        components["sparsity"] = spar
        value += spar
        dg_direct = np.full(model.input_dim, config.lambda_sparsity / model.input_dim)

    grads = _backward(model, cache, dZ, dg_direct)
    if model.projection is not None:
        l1 = float(np.abs(model.projection - np.eye(model.input_dim)).sum())
        components["projection_l1"] = l1
        value += l1
        grads.projection = (config.lambda_deviation * (dref.T @ X)
                            + np.sign(model.projection - np.eye(model.input_dim)))
    components["total"] = value
    return ObjectiveValue(float(value), grads, components)


def _partition_pseudo_distances(prior: PartitionPrior) -> np.ndarray:
    """Surrogate ordering matrix for contrastive baselines under a clade
    prior: co-clade pairs are near (0), cross-clade pairs far (1)."""
    clades = np.array(prior.clade_of)
    return (clades[:, None] != clades[None, :]).astype(float)


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #


@dataclass
class TrainSettings:
    steps: int = 1000
    learning_rate: float = 1e-3
    momentum: float = 0.9
    eval_interval: int = 0  # 0 disables periodic tree evaluation


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    total: list = field(default_factory=list)
    components: dict = field(default_factory=dict)
    gate_on: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def append_step(self, step: int, comps: dict, gate_on: float | None):
        self.steps.append(step)
        self.total.append(comps["total"])
        for key, val in comps.items():
            if key != "total":
                self.components.setdefault(key, []).append(val)
        self.gate_on.append(gate_on)

    def rows(self) -> list[dict]:
        keys = sorted(self.components)
        out = []
        for i, step in enumerate(self.steps):
            row = {"step": step, "total": self.total[i], "gate_on": self.gate_on[i]}
            row.update({k: self.components[k][i] for k in keys})
            out.append(row)
        return out


class _QuartetPool:
    """Allowed quartets for a supervision mode, with i.i.d. step sampling."""

    def __init__(self, supervision: Supervision, n: int):
        self.n = n
        self.materialized: np.ndarray | None = None
        if supervision.kind == "partition":
            allowed = [
                q for q in enumerate_quartets(n)
                if classify_by_partition(q, supervision.partition)[1]
            ]
            self.materialized = np.array(allowed, dtype=int).reshape(-1, 4)
        elif supervision.kind == "partial":
            labeled = sorted(supervision.labels.labeled)
            if len(labeled) >= 4:
                self.materialized = np.array(
                    list(itertools.combinations(labeled, 4)), dtype=int)
            else:
                self.materialized = np.empty((0, 4), dtype=int)
        if self.materialized is not None and len(self.materialized) == 0:
            raise SupervisionError("supervision admits no quartets")

    def sample(self, gen, count: int) -> np.ndarray:
        if self.materialized is not None:
            rows = gen.integers(len(self.materialized), size=count)
            return self.materialized[rows]
        out = np.empty((count, 4), dtype=int)
        for i in range(count):
            out[i] = np.sort(gen.choice(self.n, size=4, replace=False))
        return out


def _evaluate(model, dataset, config, step, history):
    tree = dataset.tree
    if tree is None:
        return
    labels = list(tree.leaf_labels)
    entry = {"step": step}
    for name, table in (("train", dataset.train), ("test", dataset.test)):
        Z = forward(model, table.reordered(labels).values, train_mode=False)
        recon = neighbor_joining(_full_distances(Z, "euclidean")[0], labels)
        entry[f"{name}_rf"] = rf_distance(tree, recon)
        if name == "test":
            entry["test_qd"] = quartet_distance(tree, recon, seed=step)
    history.evals.append(entry)


def train(
    model: EmbeddingModel,
    dataset,
    config: LossConfig,
    settings: TrainSettings,
    seed: int = 0,
):
    """Stochastic gradient descent over quartet batches.

    Per step: draw ``quartets_per_step`` quartets i.i.d. from the allowed set
    of the supervision mode, evaluate the total objective on all leaves, and
    apply an SGD-with-momentum update.  Periodically (``eval_interval``)
    embeds train/test tables, reconstructs with neighbor joining, and records
    RF/QD against the ground-truth tree.  Aborts with the history attached if
    the loss stops being finite.  Bitwise deterministic per seed.
    """
    model = model.copy()
    sup = config.supervision
    labels = list(dataset.tree.leaf_labels) if dataset.tree is not None \
        else list(dataset.train.row_labels)
    X = dataset.train.reordered(labels).values
    n = len(labels)
    # align prior indices with the training row order
    if sup.kind == "partition":
        sup = Supervision.from_partition(sup.partition.reindexed(labels))
    elif sup.kind == "partial":
        sup = Supervision.partial(sup.labels.reindexed(labels), sup.tree)
    config = LossConfig(**{**config.__dict__, "supervision": sup})
    pool = _QuartetPool(sup, n)
    ref = path_distance_matrix(sup.tree) if sup.tree is not None else None

    velocity = ModelGrads(
        [np.zeros_like(w) for w in model.weights],
        [np.zeros_like(b) for b in model.biases],
        None if model.gate_logits is None else np.zeros_like(model.gate_logits),
        None if model.projection is None else np.zeros_like(model.projection),
    )
    history = TrainHistory()

    def sgd(param, vel, grad):
        vel *= settings.momentum
        vel -= settings.learning_rate * grad
        param += vel

    for step in range(settings.steps):
        gen = rng.stream(seed, rng.TRAIN_STEP, step)
        batch = pool.sample(gen, config.quartets_per_step)
        result = total_objective(model, X, batch, config, ref_distances=ref,
                                 train_mode=True, seed=int(gen.integers(2**63)))
        if not math.isfinite(result.value):
            raise TrainingDivergedError(
                f"loss became non-finite at step {step}", history=history)
        gate_on = None
        if model.gate_logits is not None:
            g_eval = model.gate_logits[:, 1] > model.gate_logits[:, 0]
            gate_on = float(g_eval.sum())
        history.append_step(step, result.components, gate_on)

        for w, v, g in zip(model.weights, velocity.weights, result.grads.weights):
            sgd(w, v, g)
        for b, v, g in zip(model.biases, velocity.biases, result.grads.biases):
            sgd(b, v, g)
        if model.gate_logits is not None and result.grads.gate_logits is not None:
            sgd(model.gate_logits, velocity.gate_logits, result.grads.gate_logits)
        if model.projection is not None and result.grads.projection is not None:
            sgd(model.projection, velocity.projection, result.grads.projection)

        if settings.eval_interval and (step + 1) % settings.eval_interval == 0:
            _evaluate(model, dataset, config, step + 1, history)

    return model, history

"""Trinity signals: paired node samples with multi-labels, their mixup, and
the multi-head classifier trained on them.

A trinity signal packs one pair of nodes into a single latent vector (a
shared linear layer applied to the concatenated embeddings) carrying three
labels: the class of each endpoint and a scalar connection property p (edge
existence in {0,1}, or a restart-walk visit probability). Signals are mixed
pairwise by convex interpolation of both latents and labels; a class label
survives mixing only when both parents carry it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    concat_cols,
    concat_rows,
    gather_rows,
    mse,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax_cross_entropy,
)
from .graphs import LabeledGraph, personalized_pagerank
from .unify import Dense

TRINITY_DIM_DEFAULT = 32
CLASSIFIER_HIDDEN = 32

EDGE_EXISTENCE = "edge_existence"
PPR = "ppr"
CONNECTION_MODES = (EDGE_EXISTENCE, PPR)

SOURCE, TARGET = 0, 1

_SAMPLER_STREAM = 11
_MAX_REJECTIONS = 1000


class SamplingError(RuntimeError):
    """Signal sampling cannot satisfy its quota on this graph."""


@dataclass(frozen=True)
class TrinityLabel:
    """Multi-label of one signal: two class distributions and a connection score.

    y1/y2 are soft distributions over the shared classes; their masks are 1
    when the corresponding endpoint label is known. p is always defined.
    """

    y1: np.ndarray
    y2: np.ndarray
    p: float
    y1_mask: int
    y2_mask: int

    def __post_init__(self) -> None:
        if self.y1.shape != self.y2.shape or self.y1.ndim != 1:
            raise ValueError("y1 and y2 must be 1-d over the same classes")
        for dist, mask in ((self.y1, self.y1_mask), (self.y2, self.y2_mask)):
            if mask and abs(float(dist.sum()) - 1.0) > 1e-6:
                raise ValueError("unmasked label distribution must sum to 1")


@dataclass(frozen=True)
class TrinitySignal:
    latent: Tensor            # [trinity_dim]
    label: TrinityLabel
    domain_tag: int           # SOURCE or TARGET


@dataclass(frozen=True)
class SamplerConfig:
    """How many signals to draw per step and from where."""

    k: int
    pos_fraction: float = 0.5
    connection_mode: str = EDGE_EXISTENCE
    target_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if not 0.0 <= self.pos_fraction <= 1.0:
            raise ValueError("pos_fraction must be in [0, 1]")
        if not 0.0 <= self.target_fraction <= 1.0:
            raise ValueError("target_fraction must be in [0, 1]")
        if self.connection_mode not in CONNECTION_MODES:
            raise ValueError(f"connection_mode must be one of {CONNECTION_MODES}")


class PprScorer:
    """Connection scores from restart-walk visit probabilities, cached per source."""

    def __init__(self, graph: LabeledGraph, teleport: float = 0.15, tol: float = 1e-10):
        self.graph = graph
        self.teleport = teleport
        self.tol = tol
        self._cache: dict[int, np.ndarray] = {}

    def score(self, i: int, j: int) -> float:
        vec = self._cache.get(i)
        if vec is None:
            vec = personalized_pagerank(self.graph, i, self.teleport, self.tol)
            self._cache[i] = vec
        return float(vec[j])


@dataclass(frozen=True)
class DomainSignals:
    """One domain's view for signal sampling: graph, fresh embeddings, and
    the set of nodes whose labels may attach to signals."""

    graph: LabeledGraph
    embeddings: Tensor                  # [num_nodes x gnn_out_dim]
    labeled_nodes: frozenset[int]
    scorer: PprScorer | None = None     # required when sampling in PPR mode


def one_hot(class_index: int, num_classes: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros(num_classes, dtype=dtype)
    out[class_index] = 1.0
    return out


def build_trinity(
    e_i: Tensor,
    e_j: Tensor,
    y_i: int | None,
    y_j: int | None,
    p_ij: float,
    pair_layer: Dense,
    num_classes: int,
    domain_tag: int = SOURCE,
) -> TrinitySignal:
    """Encode one node pair into a signal through the shared pair layer.

    Unknown endpoint labels produce a zero distribution with mask 0.
    """
    d = e_i.values.shape[-1]
    row = concat_cols([reshape(e_i, (1, d)), reshape(e_j, (1, d))])
    latent = reshape(pair_layer(row), (pair_layer.weight.values.shape[1],))
    dtype = latent.values.dtype
    y1 = one_hot(y_i, num_classes, dtype) if y_i is not None else np.zeros(num_classes, dtype)
    y2 = one_hot(y_j, num_classes, dtype) if y_j is not None else np.zeros(num_classes, dtype)
    label = TrinityLabel(y1, y2, float(p_ij), int(y_i is not None), int(y_j is not None))
    return TrinitySignal(latent, label, domain_tag)


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """One mixing coefficient drawn from Beta(alpha, alpha)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return float(rng.beta(alpha, alpha))


def mix_latents(a: Tensor, b: Tensor, lam) -> Tensor:
    """lam * a + (1 - lam) * b with gradients flowing to both parents."""
    dtype = a.values.dtype
    lam = np.asarray(lam, dtype=dtype)
    return add(mul(a, lam), mul(b, np.asarray(1.0, dtype=dtype) - lam))


def mixup_signals(t: TrinitySignal, t_prime: TrinitySignal, lam: float) -> Tensor:
    """Convex interpolation of two signal latents."""
    if t.latent.values.shape != t_prime.latent.values.shape:
        raise ValueError("latent dimensions differ")
    return mix_latents(t.latent, t_prime.latent, lam)


def mixup_labels(y: TrinityLabel, y_prime: TrinityLabel, lam: float) -> TrinityLabel:
    """Componentwise interpolation of the multi-label.

    A class head stays valid only when both parents carry that label
    (mask AND); the connection score always mixes.
    """
    if y.y1.shape != y_prime.y1.shape:
        raise ValueError("class counts differ")
    lam = float(lam)
    return TrinityLabel(
        y1=lam * y.y1 + (1.0 - lam) * y_prime.y1,
        y2=lam * y.y2 + (1.0 - lam) * y_prime.y2,
        p=lam * y.p + (1.0 - lam) * y_prime.p,
        y1_mask=y.y1_mask & y_prime.y1_mask,
        y2_mask=y.y2_mask & y_prime.y2_mask,
    )


class TrinityBatch:
    """Columnar batch of k signals sharing one latent tensor [k x trinity_dim]."""

    def __init__(self, latent: Tensor, y1, y2, p, y1_mask, y2_mask, domain_tag):
        self.latent = latent
        self.y1 = np.asarray(y1)
        self.y2 = np.asarray(y2)
        self.p = np.asarray(p)
        self.y1_mask = np.asarray(y1_mask, dtype=np.int64)
        self.y2_mask = np.asarray(y2_mask, dtype=np.int64)
        self.domain_tag = np.asarray(domain_tag, dtype=np.int64)
        k = latent.values.shape[0]
        for name in ("y1", "y2"):
            if getattr(self, name).shape[0] != k:
                raise ValueError(f"{name} rows do not match batch size {k}")
        for name in ("p", "y1_mask", "y2_mask", "domain_tag"):
            if getattr(self, name).shape != (k,):
                raise ValueError(f"{name} must be a length-{k} vector")

    def __len__(self) -> int:
        return self.latent.values.shape[0]

    def __getitem__(self, i: int) -> TrinitySignal:
        dim = self.latent.values.shape[1]
        latent = reshape(gather_rows(self.latent, [i]), (dim,))
        label = TrinityLabel(
            self.y1[i].copy(), self.y2[i].copy(), float(self.p[i]),
            int(self.y1_mask[i]), int(self.y2_mask[i]),
        )
        return TrinitySignal(latent, label, int(self.domain_tag[i]))

    def without_node_labels(self) -> "TrinityBatch":
        """Same latents and connection scores, class labels masked out."""
        zeros = np.zeros(len(self), dtype=np.int64)
        return TrinityBatch(
            self.latent, np.zeros_like(self.y1), np.zeros_like(self.y2),
            self.p, zeros, zeros, self.domain_tag,
        )


def _sample_domain_pairs(
    dom: DomainSignals, n_pairs: int, cfg: SamplerConfig, rng: np.random.Generator
):
    """Draw pair indices, labels, and connection scores for one domain."""
    graph = dom.graph
    n_pos = int(round(n_pairs * cfg.pos_fraction))
    n_neg = n_pairs - n_pos
    if n_pos > 0 and graph.num_edges == 0:
        raise SamplingError("graph has no edges but pos_fraction > 0")
    if cfg.connection_mode == PPR and dom.scorer is None:
        raise ValueError("PPR connection mode needs a DomainSignals.scorer")

    first = np.empty(n_pairs, dtype=np.int64)
    second = np.empty(n_pairs, dtype=np.int64)
    p = np.empty(n_pairs, dtype=np.float64)

    if n_pos:
        picks = rng.integers(0, graph.num_edges, size=n_pos)
        flips = rng.random(n_pos) < 0.5
        chosen = graph.edges[picks]
        first[:n_pos] = np.where(flips, chosen[:, 1], chosen[:, 0])
        second[:n_pos] = np.where(flips, chosen[:, 0], chosen[:, 1])
    rejections = 0
    for slot in range(n_pos, n_pairs):
        while True:
            i = int(rng.integers(graph.num_nodes))
            j = int(rng.integers(graph.num_nodes))
            if i == j or graph.has_edge(i, j):
                rejections += 1
                if rejections > _MAX_REJECTIONS:
                    raise SamplingError(
                        f"{_MAX_REJECTIONS} consecutive rejections sampling non-edges; "
                        "graph too dense"
                    )
                continue
            rejections = 0
            first[slot], second[slot] = i, j
            break

    if cfg.connection_mode == EDGE_EXISTENCE:
        p[:n_pos] = 1.0
        p[n_pos:] = 0.0
    else:
        for slot in range(n_pairs):
            p[slot] = dom.scorer.score(int(first[slot]), int(second[slot]))

    num_classes = graph.num_classes
    y1 = np.zeros((n_pairs, num_classes), dtype=np.float64)
    y2 = np.zeros((n_pairs, num_classes), dtype=np.float64)
    m1 = np.zeros(n_pairs, dtype=np.int64)
    m2 = np.zeros(n_pairs, dtype=np.int64)
    for slot in range(n_pairs):
        i, j = int(first[slot]), int(second[slot])
        if i in dom.labeled_nodes:
            y1[slot, graph.labels[i]] = 1.0
            m1[slot] = 1
        if j in dom.labeled_nodes:
            y2[slot, graph.labels[j]] = 1.0
            m2[slot] = 1
    return first, second, y1, y2, p, m1, m2


def sample_trinity_batch(
    source: DomainSignals,
    target: DomainSignals | None,
    cfg: SamplerConfig,
    pair_layer: Dense,
    step: int = 0,
    rng: np.random.Generator | None = None,
) -> TrinityBatch:
    """Draw k signals for one training step, deterministic per (seed, step).

    The target quota is round(k * target_fraction) (zero when target is
    None); within each domain, round(quota * pos_fraction) signals come from
    uniformly sampled edges and the rest from rejection-sampled non-adjacent
    pairs. Endpoint labels attach only for nodes in the domain's labeled
    set. Gradients flow through the embeddings into the shared pair layer.
    """
    if rng is None:
        rng = np.random.default_rng([cfg.seed, _SAMPLER_STREAM, step])
    n_target = int(round(cfg.k * cfg.target_fraction)) if target is not None else 0
    n_source = cfg.k - n_target

    parts = []
    columns = []
    for dom, quota, tag in ((source, n_source, SOURCE), (target, n_target, TARGET)):
        if quota == 0:
            continue
        first, second, y1, y2, p, m1, m2 = _sample_domain_pairs(dom, quota, cfg, rng)
        pair_rows = concat_cols(
            [gather_rows(dom.embeddings, first), gather_rows(dom.embeddings, second)]
        )
        parts.append(pair_layer(pair_rows))
        columns.append((y1, y2, p, m1, m2, np.full(quota, tag, dtype=np.int64)))

    latent = parts[0] if len(parts) == 1 else concat_rows(parts)
    dtype = latent.values.dtype
    return TrinityBatch(
        latent,
        np.concatenate([c[0] for c in columns]).astype(dtype),
        np.concatenate([c[1] for c in columns]).astype(dtype),
        np.concatenate([c[2] for c in columns]).astype(dtype),
        np.concatenate([c[3] for c in columns]),
        np.concatenate([c[4] for c in columns]),
        np.concatenate([c[5] for c in columns]),
    )


@dataclass(frozen=True)
class MixupPairing:
    """Which signals mix with which, and how strongly.

    Pair t mixes batch element first[t] (weight lam[t]) with element
    second[t] (weight 1 - lam[t]).
    """

    first: np.ndarray
    second: np.ndarray
    lam: np.ndarray

    def __post_init__(self) -> None:
        if not (self.first.shape == self.second.shape == self.lam.shape):
            raise ValueError("pairing arrays must share one length")

    def swapped(self) -> "MixupPairing":
        return MixupPairing(self.second, self.first, 1.0 - self.lam)


def default_pairing(
    k: int, alpha: float, rng: np.random.Generator, mixup: bool = True
) -> MixupPairing:
    """Pair every signal with a uniformly permuted partner, one Beta draw each.

    With mixup disabled the pairing is the identity and every lam is 1, so
    mixing reduces to the original batch.
    """
    first = np.arange(k, dtype=np.int64)
    if not mixup:
        return MixupPairing(first, first.copy(), np.ones(k))
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    second = rng.permutation(k)
    lam = rng.beta(alpha, alpha, size=k)
    return MixupPairing(first, second, lam)


class TrinityClassifier:
    """Shared hidden layer with three heads: two class heads and one
    sigmoid-squashed connection head."""

    def __init__(self, trinity_dim: int, num_classes: int, name: str,
                 rng: np.random.Generator, dtype=np.float32, hidden: int = CLASSIFIER_HIDDEN):
        self.num_classes = num_classes
        self.hidden = Dense(trinity_dim, hidden, f"{name}.hidden", rng, dtype)
        self.head_y1 = Dense(hidden, num_classes, f"{name}.head_y1", rng, dtype)
        self.head_y2 = Dense(hidden, num_classes, f"{name}.head_y2", rng, dtype)
        self.head_p = Dense(hidden, 1, f"{name}.head_p", rng, dtype)

    def __call__(self, latent: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        hid = relu(self.hidden(latent))
        batch = latent.values.shape[0]
        p_pred = reshape(sigmoid(self.head_p(hid)), (batch,))
        return self.head_y1(hid), self.head_y2(hid), p_pred

    def parameters(self) -> list[Parameter]:
        return (
            self.hidden.parameters()
            + self.head_y1.parameters()
            + self.head_y2.parameters()
            + self.head_p.parameters()
        )


def signal_loss(
    batch: TrinityBatch,
    classifier: TrinityClassifier,
    pairing: MixupPairing,
    use_link: bool = True,
) -> Tensor:
    """Composite loss on mixed signals: two masked cross-entropies plus the
    squared error of the connection head.

    Mixed class targets keep their head only when both parents carry that
    label. With use_link=False the connection term is dropped entirely.
    """
    if len(batch) == 0:
        raise ValueError("signal_loss on an empty batch")
    a, b = pairing.first, pairing.second
    dtype = batch.latent.values.dtype
    lam = pairing.lam.astype(dtype)[:, None]

    mixed_latent = mix_latents(
        gather_rows(batch.latent, a), gather_rows(batch.latent, b), lam
    )
    lam_flat = lam[:, 0]
    y1 = lam * batch.y1[a] + (1.0 - lam) * batch.y1[b]
    y2 = lam * batch.y2[a] + (1.0 - lam) * batch.y2[b]
    m1 = batch.y1_mask[a] & batch.y1_mask[b]
    m2 = batch.y2_mask[a] & batch.y2_mask[b]
    p = lam_flat * batch.p[a] + (1.0 - lam_flat) * batch.p[b]

    y1_logits, y2_logits, p_pred = classifier(mixed_latent)
    loss = add(
        softmax_cross_entropy(y1_logits, y1, m1),
        softmax_cross_entropy(y2_logits, y2, m2),
    )
    if use_link:
        loss = add(loss, mse(p_pred, p, np.ones(len(a), dtype=np.int64)))
    return loss

"""Graph containers, dataset directory I/O, splits, and synthetic graphs.

A dataset directory holds four text files (UTF-8, LF newlines):

    meta.json      {"num_nodes": int, "feature_dim": int, "label_vocab": [str, ...]}
    edges.tsv      one undirected edge per line: "i<TAB>j" (0-based node ids)
    features.csv   one line per node with feature_dim comma-separated reals
    labels.tsv     lines "node<TAB>label_name"; nodes absent from the file
                   are unlabeled

Graphs are undirected and stored dense; the target scale is a few thousand
nodes. Transfer pairs may use different feature dimensions, but must share
an identical label vocabulary.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

META_FILE = "meta.json"
EDGES_FILE = "edges.tsv"
FEATURES_FILE = "features.csv"
LABELS_FILE = "labels.tsv"

UNLABELED = -1


class DatasetError(ValueError):
    """Malformed dataset directory; the message names the file (and line)."""


def _fail(path: Path, message: str, line_no: int | None = None) -> None:
    location = f"{path}:{line_no}" if line_no is not None else str(path)
    raise DatasetError(f"{location}: {message}")


@dataclass(frozen=True)
class LabeledGraph:
    """Undirected graph with dense node features and partial node labels.

    Edges are stored as unordered pairs, canonicalized to (i, j) with i < j,
    deduplicated and sorted. ``labels[i]`` is an index into ``label_vocab``
    or ``UNLABELED``. Arrays are defensively copied and frozen.
    """

    num_nodes: int
    edges: np.ndarray        # [E, 2] int64, i < j, sorted, no duplicates
    features: np.ndarray     # [num_nodes, feature_dim] float64
    labels: np.ndarray       # [num_nodes] int64, UNLABELED where missing
    label_vocab: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.num_nodes < 1:
            raise ValueError("num_nodes must be >= 1")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= self.num_nodes:
                raise ValueError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
            edges = np.sort(edges, axis=1)
            edges = np.unique(edges, axis=0)
        features = np.array(self.features, dtype=np.float64, copy=True)
        if features.ndim != 2 or features.shape[0] != self.num_nodes:
            raise ValueError("features must have one row per node")
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if labels.shape != (self.num_nodes,):
            raise ValueError("labels must have one entry per node")
        present = labels[labels != UNLABELED]
        if present.size and (present.min() < 0 or present.max() >= len(self.label_vocab)):
            raise ValueError("label index out of vocabulary range")
        for arr in (edges, features, labels):
            arr.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_vocab", tuple(self.label_vocab))
        object.__setattr__(
            self, "_edge_set", frozenset((int(i), int(j)) for i, j in edges)
        )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.label_vocab)

    def has_edge(self, i: int, j: int) -> bool:
        a, b = (i, j) if i < j else (j, i)
        return (a, b) in self._edge_set

    def labeled_nodes(self) -> np.ndarray:
        """Indices of all nodes that carry a label, ascending."""
        return np.flatnonzero(self.labels != UNLABELED)


@dataclass(frozen=True)
class FewShotSplit:
    """Per-class few-shot labeled nodes plus the held-out evaluation nodes."""

    labeled_nodes: tuple[np.ndarray, ...]   # one array of node ids per class
    eval_nodes: np.ndarray

    def __post_init__(self) -> None:
        train = np.concatenate(self.labeled_nodes) if self.labeled_nodes else np.array([], np.int64)
        if np.intersect1d(train, self.eval_nodes).size:
            raise ValueError("labeled and eval nodes overlap")

    @property
    def train_nodes(self) -> np.ndarray:
        """All few-shot labeled node ids, ascending."""
        return np.sort(np.concatenate(self.labeled_nodes))


def load_graph(dataset_dir: str | Path) -> LabeledGraph:
    """Read a dataset directory into a LabeledGraph.

    Duplicate and reversed edge lines collapse to one stored edge. Every
    format violation raises DatasetError naming the offending file and line.
    """
    d = Path(dataset_dir)
    meta = _read_meta(d / META_FILE)
    n = meta["num_nodes"]
    dim = meta["feature_dim"]
    vocab = meta["label_vocab"]

    edges = _read_edges(d / EDGES_FILE, n)
    features = _read_features(d / FEATURES_FILE, n, dim)
    labels = _read_labels(d / LABELS_FILE, n, vocab)
    return LabeledGraph(n, edges, features, labels, tuple(vocab))


def _require_file(path: Path) -> None:
    if not path.is_file():
        _fail(path, "missing file")


def _read_meta(path: Path) -> dict:
    _require_file(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        _fail(path, f"invalid JSON ({exc})")
    if not isinstance(raw, dict):
        _fail(path, "meta must be a JSON object")
    expected = {"num_nodes", "feature_dim", "label_vocab"}
    if set(raw) != expected:
        _fail(path, f"meta keys must be exactly {sorted(expected)}, got {sorted(raw)}")
    if not isinstance(raw["num_nodes"], int) or raw["num_nodes"] < 1:
        _fail(path, "num_nodes must be a positive integer")
    if not isinstance(raw["feature_dim"], int) or raw["feature_dim"] < 1:
        _fail(path, "feature_dim must be a positive integer")
    vocab = raw["label_vocab"]
    if (
        not isinstance(vocab, list)
        or not vocab
        or not all(isinstance(name, str) and name for name in vocab)
    ):
        _fail(path, "label_vocab must be a non-empty list of non-empty strings")
    if len(set(vocab)) != len(vocab):
        _fail(path, "label_vocab contains duplicate names")
    return raw


def _read_edges(path: Path, num_nodes: int) -> np.ndarray:
    _require_file(path)
    pairs = set()
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                _fail(path, "expected two tab-separated node indices", line_no)
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                _fail(path, f"non-integer node index in {line!r}", line_no)
            if not (0 <= i < num_nodes and 0 <= j < num_nodes):
                _fail(path, f"node index out of range in {line!r}", line_no)
            if i == j:
                _fail(path, f"self-loop on node {i}", line_no)
            pairs.add((min(i, j), max(i, j)))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(pairs), dtype=np.int64)


def _read_features(path: Path, num_nodes: int, feature_dim: int) -> np.ndarray:
    _require_file(path)
    rows = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if len(rows) >= num_nodes:
                _fail(path, f"more than {num_nodes} feature rows", line_no)
            parts = line.split(",")
            if len(parts) != feature_dim:
                _fail(path, f"expected {feature_dim} values, got {len(parts)}", line_no)
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                _fail(path, "non-numeric feature value", line_no)
    if len(rows) != num_nodes:
        _fail(path, f"expected {num_nodes} feature rows, got {len(rows)}")
    return np.array(rows, dtype=np.float64)


def _read_labels(path: Path, num_nodes: int, vocab: list[str]) -> np.ndarray:
    _require_file(path)
    index = {name: k for k, name in enumerate(vocab)}
    labels = np.full(num_nodes, UNLABELED, dtype=np.int64)
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                _fail(path, "expected 'node<TAB>label_name'", line_no)
            try:
                node = int(parts[0])
            except ValueError:
                _fail(path, f"non-integer node index {parts[0]!r}", line_no)
            if not 0 <= node < num_nodes:
                _fail(path, f"node index {node} out of range", line_no)
            if parts[1] not in index:
                _fail(path, f"unknown label name {parts[1]!r}", line_no)
            if labels[node] != UNLABELED:
                _fail(path, f"node {node} labeled twice", line_no)
            labels[node] = index[parts[1]]
    return labels


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def save_graph(g: LabeledGraph, dataset_dir: str | Path) -> None:
    """Write a graph as a dataset directory (inverse of load_graph).

    Feature values are written with round-tripping precision, so
    load_graph(save_graph(g)) reproduces features bit for bit.
    """
    d = Path(dataset_dir)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_nodes": g.num_nodes,
        "feature_dim": g.feature_dim,
        "label_vocab": list(g.label_vocab),
    }
    _write_atomic(d / META_FILE, json.dumps(meta, indent=2) + "\n")
    edge_lines = [f"{i}\t{j}\n" for i, j in g.edges]
    _write_atomic(d / EDGES_FILE, "".join(edge_lines))
    feature_lines = [
        ",".join(repr(float(v)) for v in row) + "\n" for row in g.features
    ]
    _write_atomic(d / FEATURES_FILE, "".join(feature_lines))
    label_lines = [
        f"{node}\t{g.label_vocab[g.labels[node]]}\n"
        for node in g.labeled_nodes()
    ]
    _write_atomic(d / LABELS_FILE, "".join(label_lines))


def normalized_adjacency(g: LabeledGraph) -> np.ndarray:
    """Symmetrically normalized adjacency with self-loops.

    Returns D^{-1/2} (A + I) D^{-1/2} where D is the degree matrix of A + I.
    Symmetric, entries in [0, 1].
    """
    n = g.num_nodes
    a = np.zeros((n, n), dtype=np.float64)
    if g.num_edges:
        a[g.edges[:, 0], g.edges[:, 1]] = 1.0
        a[g.edges[:, 1], g.edges[:, 0]] = 1.0
    a[np.diag_indices(n)] = 1.0
    d_inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def few_shot_split(g: LabeledGraph, n_shot: int, seed: int) -> FewShotSplit:
    """Draw exactly n_shot labeled nodes per class; the rest become eval nodes.

    Deterministic for a fixed seed. Raises if any class has fewer than
    n_shot + 1 labeled nodes (at least one eval node per class is required).
    """
    if n_shot < 1:
        raise ValueError("n_shot must be >= 1")
    rng = np.random.default_rng(seed)
    per_class: list[np.ndarray] = []
    chosen_all: list[np.ndarray] = []
    for c, name in enumerate(g.label_vocab):
        candidates = np.flatnonzero(g.labels == c)
        if candidates.size < n_shot + 1:
            raise ValueError(
                f"class {name!r} has {candidates.size} labeled nodes, "
                f"needs at least {n_shot + 1}"
            )
        chosen = np.sort(rng.choice(candidates, size=n_shot, replace=False))
        per_class.append(chosen)
        chosen_all.append(chosen)
    train = np.concatenate(chosen_all)
    eval_nodes = np.setdiff1d(g.labeled_nodes(), train)
    return FewShotSplit(tuple(per_class), eval_nodes)


@dataclass(frozen=True)
class SbmSpec:
    """Stochastic block model with class-conditioned Gaussian features.

    Node i belongs to class i mod num_classes (balanced by construction).
    Intra-class pairs are edges with probability intra_p, inter-class pairs
    with inter_p. Feature row i is class_centers[class(i)] plus Gaussian
    noise, optionally with its coordinates permuted (output column k takes
    input coordinate feature_permutation[k]).
    """

    num_nodes: int
    num_classes: int
    intra_p: float
    inter_p: float
    feature_dim: int
    class_centers: np.ndarray      # [num_classes, feature_dim]
    feature_noise: float
    feature_permutation: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 1 or self.num_nodes < self.num_classes:
            raise ValueError("need num_nodes >= num_classes >= 1")
        if not 0.0 <= self.inter_p <= self.intra_p <= 1.0:
            raise ValueError("need 0 <= inter_p <= intra_p <= 1")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be >= 0")
        centers = np.array(self.class_centers, dtype=np.float64, copy=True)
        if centers.shape != (self.num_classes, self.feature_dim):
            raise ValueError("class_centers must be [num_classes x feature_dim]")
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                if np.array_equal(centers[a], centers[b]):
                    raise ValueError(f"class centers {a} and {b} coincide")
        centers.setflags(write=False)
        object.__setattr__(self, "class_centers", centers)
        if self.feature_permutation is not None:
            perm = np.asarray(self.feature_permutation, dtype=np.int64)
            if sorted(perm.tolist()) != list(range(self.feature_dim)):
                raise ValueError("feature_permutation is not a permutation of the coordinates")
            perm = perm.copy()
            perm.setflags(write=False)
            object.__setattr__(self, "feature_permutation", perm)


def generate_sbm(spec: SbmSpec) -> LabeledGraph:
    """Sample a fully labeled graph from the block model, deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    n, c = spec.num_nodes, spec.num_classes
    classes = np.arange(n, dtype=np.int64) % c

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(classes[iu] == classes[ju], spec.intra_p, spec.inter_p)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    features = spec.class_centers[classes] + spec.feature_noise * rng.standard_normal(
        (n, spec.feature_dim)
    )
    if spec.feature_permutation is not None:
        features = features[:, spec.feature_permutation]

    vocab = tuple(f"class_{k}" for k in range(c))
    return LabeledGraph(n, edges, features, classes, vocab)


def personalized_pagerank(
    g: LabeledGraph,
    source: int,
    teleport: float,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Restart-at-source PageRank by power iteration.

    Iterates pi <- teleport * e_source + (1 - teleport) * (P^T pi + m * e_source)
    where P is the row-stochastic transition matrix of the graph and m is
    the probability mass sitting on degree-zero nodes (which can only
    restart). Stops when the L1 change drops below tol. The result is
    nonnegative and sums to one.
    """
    if not 0.0 < teleport <= 1.0:
        raise ValueError("teleport must be in (0, 1]")
    n = g.num_nodes
    if not 0 <= source < n:
        raise ValueError("source node out of range")

    adj = np.zeros((n, n), dtype=np.float64)
    if g.num_edges:
        adj[g.edges[:, 0], g.edges[:, 1]] = 1.0
        adj[g.edges[:, 1], g.edges[:, 0]] = 1.0
    degree = adj.sum(axis=1)
    connected = degree > 0
    trans = np.zeros_like(adj)
    trans[connected] = adj[connected] / degree[connected, None]

    pi = np.zeros(n, dtype=np.float64)
    pi[source] = 1.0
    if teleport == 1.0:
        return pi
    for _ in range(max_iter):
        walk = trans.T @ pi
        dangling = pi[~connected].sum()
        nxt = (1.0 - teleport) * walk
        nxt[source] += teleport + (1.0 - teleport) * dangling
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    raise RuntimeError("personalized_pagerank did not converge")

"""End-to-end training: adversarial pre-training on both graphs, few-shot
fine-tuning of the target branch, evaluation, and multi-seed experiments.

Pre-training minimizes L_total = L_domain + gamma * L_signal over the
encoders, shared GNN, discriminators, pair layer, and signal classifier.
Fine-tuning then attaches a linear head on the GNN output and updates only
the target encoder, the GNN, and that head with cross-entropy on the
few-shot labeled target nodes. Every random draw derives from the run seed,
so identical seeds give bit-identical checkpoints and reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, backward, adam_step, gather_rows, scale, softmax_cross_entropy
from .graphs import (
    FewShotSplit,
    LabeledGraph,
    few_shot_split,
    load_graph,
    normalized_adjacency,
)
from .trinity import (
    EDGE_EXISTENCE,
    PPR,
    CONNECTION_MODES,
    DomainSignals,
    MixupPairing,
    PprScorer,
    SamplerConfig,
    TrinityClassifier,
    default_pairing,
    sample_trinity_batch,
    signal_loss,
)
from .unify import (
    Dense,
    DomainDiscriminator,
    FeatureEncoder,
    SharedGnn,
    domain_loss,
    grl_schedule,
)

TRAIN_DTYPE = np.float32

_STREAM_INIT = 0
_STREAM_HEAD = 3
_STREAM_PAIRING = 12

_ABLATION_FLAGS = (
    "disable_unif_f",
    "disable_unif_s",
    "disable_mixup",
    "disable_node_signals",
    "disable_link_signals",
    "disable_target_signals",
)


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of the training pipeline, with its ablation switches."""

    pretrain_epochs: int = 2000
    finetune_epochs: int = 800
    lr: float = 3e-3
    gamma: float = 1.0
    alpha: float = 1.0
    k: int = 256
    n_shot: int = 5
    unified_dim: int = 100
    gnn_dims: tuple[int, ...] = (64, 32, 16)
    trinity_dim: int = 32
    seed: int = 0
    pos_fraction: float = 0.5
    target_fraction: float = 0.5
    connection_mode: str = EDGE_EXISTENCE
    disable_unif_f: bool = False
    disable_unif_s: bool = False
    disable_mixup: bool = False
    disable_node_signals: bool = False
    disable_link_signals: bool = False
    disable_target_signals: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "gnn_dims", tuple(int(d) for d in self.gnn_dims))
        for name in ("n_shot", "unified_dim", "trinity_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.lr <= 0 or self.alpha <= 0:
            raise ValueError("lr and alpha must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if not all(d >= 1 for d in self.gnn_dims) or not self.gnn_dims:
            raise ValueError("gnn_dims must be positive")
        if not 0.0 <= self.pos_fraction <= 1.0 or not 0.0 <= self.target_fraction <= 1.0:
            raise ValueError("fractions must be in [0, 1]")
        if self.connection_mode not in CONNECTION_MODES:
            raise ValueError(f"connection_mode must be one of {CONNECTION_MODES}")

    @property
    def gnn_out_dim(self) -> int:
        return self.gnn_dims[-1]

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["gnn_dims"] = list(self.gnn_dims)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class DomainData:
    """A graph prepared for training: tensors plus signal-label bookkeeping."""

    graph: LabeledGraph
    x: Tensor
    a_hat: Tensor
    signal_nodes: frozenset[int]
    scorer: PprScorer | None


def prepare_domain(
    graph: LabeledGraph,
    signal_nodes,
    connection_mode: str = EDGE_EXISTENCE,
    dtype=TRAIN_DTYPE,
) -> DomainData:
    """Cast features and normalized adjacency to tensors once per run."""
    x = Tensor(graph.features.astype(dtype))
    a_hat = Tensor(normalized_adjacency(graph).astype(dtype))
    scorer = PprScorer(graph) if connection_mode == PPR else None
    return DomainData(graph, x, a_hat, frozenset(int(v) for v in signal_nodes), scorer)


class TransNetModel:
    """All trainable pieces: two encoders, the shared GNN, two domain
    discriminators, the pair layer, the signal classifier, and (after
    fine-tune initialization) the downstream head."""

    def __init__(self, source_dim: int, target_dim: int, num_classes: int,
                 cfg: TrainConfig, dtype=TRAIN_DTYPE):
        self.source_dim = source_dim
        self.target_dim = target_dim
        self.num_classes = num_classes
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng([cfg.seed, _STREAM_INIT])
        self.source_encoder = FeatureEncoder(source_dim, cfg.unified_dim, "source_encoder", rng, dtype)
        self.target_encoder = FeatureEncoder(target_dim, cfg.unified_dim, "target_encoder", rng, dtype)
        self.gnn = SharedGnn(cfg.unified_dim, cfg.gnn_dims, "gnn", rng, dtype)
        self.disc_feature = DomainDiscriminator(cfg.unified_dim, "disc_feature", rng, dtype)
        self.disc_structure = DomainDiscriminator(cfg.gnn_out_dim, "disc_structure", rng, dtype)
        self.pair_layer = Dense(2 * cfg.gnn_out_dim, cfg.trinity_dim, "pair_layer", rng, dtype)
        self.classifier_g = TrinityClassifier(cfg.trinity_dim, num_classes, "classifier_g", rng, dtype)
        self.classifier_h: Dense | None = None

    # -- parameter groups ---------------------------------------------------
    def pretrain_parameters(self) -> list[Parameter]:
        return (
            self.source_encoder.parameters()
            + self.target_encoder.parameters()
            + self.gnn.parameters()
            + self.disc_feature.parameters()
            + self.disc_structure.parameters()
            + self.pair_layer.parameters()
            + self.classifier_g.parameters()
        )

    def finetune_parameters(self) -> list[Parameter]:
        if self.classifier_h is None:
            raise ValueError("downstream head not initialized")
        return (
            self.target_encoder.parameters()
            + self.gnn.parameters()
            + self.classifier_h.parameters()
        )

    def all_parameters(self) -> list[Parameter]:
        params = self.pretrain_parameters()
        if self.classifier_h is not None:
            params += self.classifier_h.parameters()
        return params

    def init_downstream_head(self) -> None:
        rng = np.random.default_rng([self.cfg.seed, _STREAM_HEAD])
        self.classifier_h = Dense(self.cfg.gnn_out_dim, self.num_classes,
                                  "classifier_h", rng, self.dtype)

    # -- forward passes -----------------------------------------------------
    def encode_domain(self, x: Tensor, a_hat: Tensor, domain: str) -> tuple[Tensor, Tensor]:
        """Encoder output h and GNN output z for one domain."""
        encoder = self.source_encoder if domain == "source" else self.target_encoder
        h = encoder(x)
        z = self.gnn(h, a_hat)
        return h, z

    def target_class_logits(self, graph: LabeledGraph) -> np.ndarray:
        """Downstream head logits for every target node (inference only)."""
        if self.classifier_h is None:
            raise ValueError("downstream head not initialized")
        x = Tensor(graph.features.astype(self.dtype))
        a_hat = Tensor(normalized_adjacency(graph).astype(self.dtype))
        _, z = self.encode_domain(x, a_hat, "target")
        return self.classifier_h(z).values

    # -- state --------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.values.copy() for p in self.all_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        if "classifier_h.weight" in arrays and self.classifier_h is None:
            self.init_downstream_head()
        params = {p.name: p for p in self.all_parameters()}
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in params.items():
            p.values = np.asarray(arrays[name], dtype=p.values.dtype).reshape(p.values.shape)


def total_loss(domain_term, signal_term, gamma: float) -> Tensor:
    """L_total = L_domain + gamma * L_signal."""
    return ad.add(domain_term, scale(signal_term, gamma))


@dataclass
class PretrainTrace:
    total: list[float] = field(default_factory=list)
    domain: list[float] = field(default_factory=list)
    signal: list[float] = field(default_factory=list)


def _fill_missing_grads(params: list[Parameter]) -> None:
    # losses disabled by ablation leave parts of the model unreached
    for p in params:
        if p.tensor.grad is None:
            p.tensor.grad = np.zeros_like(p.values)


def _one_hot_rows(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    rows = np.zeros((labels.size, num_classes), dtype=dtype)
    rows[np.arange(labels.size), labels] = 1.0
    return rows


def pretrain(model: TransNetModel, source: DomainData, target: DomainData,
             cfg: TrainConfig) -> PretrainTrace:
    """Adversarial pre-training over both graphs, full batch per epoch.

    Each epoch: encode both domains, apply the annealed gradient reversal to
    the two discriminator losses, draw k trinity signals (ablation flags may
    suppress node labels, the link term, target-domain signals, or mixup),
    and take one Adam step on the combined objective. The downstream head is
    untouched.
    """
    if source.graph.label_vocab != target.graph.label_vocab:
        raise ValueError("source and target label vocabularies differ")
    if not source.signal_nodes:
        raise ValueError("source domain has no labeled nodes")
    sampler_cfg = SamplerConfig(
        k=cfg.k,
        pos_fraction=cfg.pos_fraction,
        connection_mode=cfg.connection_mode,
        target_fraction=cfg.target_fraction,
        seed=cfg.seed,
    )
    params = model.pretrain_parameters()
    trace = PretrainTrace()
    for epoch in range(cfg.pretrain_epochs):
        mu = grl_schedule(epoch / cfg.pretrain_epochs)
        h_s, z_s = model.encode_domain(source.x, source.a_hat, "source")
        h_t, z_t = model.encode_domain(target.x, target.a_hat, "target")

        l_domain = domain_loss(
            h_s, h_t, z_s, z_t,
            model.disc_feature, model.disc_structure, mu,
            use_feature=not cfg.disable_unif_f,
            use_structure=not cfg.disable_unif_s,
        )

        source_signals = DomainSignals(source.graph, z_s, source.signal_nodes, source.scorer)
        target_signals = (
            None
            if cfg.disable_target_signals
            else DomainSignals(target.graph, z_t, target.signal_nodes, target.scorer)
        )
        batch = sample_trinity_batch(source_signals, target_signals, sampler_cfg,
                                     model.pair_layer, step=epoch)
        if cfg.disable_node_signals:
            batch = batch.without_node_labels()
        pairing = default_pairing(
            cfg.k, cfg.alpha,
            np.random.default_rng([cfg.seed, _STREAM_PAIRING, epoch]),
            mixup=not cfg.disable_mixup,
        )
        l_signal = signal_loss(batch, model.classifier_g, pairing,
                               use_link=not cfg.disable_link_signals)

        l_total = total_loss(l_domain, l_signal, cfg.gamma)
        backward(l_total)
        _fill_missing_grads(params)
        adam_step(params, cfg.lr)

        trace.domain.append(float(l_domain.values))
        trace.signal.append(float(l_signal.values))
        trace.total.append(float(l_total.values))
    return trace


def finetune(model: TransNetModel, target: DomainData, split: FewShotSplit,
             cfg: TrainConfig) -> list[float]:
    """Supervised fine-tuning of the target branch on the few-shot nodes.

    Initializes the downstream head and updates only the target encoder, the
    shared GNN, and that head; everything else stays frozen.
    """
    nodes = split.train_nodes
    if nodes.size == 0:
        raise ValueError("few-shot split has no labeled nodes")
    if model.classifier_h is None:
        model.init_downstream_head()
    params = model.finetune_parameters()
    targets = _one_hot_rows(target.graph.labels[nodes], model.num_classes, model.dtype)
    mask = np.ones(nodes.size, dtype=np.int64)
    losses: list[float] = []
    for _ in range(cfg.finetune_epochs):
        _, z = model.encode_domain(target.x, target.a_hat, "target")
        logits = model.classifier_h(gather_rows(z, nodes))
        loss = softmax_cross_entropy(logits, targets, mask)
        backward(loss)
        adam_step(params, cfg.lr)
        losses.append(float(loss.values))
    return losses


def evaluate_precision(model: TransNetModel, graph: LabeledGraph, eval_nodes) -> float:
    """Micro-averaged precision (= accuracy for single-label prediction)."""
    micro, _ = evaluate_metrics(model, graph, eval_nodes)
    return micro


def evaluate_metrics(model: TransNetModel, graph: LabeledGraph, eval_nodes) -> tuple[float, float]:
    """(micro precision, macro precision) of argmax predictions on eval nodes.

    Macro averages per-class precision over all classes, counting classes
    that were never predicted as 0.
    """
    nodes = np.asarray(eval_nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("empty evaluation set")
    logits = model.target_class_logits(graph)[nodes]
    pred = logits.argmax(axis=1)
    truth = graph.labels[nodes]
    micro = float((pred == truth).mean())
    per_class = []
    for c in range(model.num_classes):
        hits = pred == c
        per_class.append(float((truth[hits] == c).mean()) if hits.any() else 0.0)
    return micro, float(np.mean(per_class))


# ---------------------------------------------------------------------------
# experiments


@dataclass
class SeedResult:
    seed: int
    precision: float
    macro_precision: float
    loss_trace: list[float]          # L_total per pre-train epoch
    domain_trace: list[float]
    signal_trace: list[float]
    finetune_trace: list[float]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MetricsReport:
    config: dict
    seeds: list[SeedResult]
    precision_mean: float
    precision_std: float
    config_fingerprint: str
    wall_clock_seconds: float

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seeds": [s.to_dict() for s in self.seeds],
            "precision_mean": self.precision_mean,
            "precision_std": self.precision_std,
            "config_fingerprint": self.config_fingerprint,
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
        os.replace(tmp, path)


def _resolve_graph(graph_or_dir) -> LabeledGraph:
    if isinstance(graph_or_dir, LabeledGraph):
        return graph_or_dir
    return load_graph(graph_or_dir)


def run_single(source_graph: LabeledGraph, target_graph: LabeledGraph,
               cfg: TrainConfig) -> tuple[SeedResult, TransNetModel, FewShotSplit]:
    """One seed: split, pre-train, fine-tune, evaluate."""
    if source_graph.label_vocab != target_graph.label_vocab:
        raise ValueError("source and target label vocabularies differ")
    split = few_shot_split(target_graph, cfg.n_shot, cfg.seed)
    model = TransNetModel(source_graph.feature_dim, target_graph.feature_dim,
                          source_graph.num_classes, cfg)
    source = prepare_domain(source_graph, source_graph.labeled_nodes(), cfg.connection_mode)
    target = prepare_domain(target_graph, split.train_nodes, cfg.connection_mode)
    trace = pretrain(model, source, target, cfg)
    ft = finetune(model, target, split, cfg)
    micro, macro = evaluate_metrics(model, target_graph, split.eval_nodes)
    result = SeedResult(cfg.seed, micro, macro, trace.total, trace.domain,
                        trace.signal, ft)
    return result, model, split


def run_experiment(source, target, cfg: TrainConfig, num_seeds: int,
                   checkpoint_path=None) -> MetricsReport:
    """Repeat the full pipeline over seeds cfg.seed .. cfg.seed + num_seeds - 1.

    When checkpoint_path is given, the final seed's parameters are saved
    there together with the config and label vocabulary.
    """
    if num_seeds < 1:
        raise ValueError("num_seeds must be >= 1")
    source_graph = _resolve_graph(source)
    target_graph = _resolve_graph(target)
    started = time.monotonic()
    results: list[SeedResult] = []
    last_model: TransNetModel | None = None
    for i in range(num_seeds):
        seed_cfg = dataclasses.replace(cfg, seed=cfg.seed + i)
        result, model, _ = run_single(source_graph, target_graph, seed_cfg)
        results.append(result)
        last_model = model
    precisions = np.array([r.precision for r in results])
    report = MetricsReport(
        config=cfg.to_dict(),
        seeds=results,
        precision_mean=float(precisions.mean()),
        precision_std=float(precisions.std()),
        config_fingerprint=cfg.fingerprint(),
        wall_clock_seconds=time.monotonic() - started,
    )
    if checkpoint_path is not None:
        save_model_checkpoint(checkpoint_path, last_model, source_graph.label_vocab)
    return report


def run_target_only(target, cfg: TrainConfig, num_seeds: int) -> MetricsReport:
    """Baseline: the same target branch (encoder, GNN, head) trained only on
    the few-shot target labels for the same total epoch budget, no source
    graph and no pre-training objectives."""
    if num_seeds < 1:
        raise ValueError("num_seeds must be >= 1")
    target_graph = _resolve_graph(target)
    started = time.monotonic()
    budget = cfg.pretrain_epochs + cfg.finetune_epochs
    results: list[SeedResult] = []
    for i in range(num_seeds):
        seed_cfg = dataclasses.replace(cfg, seed=cfg.seed + i, finetune_epochs=budget)
        split = few_shot_split(target_graph, seed_cfg.n_shot, seed_cfg.seed)
        model = TransNetModel(target_graph.feature_dim, target_graph.feature_dim,
                              target_graph.num_classes, seed_cfg)
        data = prepare_domain(target_graph, split.train_nodes, seed_cfg.connection_mode)
        ft = finetune(model, data, split, seed_cfg)
        micro, macro = evaluate_metrics(model, target_graph, split.eval_nodes)
        results.append(SeedResult(seed_cfg.seed, micro, macro, [], [], [], ft))
    precisions = np.array([r.precision for r in results])
    return MetricsReport(
        config={**cfg.to_dict(), "baseline": "target_only"},
        seeds=results,
        precision_mean=float(precisions.mean()),
        precision_std=float(precisions.std()),
        config_fingerprint=cfg.fingerprint(),
        wall_clock_seconds=time.monotonic() - started,
    )


# ---------------------------------------------------------------------------
# model checkpoints

_CHECKPOINT_FORMAT = 1


def save_model_checkpoint(path, model: TransNetModel, label_vocab) -> None:
    meta = {
        "format": _CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "source_dim": model.source_dim,
        "target_dim": model.target_dim,
        "num_classes": model.num_classes,
        "label_vocab": list(label_vocab),
        "has_head": model.classifier_h is not None,
    }
    ad.save_checkpoint(path, model.state_dict(), meta)


def load_model_checkpoint(path) -> tuple[TransNetModel, dict]:
    arrays, meta = ad.load_checkpoint(path)
    for key in ("config", "source_dim", "target_dim", "num_classes", "label_vocab"):
        if key not in meta:
            raise ad.CheckpointError(f"checkpoint {path} misses meta key {key!r}")
    cfg = TrainConfig.from_dict(meta["config"])
    model = TransNetModel(meta["source_dim"], meta["target_dim"],
                          meta["num_classes"], cfg)
    if meta.get("has_head"):
        model.init_downstream_head()
    model.load_state_dict(arrays)
    return model, meta

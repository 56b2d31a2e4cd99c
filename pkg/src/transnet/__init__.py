"""Knowledge transfer from a label-rich source graph to a label-scarce
target graph: adversarial domain unification, trinity-signal mixup, and the
pre-train/fine-tune pipeline."""

from .autodiff import (
    Parameter,
    Tensor,
    adam_step,
    backward,
    binary_cross_entropy_logits,
    gradient_reversal,
    linear,
    load_checkpoint,
    mse,
    relu,
    save_checkpoint,
    softmax_cross_entropy,
)
from .graphs import (
    DatasetError,
    FewShotSplit,
    LabeledGraph,
    SbmSpec,
    few_shot_split,
    generate_sbm,
    load_graph,
    normalized_adjacency,
    personalized_pagerank,
    save_graph,
)
from .training import (
    MetricsReport,
    TrainConfig,
    TransNetModel,
    evaluate_precision,
    finetune,
    pretrain,
    run_experiment,
    run_target_only,
    total_loss,
)
from .trinity import (
    SamplerConfig,
    TrinityLabel,
    TrinitySignal,
    build_trinity,
    mixup_labels,
    mixup_signals,
    sample_lambda,
    sample_trinity_batch,
    signal_loss,
)
from .unify import DomainDiscriminator, FeatureEncoder, SharedGnn, domain_loss, grl_schedule

__version__ = "0.1.0"

"""Domain unification: per-domain feature encoders, a shared GNN, and the
bi-level adversarial discrepancy loss.

Each domain gets its own MLP encoder into a common hidden space; a shared
graph convolution stack then extracts structural embeddings. Two binary
domain discriminators (one on encoder outputs, one on GNN outputs) sit
behind a gradient-reversal layer: minimizing the returned loss trains the
discriminators to tell domains apart while the reversed gradient pushes the
encoders and GNN to make them indistinguishable.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    binary_cross_entropy_logits,
    concat_rows,
    gradient_reversal,
    linear,
    matmul,
    relu,
)

UNIFIED_DIM_DEFAULT = 100
GNN_DIMS_DEFAULT = (64, 32, 16)
DISCRIMINATOR_HIDDEN = 32


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Dense:
    """A single affine layer with Glorot-initialized weight and zero bias."""

    def __init__(self, in_dim: int, out_dim: int, name: str, rng: np.random.Generator, dtype=np.float32):
        self.weight = Parameter(glorot(rng, in_dim, out_dim, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class FeatureEncoder:
    """Per-domain MLP (linear -> ReLU -> linear) into the unified space."""

    def __init__(self, in_dim: int, unified_dim: int, name: str, rng: np.random.Generator, dtype=np.float32):
        self.in_dim = in_dim
        self.unified_dim = unified_dim
        self.fc1 = Dense(in_dim, unified_dim, f"{name}.fc1", rng, dtype)
        self.fc2 = Dense(unified_dim, unified_dim, f"{name}.fc2", rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.values.shape[1] != self.in_dim:
            raise ValueError(f"encoder expects width {self.in_dim}, got {x.values.shape[1]}")
        return self.fc2(relu(self.fc1(x)))

    def parameters(self) -> list[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()


class SharedGnn:
    """Graph convolution stack shared by both domains.

    Layer k computes A_hat @ h @ W_k with ReLU after every layer except the
    last; weights carry no bias, so the map is permutation equivariant.
    """

    def __init__(self, in_dim: int, dims: tuple[int, ...], name: str, rng: np.random.Generator, dtype=np.float32):
        if not dims:
            raise ValueError("SharedGnn needs at least one layer")
        self.dims = tuple(dims)
        self.weights: list[Parameter] = []
        prev = in_dim
        for k, width in enumerate(self.dims, start=1):
            self.weights.append(Parameter(glorot(rng, prev, width, dtype), f"{name}.w{k}"))
            prev = width

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def __call__(self, h: Tensor, a_hat: Tensor) -> Tensor:
        for k, w in enumerate(self.weights):
            h = matmul(matmul(a_hat, h), w)
            if k < len(self.weights) - 1:
                h = relu(h)
        return h

    def parameters(self) -> list[Parameter]:
        return list(self.weights)


class DomainDiscriminator:
    """Two-layer perceptron producing one domain logit per node."""

    def __init__(self, in_dim: int, name: str, rng: np.random.Generator, dtype=np.float32,
                 hidden: int = DISCRIMINATOR_HIDDEN):
        self.fc1 = Dense(in_dim, hidden, f"{name}.fc1", rng, dtype)
        self.fc2 = Dense(hidden, 1, f"{name}.fc2", rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))

    def parameters(self) -> list[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()


def grl_schedule(progress: float) -> float:
    """Reversal strength annealed from 0 to ~1 as training progresses."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must be in [0, 1]")
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


def _level_loss(disc: DomainDiscriminator, rep_s: Tensor, rep_t: Tensor,
                mu: float, reverse: bool) -> Tensor:
    n_s, n_t = rep_s.values.shape[0], rep_t.values.shape[0]
    if n_s == 0 or n_t == 0:
        raise ValueError("domain loss needs nodes from both domains")
    union = concat_rows([rep_s, rep_t])
    if reverse:
        union = gradient_reversal(union, mu)
    labels = np.concatenate(
        [np.zeros(n_s, dtype=union.values.dtype), np.ones(n_t, dtype=union.values.dtype)]
    )
    return binary_cross_entropy_logits(disc(union), labels)


def domain_loss(
    h_s: Tensor,
    h_t: Tensor,
    z_s: Tensor,
    z_t: Tensor,
    disc_feature: DomainDiscriminator,
    disc_structure: DomainDiscriminator,
    mu: float,
    use_feature: bool = True,
    use_structure: bool = True,
    reverse: bool = True,
) -> Tensor:
    """Sum of feature-level and structure-level domain-confusion losses.

    Source nodes are labeled 0 and target nodes 1 for both discriminators;
    the loss is the mean binary cross-entropy over the union of all nodes.
    Either level can be switched off; `reverse=False` drops the gradient
    reversal (used by tests as the identity-path oracle) without changing
    the forward value.
    """
    terms = []
    if use_feature:
        terms.append(_level_loss(disc_feature, h_s, h_t, mu, reverse))
    if use_structure:
        terms.append(_level_loss(disc_structure, z_s, z_t, mu, reverse))
    if not terms:
        return Tensor(np.zeros((), dtype=h_s.values.dtype))
    if len(terms) == 1:
        return terms[0]
    return add(terms[0], terms[1])

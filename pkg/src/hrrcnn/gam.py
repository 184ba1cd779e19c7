"""Graph attention over edge attributes.

Each edge attribute vector goes through a small MLP to a scalar logit; logits
are normalised per query node with a temperature softmax; node features are
updated residually with the attention-weighted sum of all nodes and then
passed through a square fusion layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .autodiff import (
    DimensionError,
    ParamRegistry,
    Tape,
    Tensor,
    add,
    linear,
    matmul,
    relu,
    reshape,
    softmax_scaled,
)
from .graphs import ConfigurationError, GraphKind, RelationGraph, SemanticMetric

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class GamConfig:
    feature_dim: int
    temperature: float = 2.0
    metric: SemanticMetric = field(default_factory=SemanticMetric)
    mlp_hidden: int = 16

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.mlp_hidden < 0:
            raise ConfigurationError(f"mlp_hidden must be >= 0, got {self.mlp_hidden}")
        self.metric.check(self.feature_dim)

    def edge_dim(self, kind: GraphKind) -> int:
        return self.metric.groups + GraphKind(kind).spatial_dim


@dataclass
class GamParams:
    edge_layers: List[Tuple[Tensor, Tensor]]
    fusion_w: Tensor
    fusion_b: Tensor

    @property
    def edge_dim(self) -> int:
        return self.edge_layers[0][0].shape[0]

    def tensors(self) -> list:
        out = [t for layer in self.edge_layers for t in layer]
        return out + [self.fusion_w, self.fusion_b]

    def attention_size(self) -> int:
        return sum(t.size for layer in self.edge_layers for t in layer)

    def fusion_size(self) -> int:
        return self.fusion_w.size + self.fusion_b.size


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_gam_params(
    registry: ParamRegistry,
    prefix: str,
    config: GamConfig,
    kind: GraphKind,
    rng: np.random.Generator,
) -> GamParams:
    """Register a fresh GAM: Glorot edge MLP, zero biases, identity fusion."""
    dims = [config.edge_dim(kind)]
    if config.mlp_hidden > 0:
        dims.append(config.mlp_hidden)
    dims.append(1)
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        W = registry.add(f"{prefix}.edge{i}.w", _glorot(rng, a, b))
        bias = registry.add(f"{prefix}.edge{i}.b", np.zeros(b))
        layers.append((W, bias))
    D = config.feature_dim
    fw = registry.add(f"{prefix}.fusion.w", np.eye(D))
    fb = registry.add(f"{prefix}.fusion.b", np.zeros(D))
    return GamParams(layers, fw, fb)


def gam_params_from_registry(registry: ParamRegistry, prefix: str) -> GamParams:
    layers = []
    i = 0
    while f"{prefix}.edge{i}.w" in registry:
        layers.append((registry[f"{prefix}.edge{i}.w"], registry[f"{prefix}.edge{i}.b"]))
        i += 1
    if not layers:
        raise KeyError(f"no GAM registered under {prefix!r}")
    return GamParams(layers, registry[f"{prefix}.fusion.w"], registry[f"{prefix}.fusion.b"])


def edge_scores(tape: Optional[Tape], graph: RelationGraph, params: GamParams) -> Tensor:
    """Attention logits [..., N, N] from the edge MLP."""
    if graph.edge_dim != params.edge_dim:
        raise ConfigurationError(f"edge attributes have {graph.edge_dim} dims, MLP expects {params.edge_dim}")
    h = graph.edge_attrs
    last = len(params.edge_layers) - 1
    for i, (W, b) in enumerate(params.edge_layers):
        h = linear(tape, h, W, b)
        if i < last:
            h = relu(tape, h)
    return reshape(tape, h, h.shape[:-1])


def normalize_attention(tape: Optional[Tape], alpha: Tensor, T: float) -> Tensor:
    """Row-wise temperature softmax of [..., N, N] logits."""
    return softmax_scaled(tape, alpha, T, axis=-1)


def aggregate(tape: Optional[Tape], node_features: Tensor, weights: Tensor) -> Tensor:
    """``f + W @ f``: each node plus the weighted sum over all nodes."""
    N = node_features.shape[-2]
    if weights.shape[-2:] != (N, N) or weights.shape[:-2] != node_features.shape[:-2]:
        raise DimensionError(f"weights {weights.shape} do not match features {node_features.shape}")
    if np.any(np.abs(weights.data.sum(axis=-1) - 1.0) > ROW_SUM_TOL):
        raise ValueError("attention rows must sum to one")
    return add(tape, node_features, matmul(tape, weights, node_features))


@dataclass
class GamTrace:
    """Intermediate values of one forward pass, kept for inspection."""

    alpha: Tensor
    weights: Tensor
    aggregated: Tensor
    output: Tensor


def gam_forward(
    tape: Optional[Tape],
    graph: RelationGraph,
    params: GamParams,
    config: GamConfig,
    trace: bool = False,
):
    """Edge MLP -> temperature softmax -> residual aggregation -> fusion layer.

    Returns the [..., N, D] output, or a :class:`GamTrace` when ``trace`` is set.
    """
    if graph.node_features.shape[-1] != params.fusion_w.shape[0]:
        raise ConfigurationError(
            f"node features have {graph.node_features.shape[-1]} dims, fusion expects {params.fusion_w.shape[0]}"
        )
    alpha = edge_scores(tape, graph, params)
    w = normalize_attention(tape, alpha, config.temperature)
    agg = aggregate(tape, graph.node_features, w)
    out = linear(tape, agg, params.fusion_w, params.fusion_b)
    if trace:
        return GamTrace(alpha, w, agg, out)
    return out

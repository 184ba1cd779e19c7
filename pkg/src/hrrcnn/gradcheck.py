"""Finite-difference checks of every differentiable piece, as a table.

Three tiers: each autodiff primitive on small random operands, each graph
attention module in isolation, and the full two-stage detector loss on a
32x32 scene with two proposals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .autodiff import (
    ParamRegistry,
    Tensor,
    add,
    concat,
    conv2d,
    cross_entropy,
    grad_check,
    interpolate,
    linear,
    matmul,
    mul,
    relu,
    reshape,
    smooth_l1,
    softmax_scaled,
    sub,
    sum_all,
    sum_squares,
    take,
    transpose,
    upsample2x,
)
from .detector import ModelConfig, detector_loss, hr_forward, init_params
from .gam import GamConfig, gam_forward, init_gam_params
from .geometry import Box
from .graphs import GraphKind, RoiGeometry, ScaleGeometry, build_graph, pixel_grid_geometry
from .synthdata import SceneSpec, generate_scene

PRIMITIVE_TOL = 1e-6
GAM_TOL = 1e-6
DETECTOR_TOL = 1e-4
EPS = 1e-5

Case = Tuple[Callable, List[Tensor]]


@dataclass
class CheckRow:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error <= self.threshold


def primitive_cases(seed: int = 0) -> Dict[str, Case]:
    rng = np.random.default_rng(seed)

    def p(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    a, b = p(3, 4), p(3, 4)
    ma, mb = p(2, 3, 4), p(2, 4, 2)
    x, W, bias = p(3, 4), p(4, 2), p(2)
    # keep relu inputs away from the kink
    r = Tensor(rng.normal(size=8) + np.sign(rng.normal(size=8)) * 0.1, requires_grad=True)
    sm, smw = p(3, 5), Tensor(rng.normal(size=(3, 5)))
    rt, rtw = p(2, 3, 4), Tensor(rng.normal(size=(4, 2, 3)))
    ca, cb = p(2, 3), p(4, 3)
    f, fw = p(3, 4, 5), rng.uniform(size=(6, 20))
    cx, cW, cb2 = p(2, 8, 8), p(3, 2, 3, 3), p(3)
    up, upw = p(2, 3, 3), Tensor(rng.normal(size=(2, 6, 6)))
    z = p(5, 4)
    sl = p(4, 4)
    sl_target = sl.data + rng.choice([-1, 1], size=(4, 4)) * rng.uniform(0.2, 2.0, size=(4, 4))
    return {
        "add": (lambda t: sum_squares(t, add(t, a, b)), [a, b]),
        "sub": (lambda t: sum_squares(t, sub(t, a, b)), [a, b]),
        "mul": (lambda t: sum_squares(t, mul(t, a, b)), [a, b]),
        "matmul": (lambda t: sum_squares(t, matmul(t, ma, mb)), [ma, mb]),
        "linear": (lambda t: sum_squares(t, linear(t, x, W, bias)), [x, W, bias]),
        "relu": (lambda t: sum_squares(t, relu(t, r)), [r]),
        "softmax_scaled": (lambda t: sum_all(t, mul(t, softmax_scaled(t, sm, 2.0), smw)), [sm]),
        "reshape_transpose": (
            lambda t: sum_all(t, mul(t, transpose(t, reshape(t, rt, (2, 3, 4)), (2, 0, 1)), rtw)),
            [rt],
        ),
        "concat_take": (
            lambda t: sum_squares(t, take(t, concat(t, [ca, cb], axis=0), np.array([5, 0, 0, 3]))),
            [ca, cb],
        ),
        "interpolate": (lambda t: sum_squares(t, interpolate(t, f, fw)), [f]),
        "conv2d": (lambda t: sum_squares(t, conv2d(t, cx, cW, cb2, stride=2, pad=1)), [cx, cW, cb2]),
        "upsample2x": (lambda t: sum_all(t, mul(t, upsample2x(t, up), upw)), [up]),
        "cross_entropy": (lambda t: cross_entropy(t, z, np.array([0, 3, 1, 1, 2])), [z]),
        "smooth_l1": (lambda t: smooth_l1(t, sl, sl_target, np.array([1.0, 0.0, 1.0, 1.0]), 1.0), [sl]),
    }


def gam_case(kind: GraphKind, config: GamConfig, n_nodes: int = 4, seed: int = 0) -> Case:
    """Sum of squares of one GAM's output; checked over its params and node features."""
    kind = GraphKind(kind)
    rng = np.random.default_rng([seed, list(GraphKind).index(kind)])
    reg = ParamRegistry()
    gp = init_gam_params(reg, "gam", config, kind, rng)
    for _, b in gp.edge_layers:
        b.data[:] = rng.normal(size=b.shape) * 0.2
    gp.fusion_w.data += rng.normal(size=gp.fusion_w.shape) * 0.1
    feats = Tensor(rng.normal(size=(n_nodes, config.feature_dim)), requires_grad=True)
    if kind is GraphKind.PIXEL:
        S = int(round(np.sqrt(n_nodes)))
        geo = pixel_grid_geometry(Box(20.0, 18.0, 14.0, 10.0), S)
        feats = Tensor(rng.normal(size=(S * S, config.feature_dim)), requires_grad=True)
    elif kind is GraphKind.SCALE:
        geo = ScaleGeometry(np.arange(n_nodes), n_nodes)
    else:
        geo = RoiGeometry(np.column_stack([rng.uniform(8, 56, (n_nodes, 2)), rng.uniform(6, 24, (n_nodes, 2))]))

    def f(tape):
        graph = build_graph(tape, kind, feats, geo, config.metric)
        return sum_squares(tape, gam_forward(tape, graph, gp, config))

    return f, gp.tensors() + [feats]


def detector_case(config: ModelConfig, seed: int = 0) -> Case:
    """Joint loss over all parameters on a 32x32 scene with two proposals.

    Every all-zero tensor is randomised first so the base point is off every
    relu kink.  Stage-2 proposals are fixed at their base-point values: box decoding is
    not differentiated, so perturbing the regression head must not move them.
    """
    params = init_params(config, seed)
    rng = np.random.default_rng([seed, 99])
    # zero-initialised biases put dead-relu regions exactly on the kink of the next relu
    for _, t in params.registry:
        if not np.any(t.data):
            t.data[...] = rng.normal(size=t.shape) * 0.2
    scene = generate_scene(SceneSpec(height=32, width=32, max_objects=2, min_size=8, max_size=14, seed=seed), 0)
    gt = scene.boxes[0]
    proposals = np.array([gt + [1.0, -1.0, 2.0, 0.0], [16.0, 16.0, 10.0, 10.0]])
    _, s2 = hr_forward(None, scene.image, proposals, params)
    fixed = None if s2 is None else s2.proposals

    def f(tape):
        s1, s2 = hr_forward(tape, scene.image, proposals, params, stage2_proposals=fixed)
        return detector_loss(tape, s1, s2, scene.boxes, scene.labels)

    return f, params.registry.tensors()


def run_suite(
    model_config: ModelConfig = ModelConfig(),
    max_entries: Optional[int] = None,
    seed: int = 0,
    log: Optional[Callable[[CheckRow], None]] = None,
) -> List[CheckRow]:
    """Primitive, per-GAM and end-to-end rows; ``max_entries`` subsamples large tensors."""
    rows: List[CheckRow] = []

    def emit(row: CheckRow):
        rows.append(row)
        if log is not None:
            log(row)

    for name, (f, ps) in primitive_cases(seed).items():
        emit(CheckRow(f"primitive.{name}", grad_check(f, ps, EPS, max_entries, seed), PRIMITIVE_TOL))
    dims = {
        GraphKind.PIXEL: (model_config.channels, model_config.pool_size**2),
        GraphKind.SCALE: (model_config.hidden_dim, model_config.num_levels),
        GraphKind.ROI: (model_config.hidden_dim, 4),
    }
    for kind, (dim, n) in dims.items():
        f, ps = gam_case(kind, model_config.gam_config(dim), n, seed)
        emit(CheckRow(f"gam.{kind.value}", grad_check(f, ps, EPS, max_entries, seed), GAM_TOL))
    f, ps = detector_case(model_config, seed)
    emit(CheckRow("detector_loss", grad_check(f, ps, EPS, max_entries, seed), DETECTOR_TOL))
    return rows

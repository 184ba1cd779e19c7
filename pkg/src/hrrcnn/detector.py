"""Two-stage hierarchical relation-reasoning detector at toy scale.

Stage 1 pools each proposal at its pyramid level, reasons over the pixels of
the pooled grid, projects to a vector and reasons over all proposals of the
image.  Stage 2 takes stage-1's decoded boxes as proposals, pools them from
every pyramid level, reasons across levels, keeps the node of the box's own
level and again reasons across proposals.  Both stages feed one box head.

Gradients do not flow through box decoding: stage-2 proposals are constants,
as in cascaded box regression.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import (
    ParamRegistry,
    Tape,
    Tensor,
    add,
    concat,
    constant,
    conv2d,
    cross_entropy,
    linear,
    relu,
    reshape,
    scale,
    smooth_l1,
    take,
    upsample2x,
)
from .gam import GamConfig, GamParams, gam_forward, gam_params_from_registry, init_gam_params
from .geometry import (
    assign_levels,
    boxes_to_array,
    clip_to_image,
    decode_array,
    encode_array,
    iou_matrix,
    roi_align_nodes,
)
from .graphs import GraphKind, RoiGeometry, ScaleGeometry, SemanticMetric, build_graph, pixel_grid_geometry
from .metrics import Detections

log = logging.getLogger(__name__)

PIXEL_STAGE = "pr"
SCALE_STAGE = "sr"


class InputError(ValueError):
    """Image or proposal input violates a precondition."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class ModelConfig:
    num_levels: int = 3
    channels: int = 32
    stem_channels: int = 16
    pool_size: int = 7
    hidden_dim: int = 128
    num_classes: int = 3
    temperature: float = 2.0
    metric: SemanticMetric = field(default_factory=SemanticMetric)
    mlp_hidden: int = 16
    canonical_level: Optional[int] = None  # defaults to num_levels - 2
    canonical_size: float = 56.0
    enable_pixel: bool = True
    enable_scale: bool = True
    enable_roi: bool = True
    enable_stage2: bool = True
    share_head: bool = True
    stage_order: Tuple[str, str] = (PIXEL_STAGE, SCALE_STAGE)

    def __post_init__(self):
        if self.num_levels < 1:
            raise ValueError("need at least one pyramid level")
        if sorted(self.stage_order) != sorted((PIXEL_STAGE, SCALE_STAGE)):
            raise ValueError(f"stage_order must order {PIXEL_STAGE!r} and {SCALE_STAGE!r}, got {self.stage_order}")

    @property
    def canonical(self) -> Tuple[float, float]:
        k0 = self.num_levels - 2 if self.canonical_level is None else self.canonical_level
        return (k0, self.canonical_size)

    @property
    def stages(self) -> Tuple[str, ...]:
        return self.stage_order if self.enable_stage2 else self.stage_order[:1]

    def gam_config(self, feature_dim: int) -> GamConfig:
        return GamConfig(feature_dim, self.temperature, self.metric, self.mlp_hidden)


@dataclass
class FeaturePyramid:
    levels: List[Tensor]  # [C, H_p, W_p], finest first
    strides: List[int]
    image_size: Tuple[int, int]

    @property
    def num_levels(self) -> int:
        return len(self.levels)


@dataclass
class StageOutputs:
    proposals: np.ndarray  # [R, 4] boxes the stage pooled from
    class_logits: Tensor  # [R, K+1]
    deltas: Tensor  # [R, 4]
    boxes: np.ndarray  # [R, 4] decoded, w/h >= 1
    roi_vectors: Tensor  # [R, D] box-head input
    traces: Dict[str, tuple] = field(default_factory=dict)

    @property
    def scores(self) -> np.ndarray:
        z = self.class_logits.data - self.class_logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


@dataclass
class HrModelParams:
    config: ModelConfig
    registry: ParamRegistry

    def gams(self) -> Dict[str, GamParams]:
        out = {}
        for name in ("pixel", "scale", "roi1", "roi2"):
            if f"gam.{name}.fusion.w" in self.registry:
                out[name] = gam_params_from_registry(self.registry, f"gam.{name}")
        return out

    def gam(self, name: str) -> Optional[GamParams]:
        return self.gams().get(name)

    def head_prefix(self, stage_index: int) -> str:
        if stage_index == 0 or self.config.share_head:
            return "box_head"
        return "box_head2"

    def box_head(self, stage_index: int) -> Dict[str, Tensor]:
        p = self.head_prefix(stage_index)
        return {k: self.registry[f"{p}.{k}"] for k in ("fc1.w", "fc1.b", "fc2.w", "fc2.b", "cls.w", "cls.b", "reg.w", "reg.b")}


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(config: ModelConfig = ModelConfig(), seed: int = 0) -> HrModelParams:
    rng = np.random.default_rng(seed)
    reg = ParamRegistry()
    C, Cs, D, S, P = config.channels, config.stem_channels, config.hidden_dim, config.pool_size, config.num_levels

    reg.add("backbone.stem.w", _he(rng, (Cs, 3, 3, 3), 27))
    reg.add("backbone.stem.b", np.zeros(Cs))
    cin = Cs
    for p in range(P):
        reg.add(f"backbone.down{p}.w", _he(rng, (C, cin, 3, 3), cin * 9))
        reg.add(f"backbone.down{p}.b", np.zeros(C))
        cin = C
    for p in range(P):
        reg.add(f"backbone.lat{p}.w", _he(rng, (C, C, 1, 1), C))
        reg.add(f"backbone.lat{p}.b", np.zeros(C))

    flat = S * S * C
    for stage in config.stages:
        reg.add(f"proj_{stage}.w", _he(rng, (flat, D), flat))
        reg.add(f"proj_{stage}.b", np.zeros(D))

    for i, stage in enumerate(config.stages):
        if stage == PIXEL_STAGE and config.enable_pixel:
            init_gam_params(reg, "gam.pixel", config.gam_config(C), GraphKind.PIXEL, rng)
        if stage == SCALE_STAGE and config.enable_scale:
            init_gam_params(reg, "gam.scale", config.gam_config(D), GraphKind.SCALE, rng)
        if config.enable_roi:
            init_gam_params(reg, f"gam.roi{i + 1}", config.gam_config(D), GraphKind.ROI, rng)

    heads = ["box_head"] if config.share_head or not config.enable_stage2 else ["box_head", "box_head2"]
    K = config.num_classes + 1
    for h in heads:
        reg.add(f"{h}.fc1.w", _he(rng, (D, D), D))
        reg.add(f"{h}.fc1.b", np.zeros(D))
        reg.add(f"{h}.fc2.w", _he(rng, (D, D), D))
        reg.add(f"{h}.fc2.b", np.zeros(D))
        reg.add(f"{h}.cls.w", rng.normal(0.0, 0.01, size=(D, K)))
        reg.add(f"{h}.cls.b", np.zeros(K))
        reg.add(f"{h}.reg.w", rng.normal(0.0, 0.001, size=(D, 4)))
        reg.add(f"{h}.reg.b", np.zeros(4))
    return HrModelParams(config, reg)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def backbone_forward(tape: Optional[Tape], image, params: HrModelParams) -> FeaturePyramid:
    """Strided 3x3 convolutions bottom-up, 1x1 laterals merged top-down."""
    reg, P = params.registry, params.config.num_levels
    img = image if isinstance(image, Tensor) else constant(image)
    if img.data.ndim != 3 or img.shape[0] != 3:
        raise InputError(f"image must be [3, H, W], got {img.shape}")
    H, W = img.shape[1:]
    unit = 2 ** (P + 1)
    if H % unit or W % unit or H < unit or W < unit:
        raise InputError(f"image size {H}x{W} must be a positive multiple of {unit}")

    x = relu(tape, conv2d(tape, img, reg["backbone.stem.w"], reg["backbone.stem.b"], stride=2, pad=1))
    bottom_up = []
    for p in range(P):
        x = relu(tape, conv2d(tape, x, reg[f"backbone.down{p}.w"], reg[f"backbone.down{p}.b"], stride=2, pad=1))
        bottom_up.append(x)
    levels: List[Optional[Tensor]] = [None] * P
    top = None
    for p in reversed(range(P)):
        lat = conv2d(tape, bottom_up[p], reg[f"backbone.lat{p}.w"], reg[f"backbone.lat{p}.b"])
        top = lat if top is None else add(tape, lat, upsample2x(tape, top))
        levels[p] = top
    strides = [2 ** (p + 2) for p in range(P)]
    return FeaturePyramid(levels, strides, (H, W))


def _pool_at_levels(tape, pyramid: FeaturePyramid, boxes: np.ndarray, levels: np.ndarray, S: int) -> Tensor:
    """[R, S*S, C] pixel nodes, each box pooled from its own level."""
    parts, order = [], []
    for p in np.unique(levels):
        idx = np.flatnonzero(levels == p)
        parts.append(roi_align_nodes(tape, pyramid.levels[p], boxes[idx], pyramid.strides[p], S))
        order.append(idx)
    if len(parts) == 1:
        return parts[0]
    stacked = concat(tape, parts, axis=0)
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return take(tape, stacked, inverse)


def _roi_reasoning(tape, vectors: Tensor, boxes: np.ndarray, params: HrModelParams, name: str, traces) -> Tensor:
    gp = params.gam(name)
    if gp is None:
        return vectors
    cfg = params.config.gam_config(vectors.shape[-1])
    graph = build_graph(tape, GraphKind.ROI, vectors, RoiGeometry(boxes), cfg.metric)
    tr = gam_forward(tape, graph, gp, cfg, trace=True)
    if traces is not None:
        traces[name] = (graph, tr)
    return tr.output


def box_head_forward(tape, x: Tensor, head: Dict[str, Tensor]) -> Tuple[Tensor, Tensor]:
    h = relu(tape, linear(tape, x, head["fc1.w"], head["fc1.b"]))
    h = relu(tape, linear(tape, h, head["fc2.w"], head["fc2.b"]))
    return linear(tape, h, head["cls.w"], head["cls.b"]), linear(tape, h, head["reg.w"], head["reg.b"])


def _finish_stage(tape, vectors, boxes, params, stage_index, traces) -> StageOutputs:
    roi_vec = _roi_reasoning(tape, vectors, boxes, params, f"roi{stage_index + 1}", traces)
    logits, deltas = box_head_forward(tape, roi_vec, params.box_head(stage_index))
    decoded = decode_array(boxes, deltas.data)
    return StageOutputs(boxes, logits, deltas, decoded, roi_vec, traces if traces is not None else {})


def _check_proposals(proposals) -> np.ndarray:
    boxes = boxes_to_array(proposals)
    if len(boxes) == 0:
        raise InputError("stage needs at least one proposal")
    if np.any(boxes[:, 2:] <= 0):
        raise InputError("proposals need positive width and height")
    return boxes


def pixel_roi_stage(
    tape: Optional[Tape],
    pyramid: FeaturePyramid,
    proposals,
    params: HrModelParams,
    stage_index: int = 0,
    traces: Optional[dict] = None,
) -> Tuple[Tensor, StageOutputs]:
    """Pixel-graph reasoning inside every RoI, then RoI-graph reasoning across RoIs."""
    cfg = params.config
    boxes = _check_proposals(proposals)
    S = cfg.pool_size
    levels = assign_levels(boxes, pyramid.num_levels, cfg.canonical)
    nodes = _pool_at_levels(tape, pyramid, boxes, levels, S)  # [R, S*S, C]
    gp = params.gam("pixel") if cfg.enable_pixel else None
    if gp is not None:
        gcfg = cfg.gam_config(nodes.shape[-1])
        graph = build_graph(tape, GraphKind.PIXEL, nodes, pixel_grid_geometry(boxes, S), gcfg.metric)
        tr = gam_forward(tape, graph, gp, gcfg, trace=True)
        if traces is not None:
            traces["pixel"] = (graph, tr)
        nodes = tr.output
    flat = reshape(tape, nodes, (len(boxes), -1))
    reg = params.registry
    vectors = relu(tape, linear(tape, flat, reg[f"proj_{PIXEL_STAGE}.w"], reg[f"proj_{PIXEL_STAGE}.b"]))
    out = _finish_stage(tape, vectors, boxes, params, stage_index, traces)
    return out.roi_vectors, out


def scale_roi_stage(
    tape: Optional[Tape],
    pyramid: FeaturePyramid,
    proposals,
    params: HrModelParams,
    stage_index: int = 1,
    traces: Optional[dict] = None,
) -> StageOutputs:
    """Scale-graph reasoning across pyramid levels per RoI, then RoI-graph reasoning."""
    cfg = params.config
    boxes = _check_proposals(proposals)
    R, S, P = len(boxes), cfg.pool_size, pyramid.num_levels
    levels = assign_levels(boxes, P, cfg.canonical)
    reg = params.registry
    w, b = reg[f"proj_{SCALE_STAGE}.w"], reg[f"proj_{SCALE_STAGE}.b"]
    gp = params.gam("scale") if cfg.enable_scale else None
    if gp is None:
        flat = reshape(tape, _pool_at_levels(tape, pyramid, boxes, levels, S), (R, -1))
        vectors = relu(tape, linear(tape, flat, w, b))
    else:
        per_level = [
            reshape(tape, roi_align_nodes(tape, pyramid.levels[p], boxes, pyramid.strides[p], S), (R, 1, -1))
            for p in range(P)
        ]
        stacked = per_level[0] if P == 1 else concat(tape, per_level, axis=1)  # [R, P, S*S*C]
        nodes = relu(tape, linear(tape, stacked, w, b))  # [R, P, D]
        gcfg = cfg.gam_config(nodes.shape[-1])
        graph = build_graph(tape, GraphKind.SCALE, nodes, ScaleGeometry(np.arange(P), P), gcfg.metric)
        tr = gam_forward(tape, graph, gp, gcfg, trace=True)
        if traces is not None:
            traces["scale"] = (graph, tr)
        vectors = take(tape, tr.output, (np.arange(R), levels))
    return _finish_stage(tape, vectors, boxes, params, stage_index, traces)


def run_stage(tape, kind: str, pyramid, proposals, params, stage_index, traces=None) -> StageOutputs:
    if kind == PIXEL_STAGE:
        return pixel_roi_stage(tape, pyramid, proposals, params, stage_index, traces)[1]
    return scale_roi_stage(tape, pyramid, proposals, params, stage_index, traces)


def next_proposals(stage: StageOutputs, image_size: Tuple[int, int]) -> np.ndarray:
    """Decoded boxes of a stage clipped to the image: the next stage's proposals."""
    return clip_to_image(stage.boxes, *image_size)


def hr_forward(
    tape: Optional[Tape],
    image,
    proposals,
    params: HrModelParams,
    traces: Optional[dict] = None,
    stage2_proposals=None,
) -> Tuple[StageOutputs, Optional[StageOutputs]]:
    """Both stages; the second consumes the first's refined boxes.

    ``stage2_proposals`` overrides the wiring (finite-difference checks hold
    them fixed while perturbing the regression head).  The second output is
    ``None`` when stage 2 is disabled.
    """
    pyramid = backbone_forward(tape, image, params)
    first, *rest = params.config.stages
    t1 = {} if traces is not None else None
    s1 = run_stage(tape, first, pyramid, proposals, params, 0, t1)
    if traces is not None:
        traces["stage1"] = t1
    if not rest:
        return s1, None
    props2 = next_proposals(s1, pyramid.image_size) if stage2_proposals is None else boxes_to_array(stage2_proposals)
    t2 = {} if traces is not None else None
    s2 = run_stage(tape, rest[0], pyramid, props2, params, 1, t2)
    if traces is not None:
        traces["stage2"] = t2
    return s1, s2


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass
class StageTargets:
    labels: np.ndarray  # [R], 0 = background
    deltas: np.ndarray  # [R, 4], zero rows for background
    foreground: np.ndarray  # [R] bool


def assign_targets(proposals, gt_boxes, gt_labels, fg_iou: float = 0.5) -> StageTargets:
    """Label each proposal with its best-IoU gt when IoU >= fg_iou, else background."""
    props = boxes_to_array(proposals)
    gt = boxes_to_array(gt_boxes)
    gl = np.asarray(gt_labels, dtype=np.int64)
    R = len(props)
    labels = np.zeros(R, dtype=np.int64)
    deltas = np.zeros((R, 4))
    fg = np.zeros(R, dtype=bool)
    if len(gt):
        ious = iou_matrix(props, gt)
        best = ious.argmax(axis=1)
        fg = ious[np.arange(R), best] >= fg_iou
        labels[fg] = gl[best[fg]]
        if fg.any():
            deltas[fg] = encode_array(props[fg], gt[best[fg]])
    return StageTargets(labels, deltas, fg)


def stage_loss(tape, stage: StageOutputs, targets: StageTargets, beta: float) -> Tensor:
    R = stage.class_logits.shape[0]
    ce = cross_entropy(tape, stage.class_logits, targets.labels)
    reg = smooth_l1(tape, stage.deltas, targets.deltas, targets.foreground.astype(np.float64), beta)
    return scale(tape, add(tape, ce, reg), 1.0 / R)


def detector_loss(
    tape: Optional[Tape],
    stage1: StageOutputs,
    stage2: Optional[StageOutputs],
    gt_boxes,
    gt_labels,
    fg_iou: float = 0.5,
    beta: float = 1.0 / 9.0,
) -> Tensor:
    """Sum over stages of (cross-entropy + foreground smooth-L1) / proposals per stage."""
    total = None
    for stage in (stage1, stage2):
        if stage is None:
            continue
        if stage.class_logits.shape[0] == 0:
            raise InputError("loss needs at least one proposal per stage")
        targets = assign_targets(stage.proposals, gt_boxes, gt_labels, fg_iou)
        term = stage_loss(tape, stage, targets, beta)
        total = term if total is None else add(tape, total, term)
    return total


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices in score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thr
    return np.array(keep, dtype=np.intp)


def postprocess(stage: StageOutputs, image_size, score_thr=0.05, nms_iou=0.5, max_dets=100) -> Detections:
    boxes = clip_to_image(stage.boxes, *image_size)
    probs = stage.scores
    out_b, out_s, out_l = [], [], []
    for c in range(1, probs.shape[1]):
        sel = np.flatnonzero(probs[:, c] > score_thr)
        if len(sel) == 0:
            continue
        keep = sel[nms(boxes[sel], probs[sel, c], nms_iou)]
        out_b.append(boxes[keep])
        out_s.append(probs[keep, c])
        out_l.append(np.full(len(keep), c, dtype=np.int64))
    if not out_b:
        return Detections.empty()
    b, s, l = np.concatenate(out_b), np.concatenate(out_s), np.concatenate(out_l)
    top = np.argsort(-s, kind="stable")[:max_dets]
    return Detections(b[top], s[top], l[top])


def infer(image, proposals, params: HrModelParams, score_thr=0.05, nms_iou=0.5, max_dets=100) -> Detections:
    """Detections from the last enabled stage with class-wise greedy NMS."""
    s1, s2 = hr_forward(None, image, proposals, params)
    last = s2 if s2 is not None else s1
    H, W = np.asarray(image.data if isinstance(image, Tensor) else image).shape[1:]
    return postprocess(last, (H, W), score_thr, nms_iou, max_dets)

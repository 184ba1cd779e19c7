"""Fully-connected relation graphs over pixels, pyramid levels and RoIs.

Every edge (self-loops included) carries ``[semantic (g) || spatial (k)]``:
grouped similarities of the two node features followed by a kind-specific
spatial offset (k = 2 pixel, 1 scale, 4 RoI).  The semantic block is a
recorded op so gradients reach the node features; the spatial block is a
constant of the geometry.

Graph builders accept a leading batch axis on the node features so the
detector can build one pixel graph per RoI in a single call.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .autodiff import Tensor, Tape, _new, _rec, concat, constant
from .geometry import Box, boxes_to_array

NORM_EPS = 1e-12


class ConfigurationError(ValueError):
    """Incompatible dimensions between configuration and data."""


class GraphConstructionError(ValueError):
    """Node features and node geometry disagree."""


class GraphKind(enum.Enum):
    PIXEL = "pixel"
    SCALE = "scale"
    ROI = "roi"

    @property
    def spatial_dim(self) -> int:
        return {GraphKind.PIXEL: 2, GraphKind.SCALE: 1, GraphKind.ROI: 4}[self]


class Metric(enum.Enum):
    GROUPED_DOT = "dot"
    GROUPED_COSINE = "cosine"
    GROUPED_EUCLIDEAN = "euclidean"


@dataclass(frozen=True)
class SemanticMetric:
    kind: Metric = Metric.GROUPED_DOT
    groups: int = 2

    def check(self, dim: int) -> None:
        if self.groups < 1 or dim % self.groups != 0:
            raise ConfigurationError(f"group count {self.groups} does not divide feature dim {dim}")


# ---------------------------------------------------------------------------
# pairwise definitions
# ---------------------------------------------------------------------------


def semantic_distance(f_i, f_j, metric: SemanticMetric = SemanticMetric()) -> np.ndarray:
    """Grouped similarity between two feature vectors, one value per group."""
    f_i = np.asarray(getattr(f_i, "data", f_i), dtype=np.float64).reshape(-1)
    f_j = np.asarray(getattr(f_j, "data", f_j), dtype=np.float64).reshape(-1)
    if f_i.shape != f_j.shape:
        raise ConfigurationError(f"feature sizes differ: {f_i.shape} vs {f_j.shape}")
    metric.check(f_i.size)
    size = f_i.size // metric.groups
    out = np.empty(metric.groups)
    for k in range(metric.groups):
        u = f_i[k * size : (k + 1) * size]
        v = f_j[k * size : (k + 1) * size]
        if metric.kind is Metric.GROUPED_DOT:
            out[k] = np.dot(u, v) / np.sqrt(size)
        elif metric.kind is Metric.GROUPED_COSINE:
            nu, nv = np.linalg.norm(u), np.linalg.norm(v)
            out[k] = 0.0 if nu < NORM_EPS or nv < NORM_EPS else np.dot(u, v) / (nu * nv)
        else:
            out[k] = -np.linalg.norm(u - v)
    return out


def pixel_spatial(pix_i, pix_j, roi: Box) -> np.ndarray:
    return np.array([(pix_i[0] - pix_j[0]) / roi.w, (pix_i[1] - pix_j[1]) / roi.h])


def scale_spatial(p_i: int, p_j: int, P: int) -> np.ndarray:
    # inclusive bound: both 0- and 1-based level numbering are accepted
    if not (0 <= p_i <= P and 0 <= p_j <= P):
        raise ValueError(f"levels ({p_i}, {p_j}) outside [0, {P}]")
    return np.array([(p_i - p_j) / P])


def roi_spatial(box_i: Box, box_j: Box) -> np.ndarray:
    return np.array(
        [
            (box_i.cx - box_j.cx) / box_i.w,
            (box_i.cy - box_j.cy) / box_i.h,
            box_j.w / box_i.w,
            box_j.h / box_i.h,
        ]
    )


# ---------------------------------------------------------------------------
# all-pairs versions
# ---------------------------------------------------------------------------


def pairwise_semantic(tape: Optional[Tape], f: Tensor, metric: SemanticMetric) -> Tensor:
    """[..., N, D] node features -> [..., N, N, g] grouped similarities."""
    *lead, N, D = f.shape
    metric.check(D)
    g = metric.groups
    size = D // g
    fg = f.data.reshape(*lead, N, g, size)

    if metric.kind is Metric.GROUPED_DOT:
        c = 1.0 / np.sqrt(size)
        gm = np.moveaxis(fg, -2, -3)  # [..., g, N, d]
        s = np.moveaxis(gm @ np.swapaxes(gm, -1, -2), -3, -1) * c

        def back(G):
            Gm = np.moveaxis(G, -1, -3)  # [..., g, N, N]
            gf = (Gm + np.swapaxes(Gm, -1, -2)) @ gm
            return ((np.moveaxis(gf, -3, -2) * c).reshape(f.shape),)

    elif metric.kind is Metric.GROUPED_COSINE:
        norm = np.linalg.norm(fg, axis=-1, keepdims=True)
        ok = norm >= NORM_EPS
        inv = np.where(ok, 1.0 / np.where(ok, norm, 1.0), 0.0)
        uh = fg * inv
        s = np.einsum("...ikd,...jkd->...ijk", uh, uh)

        def back(G):
            gu = np.einsum("...ijk,...jkd->...ikd", G, uh) + np.einsum("...jik,...jkd->...ikd", G, uh)
            radial = (gu * uh).sum(axis=-1, keepdims=True)
            return (((gu - uh * radial) * inv).reshape(f.shape),)

    else:
        diff = fg[..., :, None, :, :] - fg[..., None, :, :, :]  # [..., i, j, k, d]
        dist = np.sqrt((diff * diff).sum(axis=-1))
        s = -dist
        safe = np.where(dist > 0, dist, 1.0)

        def back(G):
            coef = np.where(dist > 0, -G / safe, 0.0)[..., None] * diff
            gf = coef.sum(axis=-3) - coef.sum(axis=-4)
            return (gf.reshape(f.shape),)

    return _rec(tape, _new(s), (f,), back)


def pixel_spatial_matrix(coords: np.ndarray, boxes) -> np.ndarray:
    """coords [..., N, 2] with owning boxes [..., 4] (or one Box) -> [..., N, N, 2]."""
    coords = np.asarray(coords, np.float64)
    wh = _box_wh(boxes)
    diff = coords[..., :, None, :] - coords[..., None, :, :]
    return diff / wh[..., None, None, :]


def scale_spatial_matrix(levels, P: int) -> np.ndarray:
    levels = np.asarray(levels)
    if np.any(levels < 0) or np.any(levels > P):
        raise ValueError(f"levels {levels.tolist()} outside [0, {P}]")
    lv = levels.astype(np.float64)
    return ((lv[..., :, None] - lv[..., None, :]) / P)[..., None]


def roi_spatial_matrix(boxes) -> np.ndarray:
    """Boxes [..., N, 4] -> [..., N, N, 4] with row i as the query box."""
    b = boxes if isinstance(boxes, np.ndarray) else boxes_to_array(boxes)
    bi = b[..., :, None, :]
    bj = b[..., None, :, :]
    return np.stack(
        [
            (bi[..., 0] - bj[..., 0]) / bi[..., 2],
            (bi[..., 1] - bj[..., 1]) / bi[..., 3],
            bj[..., 2] / bi[..., 2],
            bj[..., 3] / bi[..., 3],
        ],
        axis=-1,
    )


def _box_wh(boxes) -> np.ndarray:
    if isinstance(boxes, Box):
        return np.array([boxes.w, boxes.h])
    return np.asarray(boxes, np.float64)[..., 2:4]


# ---------------------------------------------------------------------------
# graph containers
# ---------------------------------------------------------------------------


@dataclass
class PixelGeometry:
    """Pixel coordinates (image space) inside their owning RoI box.

    ``offsets`` optionally holds the same points relative to the box corner;
    when present the spatial block is computed from them, which makes it
    exactly invariant to translating the box.
    """

    coords: np.ndarray  # [..., N, 2]
    box: Union[Box, np.ndarray]  # one Box, or [..., 4] per graph
    offsets: Optional[np.ndarray] = None

    def __len__(self):
        return np.asarray(self.coords).shape[-2]

    def spatial(self) -> np.ndarray:
        return pixel_spatial_matrix(self.coords if self.offsets is None else self.offsets, self.box)


@dataclass
class ScaleGeometry:
    levels: np.ndarray  # [N]
    P: int

    def __len__(self):
        return np.asarray(self.levels).shape[-1]

    def spatial(self) -> np.ndarray:
        return scale_spatial_matrix(self.levels, self.P)


@dataclass
class RoiGeometry:
    boxes: np.ndarray  # [..., N, 4] center form

    def __len__(self):
        return np.asarray(self.boxes).shape[-2]

    def spatial(self) -> np.ndarray:
        return roi_spatial_matrix(self.boxes)


_GEOMETRY = {GraphKind.PIXEL: PixelGeometry, GraphKind.SCALE: ScaleGeometry, GraphKind.ROI: RoiGeometry}


@dataclass
class RelationGraph:
    kind: GraphKind
    node_features: Tensor  # [..., N, D]
    geometry: object
    metric: SemanticMetric
    spatial: np.ndarray  # [..., N, N, k]
    edge_attrs: Tensor  # [..., N, N, g + k]

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[-2]

    @property
    def edge_dim(self) -> int:
        return self.edge_attrs.shape[-1]


def pixel_grid_geometry(boxes, S: int) -> PixelGeometry:
    """Bin-center coordinates of an S x S grid for each box, row-major."""
    arr = boxes_to_array([boxes] if isinstance(boxes, Box) else boxes)
    frac = (np.arange(S) + 0.5) / S
    ox = frac[None, :] * arr[:, 2:3]
    oy = frac[None, :] * arr[:, 3:4]
    R = len(arr)
    offsets = np.stack(
        [np.broadcast_to(ox[:, None, :], (R, S, S)), np.broadcast_to(oy[:, :, None], (R, S, S))], axis=-1
    ).reshape(R, S * S, 2)
    coords = offsets + (arr[:, None, :2] - arr[:, None, 2:] / 2.0)
    if isinstance(boxes, Box):
        return PixelGeometry(coords[0], boxes, offsets[0])
    return PixelGeometry(coords, arr, offsets)


def build_graph(
    tape: Optional[Tape],
    kind: GraphKind,
    node_features: Tensor,
    geometry,
    metric: SemanticMetric = SemanticMetric(),
) -> RelationGraph:
    """Assemble node features and geometry into a fully-connected graph."""
    kind = GraphKind(kind)
    if not isinstance(geometry, _GEOMETRY[kind]):
        raise GraphConstructionError(f"{kind.value} graph needs {_GEOMETRY[kind].__name__}")
    if node_features.data.ndim < 2:
        raise GraphConstructionError(f"node features must be [..., N, D], got {node_features.shape}")
    N = node_features.shape[-2]
    if N < 1:
        raise GraphConstructionError("graph needs at least one node")
    if len(geometry) != N:
        raise GraphConstructionError(f"{len(geometry)} geometry entries for {N} nodes")
    if kind is GraphKind.SCALE and N != geometry.P:
        raise GraphConstructionError(f"scale graph needs one node per level: N={N}, P={geometry.P}")
    spatial = geometry.spatial()
    semantic = pairwise_semantic(tape, node_features, metric)
    full = np.broadcast_to(spatial, semantic.shape[:-1] + (kind.spatial_dim,))
    edges = concat(tape, [semantic, constant(full)], axis=-1)
    return RelationGraph(kind, node_features, geometry, metric, spatial, edges)

"""Boxes, IoU, box-delta coding, RoI sampling and pyramid-level assignment.

Boxes are center-form ``(cx, cy, w, h)`` in image pixels.  Scalar helpers
operate on :class:`Box`; the ``*_array`` variants take ``[R, 4]`` arrays in
the same layout and are what the detector uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, interpolate, reshape, transpose

LOG_SCALE_CLAMP = 4.0
MIN_SIZE = 1.0


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def boxes_to_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 4)
    return np.array([b.as_array() for b in boxes], dtype=np.float64).reshape(-1, 4)


def array_to_boxes(arr: np.ndarray) -> list:
    return [Box(*map(float, row)) for row in np.asarray(arr).reshape(-1, 4)]


def to_corners(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    half = arr[..., 2:] / 2.0
    return np.concatenate([arr[..., :2] - half, arr[..., :2] + half], axis=-1)


def from_corners(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    return np.concatenate([(arr[..., :2] + arr[..., 2:]) / 2.0, arr[..., 2:] - arr[..., :2]], axis=-1)


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # rounding can push near-identical boxes a hair above one
    return min(inter / (a.area + b.area - inter), 1.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between [N,4] and [M,4] center-form arrays."""
    ca, cb = to_corners(a), to_corners(b)
    iw = np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0])
    ih = np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    return np.minimum(inter / (area_a + area_b - inter), 1.0)


def encode_deltas(proposal: Box, target: Box) -> np.ndarray:
    return encode_array(proposal.as_array()[None], target.as_array()[None])[0]


def decode_deltas(proposal: Box, deltas) -> Box:
    return Box(*decode_array(proposal.as_array()[None], np.asarray(deltas, dtype=np.float64)[None])[0])


def encode_array(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    p, t = np.asarray(proposals, np.float64), np.asarray(targets, np.float64)
    return np.stack(
        [
            (t[:, 0] - p[:, 0]) / p[:, 2],
            (t[:, 1] - p[:, 1]) / p[:, 3],
            np.log(t[:, 2] / p[:, 2]),
            np.log(t[:, 3] / p[:, 3]),
        ],
        axis=1,
    )


def decode_array(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    p, d = np.asarray(proposals, np.float64), np.asarray(deltas, np.float64)
    dw = np.clip(d[:, 2], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
    dh = np.clip(d[:, 3], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
    return np.stack(
        [
            p[:, 0] + d[:, 0] * p[:, 2],
            p[:, 1] + d[:, 1] * p[:, 3],
            np.maximum(p[:, 2] * np.exp(dw), MIN_SIZE),
            np.maximum(p[:, 3] * np.exp(dh), MIN_SIZE),
        ],
        axis=1,
    )


def clip_to_image(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    """Clip center-form boxes to the image, keeping at least ``MIN_SIZE`` per side."""
    c = to_corners(boxes)
    c[:, 0] = np.clip(c[:, 0], 0, width - MIN_SIZE)
    c[:, 1] = np.clip(c[:, 1], 0, height - MIN_SIZE)
    c[:, 2] = np.clip(c[:, 2], c[:, 0] + MIN_SIZE, width)
    c[:, 3] = np.clip(c[:, 3], c[:, 1] + MIN_SIZE, height)
    return from_corners(c)


def assign_pyramid_level(box: Box, P: int, canonical=None) -> int:
    """FPN-style level: ``clamp(floor(k0 + log2(sqrt(w*h) / s0)), 0, P-1)``."""
    if P < 1:
        raise ValueError(f"need at least one pyramid level, got {P}")
    k0, s0 = canonical if canonical is not None else (P - 2, 56.0)
    level = math.floor(k0 + math.log2(math.sqrt(box.w * box.h) / s0))
    return int(min(max(level, 0), P - 1))


def assign_levels(boxes: np.ndarray, P: int, canonical=None) -> np.ndarray:
    k0, s0 = canonical if canonical is not None else (P - 2, 56.0)
    boxes = np.asarray(boxes, np.float64)
    lv = np.floor(k0 + np.log2(np.sqrt(boxes[:, 2] * boxes[:, 3]) / s0))
    return np.clip(lv, 0, P - 1).astype(np.intp)


def bin_centers(boxes: np.ndarray, S: int) -> tuple:
    """Image-space bin centers of an S x S grid over each box: two [R, S] arrays (x, y)."""
    boxes = np.asarray(boxes, np.float64)
    frac = (np.arange(S) + 0.5) / S
    x = boxes[:, 0:1] - boxes[:, 2:3] / 2.0 + frac[None, :] * boxes[:, 2:3]
    y = boxes[:, 1:2] - boxes[:, 3:4] / 2.0 + frac[None, :] * boxes[:, 3:4]
    return x, y


def _axis_weights(coords: np.ndarray, size: int) -> np.ndarray:
    """Linear interpolation weights [..., size] for feature-space coordinates."""
    c = np.clip(coords, 0.0, size - 1.0)
    lo = np.floor(c).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    frac = c - lo
    w = np.zeros(coords.shape + (size,))
    np.put_along_axis(w, lo[..., None], (1.0 - frac)[..., None], axis=-1)
    # lo == hi at the border: the add keeps the weights summing to one
    hi_w = np.take_along_axis(w, hi[..., None], axis=-1) + frac[..., None]
    np.put_along_axis(w, hi[..., None], hi_w, axis=-1)
    return w


def roi_align_weights(boxes: np.ndarray, stride: float, S: int, height: int, width: int) -> np.ndarray:
    """Sampling matrix [R*S*S, height*width] for one bilinear sample per bin.

    Bin centers map to feature coordinates as ``x / stride - 0.5`` so feature
    cell ``k`` is centered on image coordinate ``(k + 0.5) * stride``; samples
    beyond the map clamp to the border.
    """
    xs, ys = bin_centers(boxes, S)
    wx = _axis_weights(xs / stride - 0.5, width)  # [R, S, W]
    wy = _axis_weights(ys / stride - 0.5, height)  # [R, S, H]
    R = wx.shape[0]
    m = wy[:, :, None, :, None] * wx[:, None, :, None, :]  # [R, Sy, Sx, H, W]
    return m.reshape(R * S * S, height * width)


def roi_align(tape, feature: Tensor, boxes, stride: float, S: int) -> Tensor:
    """Pool [C,H,W] features inside each box to a [R, C, S, S] tensor."""
    boxes = boxes_to_array(boxes)
    C, H, W = feature.shape
    weights = roi_align_weights(boxes, stride, S, H, W)
    sampled = interpolate(tape, feature, weights)  # [R*S*S, C]
    R = boxes.shape[0]
    return transpose(tape, reshape(tape, sampled, (R, S, S, C)), (0, 3, 1, 2))


def roi_align_nodes(tape, feature: Tensor, boxes, stride: float, S: int) -> Tensor:
    """Same sampling as :func:`roi_align`, laid out as [R, S*S, C] pixel nodes (row-major bins)."""
    boxes = boxes_to_array(boxes)
    C, H, W = feature.shape
    sampled = interpolate(tape, feature, roi_align_weights(boxes, stride, S, H, W))
    return reshape(tape, sampled, (boxes.shape[0], S * S, C))

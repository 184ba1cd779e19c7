"""Procedural detection scenes: colored circles, squares and triangles on noise.

A scene is a pure function of ``(spec.seed, index)``, so a dataset is pinned
by its :class:`SceneSpec` alone (see :func:`spec_hash`).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np

from .geometry import Box, array_to_boxes, boxes_to_array, clip_to_image, iou_matrix

CLASS_NAMES = ("background", "circle", "square", "triangle")
CLASS_COLORS = {
    1: (0.90, 0.20, 0.20),
    2: (0.20, 0.85, 0.25),
    3: (0.25, 0.35, 0.95),
}
BACKGROUND_LEVEL = 0.45
MAX_PLACEMENT_OVERLAP = 0.1


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 5
    min_size: int = 12
    max_size: int = 28
    noise: float = 0.15
    class_probs: Tuple[float, float, float] = (0.6, 0.3, 0.1)
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range must satisfy 1 <= min <= max")
        if not 1 <= self.min_size <= self.max_size <= min(self.height, self.width):
            raise ValueError("object size range must fit inside the image")
        if len(self.class_probs) != 3 or min(self.class_probs) < 0 or not np.isclose(sum(self.class_probs), 1.0):
            raise ValueError(f"class_probs must be 3 nonnegative values summing to 1, got {self.class_probs}")


@dataclass
class SyntheticScene:
    image: np.ndarray  # [3, H, W] in [0, 1]
    boxes: np.ndarray  # [G, 4] center form
    labels: np.ndarray  # [G] in 1..3
    index: int = 0

    @property
    def gt(self) -> List[Tuple[Box, int]]:
        return list(zip(array_to_boxes(self.boxes), self.labels.tolist()))


def spec_hash(spec: SceneSpec) -> str:
    """Stable digest pinning every scene a spec can generate."""
    items = sorted(asdict(spec).items())
    return hashlib.sha256(repr(items).encode()).hexdigest()[:16]


def split_indices(n_train: int, n_val: int) -> Tuple[range, range]:
    """Disjoint train/val index ranges."""
    return range(0, n_train), range(n_train, n_train + n_val)


def _shape_mask(label: int, s: int) -> np.ndarray:
    """Boolean [s, s] mask of pixel centers covered by the shape."""
    c = np.arange(s) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if label == 1:
        r = s / 2.0
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if label == 2:
        return np.ones((s, s), dtype=bool)
    # upward triangle: apex at top center, base along the bottom edge
    return np.abs(xx - s / 2.0) <= yy / 2.0


def generate_scene(spec: SceneSpec, index: int) -> SyntheticScene:
    rng = np.random.default_rng([spec.seed, index])
    H, W = spec.height, spec.width
    amp = spec.noise
    image = BACKGROUND_LEVEL + rng.uniform(-amp, amp, size=(3, H, W)) if amp > 0 else np.full((3, H, W), BACKGROUND_LEVEL)

    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes, labels = [], []
    for _ in range(count):
        label = int(rng.choice(3, p=spec.class_probs)) + 1
        for _attempt in range(50):
            s = int(rng.integers(spec.min_size, spec.max_size + 1))
            x1 = int(rng.integers(0, W - s + 1))
            y1 = int(rng.integers(0, H - s + 1))
            cand = np.array([[x1 + s / 2.0, y1 + s / 2.0, s, s]])
            if not boxes or iou_matrix(cand, np.array(boxes)).max() < MAX_PLACEMENT_OVERLAP:
                break
        else:
            continue
        mask = _shape_mask(label, s)
        color = np.array(CLASS_COLORS[label])
        patch = image[:, y1 : y1 + s, x1 : x1 + s]
        fill = np.broadcast_to(color[:, None, None], (3, s, s))
        if amp > 0:
            fill = fill + rng.uniform(-amp, amp, size=(3, s, s))
        patch[:, mask] = fill[:, mask]
        boxes.append(cand[0])
        labels.append(label)

    image = np.clip(image, 0.0, 1.0)
    return SyntheticScene(image, np.array(boxes).reshape(-1, 4), np.array(labels, dtype=np.int64), index)


def sample_proposals(scene: SyntheticScene, n_per_gt: int, n_bg: int, jitter: float, seed) -> List[Box]:
    """Jittered copies of every gt box plus uniformly placed background boxes."""
    if n_per_gt < 1:
        raise ValueError("n_per_gt must be at least 1")
    rng = np.random.default_rng(seed)
    H, W = scene.image.shape[1:]
    gt = boxes_to_array(scene.boxes)
    out = []
    if len(gt):
        rep = np.repeat(gt, n_per_gt, axis=0)
        if jitter > 0:
            u = rng.uniform(-jitter, jitter, size=rep.shape)
            rep = np.stack(
                [
                    rep[:, 0] + u[:, 0] * rep[:, 2],
                    rep[:, 1] + u[:, 1] * rep[:, 3],
                    rep[:, 2] * (1.0 + u[:, 2]),
                    rep[:, 3] * (1.0 + u[:, 3]),
                ],
                axis=1,
            )
            rep = clip_to_image(rep, H, W)
        out.append(rep)
    if n_bg > 0:
        lo, hi = 6.0, 0.6 * min(H, W)
        wh = rng.uniform(lo, hi, size=(n_bg, 2))
        cx = rng.uniform(wh[:, 0] / 2, W - wh[:, 0] / 2)
        cy = rng.uniform(wh[:, 1] / 2, H - wh[:, 1] / 2)
        out.append(np.stack([cx, cy, wh[:, 0], wh[:, 1]], axis=1))
    arr = np.concatenate(out, axis=0) if out else np.zeros((0, 4))
    return array_to_boxes(arr)


def class_counts(spec: SceneSpec, indices) -> np.ndarray:
    """Number of gt objects per class (index 0 unused) over the given scenes."""
    counts = np.zeros(len(CLASS_NAMES), dtype=np.int64)
    for i in indices:
        labels = generate_scene(spec, i).labels
        counts += np.bincount(labels, minlength=len(CLASS_NAMES))
    return counts


def export_scene(scene: SyntheticScene, directory: str, stem: str) -> Tuple[str, str]:
    """Write ``<stem>.png`` and a ``<stem>.txt`` sidecar of ``class x1 y1 x2 y2`` lines."""
    from PIL import Image

    os.makedirs(directory, exist_ok=True)
    png = os.path.join(directory, f"{stem}.png")
    txt = os.path.join(directory, f"{stem}.txt")
    pixels = np.round(np.transpose(scene.image, (1, 2, 0)) * 255).astype(np.uint8)
    Image.fromarray(pixels).save(png)
    with open(txt, "w") as fh:
        for box, label in zip(scene.boxes, scene.labels):
            x1, y1 = box[0] - box[2] / 2, box[1] - box[3] / 2
            x2, y2 = box[0] + box[2] / 2, box[1] + box[3] / 2
            fh.write(f"{CLASS_NAMES[label]} {x1:g} {y1:g} {x2:g} {y2:g}\n")
    return png, txt

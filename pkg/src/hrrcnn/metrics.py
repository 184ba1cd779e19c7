"""Detection AP (COCO-style, 101-point), per-class delta-AP regression and parameter counts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .geometry import iou_matrix

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.arange(101) / 100.0  # correctly rounded, unlike linspace


@dataclass
class Detections:
    """Detections for one image: center-form boxes, scores and class ids (1-based)."""

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.scores)


def match_detections(det_boxes: np.ndarray, gt_boxes: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy TP flags for score-sorted detections of a single class.

    Each detection takes the unmatched gt with the highest IoU, provided that
    IoU reaches ``iou_thr``; a gt is matched at most once.
    """
    det_boxes = np.asarray(det_boxes, np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, np.float64).reshape(-1, 4)
    flags = np.zeros(len(det_boxes), dtype=bool)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return flags
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in range(len(det_boxes)):
        cand = np.where(taken, -1.0, ious[d])
        g = int(np.argmax(cand))
        if cand[g] >= iou_thr:
            taken[g] = True
            flags[d] = True
    return flags


def average_precision(flags, scores, n_gt: int) -> float:
    """101-point interpolated AP of a ranked list of TP/FP flags."""
    if n_gt < 1:
        raise ValueError("average precision is undefined without ground truth")
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, np.float64), kind="stable")
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # monotone envelope: best precision at any recall at least this large
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class ApReport:
    class_ids: List[int]
    ap50: Dict[int, float]
    ap: Dict[int, float]
    gt_counts: Dict[int, int]
    train_counts: Dict[int, int] = field(default_factory=dict)

    @property
    def evaluated(self) -> List[int]:
        return [c for c in self.class_ids if self.gt_counts.get(c, 0) > 0]

    @property
    def mean_ap50(self) -> float:
        cs = self.evaluated
        return float(np.mean([self.ap50[c] for c in cs])) if cs else 0.0

    @property
    def mean_ap(self) -> float:
        cs = self.evaluated
        return float(np.mean([self.ap[c] for c in cs])) if cs else 0.0


def evaluate_detections(
    detections: Sequence[Detections],
    gt_boxes: Sequence[np.ndarray],
    gt_labels: Sequence[np.ndarray],
    class_ids: Sequence[int],
) -> ApReport:
    """Per-class AP50 and AP@[.5:.95] over a set of images."""
    ap50, ap, counts = {}, {}, {}
    for c in class_ids:
        n_gt = int(sum(int(np.sum(np.asarray(l) == c)) for l in gt_labels))
        counts[c] = n_gt
        if n_gt == 0:
            ap50[c] = ap[c] = 0.0
            continue
        per_thr = []
        for thr in IOU_THRESHOLDS:
            all_flags, all_scores = [], []
            for det, gb, gl in zip(detections, gt_boxes, gt_labels):
                sel = det.labels == c
                scores = det.scores[sel]
                order = np.argsort(-scores, kind="stable")
                boxes = det.boxes[sel][order]
                all_flags.append(match_detections(boxes, np.asarray(gb)[np.asarray(gl) == c], thr))
                all_scores.append(scores[order])
            per_thr.append(average_precision(np.concatenate(all_flags), np.concatenate(all_scores), n_gt))
        ap50[c] = per_thr[0]
        ap[c] = float(np.mean(per_thr))
    return ApReport(list(class_ids), ap50, ap, counts)


@dataclass
class FrequencyRegression:
    slope: float
    intercept: float
    x: np.ndarray
    y: np.ndarray
    log_scale: bool = False

    def predict(self, x) -> np.ndarray:
        return self.intercept + self.slope * np.asarray(x, np.float64)

    @property
    def residuals(self) -> np.ndarray:
        return self.y - self.predict(self.x)


def class_frequency_regression(delta_ap, counts, log_scale: bool = False) -> FrequencyRegression:
    """Least-squares line of per-class delta-AP against training count (or its log)."""
    y = np.asarray(delta_ap, np.float64)
    x = np.asarray(counts, np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need matching count/delta arrays with at least two classes")
    if log_scale:
        x = np.log(x)
    xc = x - x.mean()
    sxx = float(np.dot(xc, xc))
    if sxx == 0.0:
        raise ValueError("all class counts are equal; slope is undefined")
    slope = float(np.dot(xc, y - y.mean()) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    return FrequencyRegression(slope, intercept, x, y, log_scale)


def linear_param_count(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def param_count_report(params) -> Dict[str, float]:
    """Parameter counts per component of an ``HrModelParams``.

    Keys: ``backbone``, ``projection``, ``box_head``, one ``gam.<name>`` per
    graph module plus ``gam.<name>.attention`` / ``gam.<name>.fusion`` splits,
    ``gam_total``, ``gam_attention_total``, ``total``.
    """
    reg = params.registry
    report = {
        "backbone": reg.num_params("backbone."),
        "projection": reg.num_params("proj"),
        "box_head": reg.num_params("box_head."),
    }
    gam_total = attn_total = 0
    for name, gp in params.gams().items():
        a, f = gp.attention_size(), gp.fusion_size()
        report[f"gam.{name}"] = a + f
        report[f"gam.{name}.attention"] = a
        report[f"gam.{name}.fusion"] = f
        gam_total += a + f
        attn_total += a
    extra_heads = reg.num_params("box_head2.")
    if extra_heads:
        report["box_head_stage2"] = extra_heads
    report["gam_total"] = gam_total
    report["gam_attention_total"] = attn_total
    report["total"] = sum(t.size for t in reg.tensors())
    report["gam_to_box_head_ratio"] = gam_total / report["box_head"]
    report["gam_attention_to_box_head_ratio"] = attn_total / report["box_head"]
    return report

"""Mean average precision with 101-point interpolation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import box_iou

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class Detections:
    """Detections for one image."""

    boxes: np.ndarray  # (D, 4)
    scores: np.ndarray  # (D,)
    labels: np.ndarray  # (D,) int

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.scores)


@dataclass
class GroundTruth:
    """Annotated boxes for one image (no scores)."""

    boxes: np.ndarray  # (G, 4)
    labels: np.ndarray  # (G,) int

    def __len__(self) -> int:
        return len(self.labels)


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """Area under the 101-point interpolated PR curve of score-ordered ``tp`` flags."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # precision envelope: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = idx < len(recall)
    sampled = np.where(valid, envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(sampled.mean())


def match_class(dets: Sequence[Detections], gts: Sequence[GroundTruth], cls: int, thr: float):
    """Greedy score-ordered matching for one class; returns (tp flags, #gt)."""
    entries = []
    for img, d in enumerate(dets):
        for j in np.nonzero(d.labels == cls)[0]:
            entries.append((-float(d.scores[j]), img, int(j)))
    entries.sort()
    gt_boxes = [g.boxes[g.labels == cls] for g in gts]
    used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    n_gt = int(sum(len(b) for b in gt_boxes))
    tp = np.zeros(len(entries))
    for k, (_, img, j) in enumerate(entries):
        cand = gt_boxes[img]
        if len(cand) == 0:
            continue
        ious = box_iou(dets[img].boxes[j], cand)[0]
        ious = np.where(used[img], -1.0, ious)
        best = int(np.argmax(ious))  # first index wins equal IoU
        if ious[best] >= thr:
            used[img][best] = True
            tp[k] = 1.0
    return tp, n_gt


def evaluate_map(dets: Sequence[Detections], gts: Sequence[GroundTruth], num_classes: int,
                 iou_thresholds: Sequence[float] = (0.5,)) -> float:
    """mAP averaged over classes that have ground truth and over thresholds."""
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection lists for {len(gts)} images")
    if sum(len(g) for g in gts) == 0:
        raise ValueError("mAP undefined: no ground truth boxes")
    aps = []
    for thr in iou_thresholds:
        for c in range(num_classes):
            tp, n_gt = match_class(dets, gts, c, thr)
            if n_gt == 0:
                continue
            aps.append(interpolated_ap(tp, n_gt))
    return float(np.mean(aps))

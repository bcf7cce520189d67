"""Anchors, box coding, IoU and greedy NMS.

Boxes are ``(x1, y1, x2, y2)`` rows in image pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# keeps exp(dw) finite for wild offsets
MAX_LOG_RATIO = float(np.log(1000.0 / 16))


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = 0
    score: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)


def generate_anchors(image_size: int, strides, sizes) -> list[np.ndarray]:
    """Square anchors per level, ordered row, col, anchor.

    ``sizes[l]`` lists the anchor side lengths used at level ``l``.
    """
    levels = []
    for stride, level_sizes in zip(strides, sizes):
        g = image_size // stride
        cy, cx = np.meshgrid((np.arange(g) + 0.5) * stride, (np.arange(g) + 0.5) * stride, indexing="ij")
        centers = np.stack([cx, cy], axis=-1).reshape(-1, 1, 2)
        half = np.asarray(level_sizes, dtype=np.float64).reshape(1, -1, 1) / 2.0
        boxes = np.concatenate([centers - half, centers + half], axis=-1)
        levels.append(boxes.reshape(-1, 4))
    return levels


def _cwh(b: np.ndarray):
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Offsets ``(dx, dy, dw, dh)`` that map ``anchors`` onto ``gt``."""
    gx, gy, gw, gh = _cwh(np.asarray(gt, dtype=np.float64))
    ax, ay, aw, ah = _cwh(np.asarray(anchors, dtype=np.float64))
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray, image_size: float | None = None) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; clips to ``[0, image_size]`` when given."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape[-1] != 4:
        raise ValueError(f"offsets must end in 4 values, got shape {offsets.shape}")
    if not np.all(np.isfinite(offsets)):
        raise ValueError("decode_boxes: non-finite offsets")
    ax, ay, aw, ah = _cwh(np.asarray(anchors, dtype=np.float64))
    dw = np.minimum(offsets[..., 2], MAX_LOG_RATIO)
    dh = np.minimum(offsets[..., 3], MAX_LOG_RATIO)
    cx = ax + offsets[..., 0] * aw
    cy = ay + offsets[..., 1] * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if image_size is not None:
        out = np.clip(out, 0.0, float(image_size))
    return out


def box_area(b: np.ndarray) -> np.ndarray:
    return np.maximum(b[..., 2] - b[..., 0], 0.0) * np.maximum(b[..., 3] - b[..., 1], 0.0)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix between ``a`` (N, 4) and ``b`` (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two equally shaped (..., 4) arrays."""
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a: Box, b: Box) -> float:
    return float(box_iou(a.as_array(), b.as_array())[0, 0])


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order.

    Equal scores are visited in index order. A box is suppressed when its
    IoU with an already kept box exceeds ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    ious = box_iou(boxes, boxes)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if not alive[pos]:
            continue
        keep.append(i)
        rest = order[pos + 1 :]
        alive[pos + 1 :] &= ious[i, rest] <= iou_threshold
    return np.asarray(keep, dtype=np.int64)

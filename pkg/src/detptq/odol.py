"""Object Detection Output Loss: a label-free distance between FP and quantized detector outputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .toydet.boxes import nms, paired_iou
from .toydet.model import DetectionOutput

CLS_FNS = ("mse", "kl")
LOC_FNS = ("l1", "iou")
DEFAULT_ALPHA = {"l1": 0.1, "iou": 0.001}
PROB_CLAMP = 1e-8


@dataclass
class ODOLConfig:
    cls_fn: str = "kl"
    loc_fn: str = "l1"
    alpha: float | None = None  # None -> 0.1 for L1, 0.001 for IoU
    score_threshold: float = 0.05
    top_k: int = 100
    nms_threshold: float = 0.5

    def __post_init__(self):
        self.cls_fn = self.cls_fn.lower()
        self.loc_fn = self.loc_fn.lower()
        if self.cls_fn not in CLS_FNS:
            raise ValueError(f"cls_fn must be one of {CLS_FNS}, got {self.cls_fn!r}")
        if self.loc_fn not in LOC_FNS:
            raise ValueError(f"loc_fn must be one of {LOC_FNS}, got {self.loc_fn!r}")
        if self.alpha is None:
            self.alpha = DEFAULT_ALPHA[self.loc_fn]
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError("score_threshold must lie in (0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")

    @property
    def label(self) -> str:
        return f"{self.cls_fn}+{self.loc_fn}"


@dataclass
class PositiveSet:
    """Per-image boolean mask over the flattened anchors, taken from the FP pass only."""

    mask: np.ndarray  # (B, N)

    def __len__(self) -> int:
        return int(self.mask.sum())

    def select(self, idx) -> "PositiveSet":
        return PositiveSet(self.mask[idx])


def select_positive_boxes(fp_output: DetectionOutput, cfg: ODOLConfig) -> PositiveSet:
    """Score threshold, then top-k, then class-agnostic NMS on the decoded FP boxes."""
    scores = fp_output.probs[..., :-1].max(axis=-1)
    boxes = fp_output.boxes
    mask = np.zeros(scores.shape, dtype=bool)
    for i in range(scores.shape[0]):
        cand = np.nonzero(scores[i] >= cfg.score_threshold)[0]
        if len(cand) == 0:
            continue
        order = np.argsort(-scores[i, cand], kind="stable")[: cfg.top_k]
        cand = cand[order]
        keep = nms(boxes[i, cand], scores[i, cand], cfg.nms_threshold)
        mask[i, cand[keep]] = True
    return PositiveSet(mask)


def _check_prob(c: np.ndarray, name: str) -> None:
    if np.any(np.abs(c.sum(axis=-1) - 1.0) > 1e-6) or np.any(c < -1e-6):
        raise ValueError(f"{name} is not a probability vector along the last axis")


def cls_loss(c, cq, fn: str = "kl") -> np.ndarray:
    """Per-anchor classification distance between probability vectors (last axis)."""
    c = np.asarray(c, dtype=np.float64)
    cq = np.asarray(cq, dtype=np.float64)
    if c.shape != cq.shape:
        raise ValueError(f"cls_loss: shapes differ {c.shape} vs {cq.shape}")
    _check_prob(c, "c")
    _check_prob(cq, "cq")
    fn = fn.lower()
    if fn == "mse":
        return np.mean((c - cq) ** 2, axis=-1)
    if fn == "kl":
        # KL(FP || quantized) on clamped, renormalised distributions
        a = np.clip(c, PROB_CLAMP, 1.0)
        b = np.clip(cq, PROB_CLAMP, 1.0)
        a = a / a.sum(axis=-1, keepdims=True)
        b = b / b.sum(axis=-1, keepdims=True)
        return np.sum(a * (np.log(a) - np.log(b)), axis=-1)
    raise ValueError(f"unknown cls_fn {fn!r}")


def loc_loss(l, lq, fn: str = "l1") -> np.ndarray:
    """Per-box localization distance between decoded boxes (last axis = 4 coordinates)."""
    l = np.asarray(l, dtype=np.float64)
    lq = np.asarray(lq, dtype=np.float64)
    fn = fn.lower()
    if fn == "l1":
        return np.mean(np.abs(l - lq), axis=-1)
    if fn == "iou":
        return 1.0 - paired_iou(l, lq)
    raise ValueError(f"unknown loc_fn {fn!r}")


@dataclass(frozen=True)
class ODOLValue:
    total: float
    cls_term: float
    loc_term: float

    def __float__(self) -> float:
        return self.total


def odol(fp_output: DetectionOutput, q_output: DetectionOutput, positives: PositiveSet,
         cfg: ODOLConfig) -> ODOLValue:
    """Mean over images of ``(1/N) * sum_i (L_cls,i + alpha * L_loc,i * I_pos,i)``."""
    if fp_output.cls_logits.shape != q_output.cls_logits.shape:
        raise ValueError(f"anchor layout mismatch: {fp_output.cls_logits.shape} vs {q_output.cls_logits.shape}")
    if positives.mask.shape != fp_output.cls_logits.shape[:2]:
        raise ValueError("positive mask does not match the outputs")
    n = fp_output.num_anchors
    lc = cls_loss(fp_output.probs, q_output.probs, cfg.cls_fn)  # (B, N)
    cls_term = lc.sum(axis=1) / n
    mask = positives.mask
    loc_term = np.zeros(lc.shape[0])
    if mask.any():
        ll = loc_loss(fp_output.boxes[mask], q_output.boxes[mask], cfg.loc_fn)
        per_img = np.zeros(lc.shape[0])
        np.add.at(per_img, np.nonzero(mask)[0], ll)
        loc_term = cfg.alpha * per_img / n
    c, l = float(cls_term.mean()), float(loc_term.mean())
    return ODOLValue(c + l, c, l)

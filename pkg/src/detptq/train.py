"""Supervised training of the toy detector (produces the pre-trained FP model)."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import Adam
from .synthdata import SyntheticDataset
from .toydet.boxes import box_iou, encode_boxes
from .toydet.metrics import GroundTruth
from .toydet.model import ToyDetector

log = logging.getLogger(__name__)

POS_IOU = 0.5
NEG_IOU = 0.4
SMOOTH_L1_BETA = 1.0 / 9.0


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class AnchorTargets:
    labels: np.ndarray  # (B, N) class id, K for background
    valid: np.ndarray  # (B, N) bool, False in the ignore band
    offsets: np.ndarray  # (B, N, 4)


def assign_targets(anchors: np.ndarray, gts: list[GroundTruth], num_classes: int) -> AnchorTargets:
    """IoU >= 0.5 positive, [0.4, 0.5) ignored, rest background.

    Each ground-truth box also claims its best anchor so that no object
    goes without a positive.
    """
    n = anchors.shape[0]
    labels = np.full((len(gts), n), num_classes, dtype=np.int64)
    valid = np.ones((len(gts), n), dtype=bool)
    offsets = np.zeros((len(gts), n, 4))
    for i, gt in enumerate(gts):
        if len(gt) == 0:
            continue
        ious = box_iou(anchors, gt.boxes)  # (N, G)
        best_gt = ious.argmax(axis=1)
        best_iou = ious.max(axis=1)
        pos = best_iou >= POS_IOU
        valid[i] = ~((best_iou >= NEG_IOU) & ~pos)
        forced = ious.argmax(axis=0)
        best_gt[forced] = np.arange(len(gt))
        pos[forced] = True
        valid[i, forced] = True
        labels[i, pos] = gt.labels[best_gt[pos]]
        offsets[i, pos] = encode_boxes(gt.boxes[best_gt[pos]], anchors[pos])
    return AnchorTargets(labels, valid, offsets)


def detection_loss(model: ToyDetector, images: np.ndarray, tgt: AnchorTargets, tparams: dict) -> T.Tensor:
    """Softmax cross-entropy over non-ignored anchors plus smooth-L1 on positives, per positive."""
    k = model.config.num_classes
    outs = model.features(images, tparams=tparams)
    cls, box = model.head(outs, tparams=tparams)
    pos = tgt.labels < k
    norm = max(1.0, float(pos.sum()))
    onehot = np.zeros(cls.shape)
    np.put_along_axis(onehot, tgt.labels[..., None], 1.0, axis=-1)
    onehot *= tgt.valid[..., None] / norm
    ce = T.neg(T.sum(T.mul(T.log_softmax(cls, -1), onehot)))
    diff = T.sub(box, tgt.offsets)
    reg = T.sum(T.mul(T.smooth_l1(diff, SMOOTH_L1_BETA), np.broadcast_to(pos[..., None] / norm, box.shape).copy()))
    return T.add(ce, reg)


def snap_f32(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Round every array to float32 precision (what the container stores)."""
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def train_toy(model: ToyDetector, train_set: SyntheticDataset, epochs: int, seed: int = 0,
              batch_size: int = 32, lr: float = 1e-3, log_every: int = 0) -> ToyDetector:
    """Return a trained copy of ``model``; ``model`` itself is not modified."""
    out = model.copy()
    if epochs <= 0:
        return out
    rng = np.random.default_rng(seed)
    x_all = train_set.inputs()
    tgt_all = assign_targets(model.anchors, train_set.annotations, model.config.num_classes)
    tparams = {k: T.Tensor(v, requires_grad=True, name=k) for k, v in out.params.items()}
    opt = Adam(list(tparams.values()), lr=lr)
    n = len(train_set)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    total = epochs * steps_per_epoch
    step = 0
    for ep in range(epochs):
        perm = rng.permutation(n)
        running = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * batch_size : (b + 1) * batch_size]
            tgt = AnchorTargets(tgt_all.labels[idx], tgt_all.valid[idx], tgt_all.offsets[idx])
            # cosine decay to 10% of the initial rate
            opt.state.lr = lr * (0.1 + 0.45 * (1 + np.cos(np.pi * step / total)))
            opt.zero_grad()
            loss = detection_loss(out, x_all[idx], tgt, tparams)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {ep}, step {b}")
            T.backward(loss)
            opt.step()
            running += loss.item()
            step += 1
            if log_every and step % log_every == 0:
                log.info("epoch %d step %d loss %.4f", ep, step, loss.item())
        log.info("epoch %d mean loss %.4f", ep, running / steps_per_epoch)
        out.params = {k: t.data for k, t in tparams.items()}
    out.params = snap_f32({k: t.data for k, t in tparams.items()})
    return out

"""Detection and activation-sparsity losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as F
from .detect.boxes import AnchorSet, match_anchors


@dataclass
class LossCfg:
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    smooth_l1_beta: float = 1.0
    beta_sparse: float = 0.04
    pos_iou: float = 0.5
    neg_iou: float = 0.4

    def __post_init__(self):
        for k, v in vars(self).items():
            if not (v >= 0 if k == "beta_sparse" else v > 0):
                raise ValueError(f"loss parameter {k} must be {'non-negative' if k == 'beta_sparse' else 'positive'}, got {v}")
        if self.neg_iou > self.pos_iou:
            raise ValueError("neg_iou must not exceed pos_iou")


@dataclass
class DetectionTargets:
    onehot: np.ndarray  # [B, A, K]
    valid: np.ndarray  # [B, A] anchors that are not ignored
    positive: np.ndarray  # [B, A]
    box: np.ndarray  # [B, A, 4] encoded offsets (zero off the positives)

    @property
    def n_pos(self) -> int:
        return int(self.positive.sum())


def build_targets(anchors: AnchorSet, gt_frames, num_classes: int, cfg: LossCfg = LossCfg()) -> DetectionTargets:
    """Match anchors against each frame's boxes (``gt_frames`` is a list of Box lists)."""
    B, A = len(gt_frames), len(anchors)
    onehot = np.zeros((B, A, num_classes), np.float32)
    valid = np.zeros((B, A), bool)
    box = np.zeros((B, A, 4), np.float32)
    for i, boxes in enumerate(gt_frames):
        xywh = [[b.x, b.y, b.w, b.h] for b in boxes]
        cls = [b.cls for b in boxes]
        if any(c < 0 or c >= num_classes for c in cls):
            raise ValueError(f"class id out of range in frame {i}")
        labels, tgt = match_anchors(anchors, xywh, cls, cfg.pos_iou, cfg.neg_iou)
        pos = labels > 0
        onehot[i, np.flatnonzero(pos), labels[pos] - 1] = 1.0
        valid[i] = labels >= 0
        box[i] = tgt
    return DetectionTargets(onehot, valid, onehot.any(axis=2), box)


def detection_loss(cls_logits, box_deltas, targets: DetectionTargets, cfg: LossCfg = LossCfg()):
    """Focal loss over all non-ignored anchors plus smooth-L1 on positives, both over max(1, #pos).

    Returns ``(loss, components)`` where components holds plain floats.
    """
    norm = 1.0 / max(1, targets.n_pos)
    cls = F.scale(F.focal_loss(cls_logits, targets.onehot, targets.valid[..., None],
                               cfg.focal_alpha, cfg.focal_gamma), norm)
    if targets.n_pos:
        reg = F.scale(F.smooth_l1(box_deltas, targets.box, targets.positive[..., None], cfg.smooth_l1_beta), norm)
        total = cls + reg
    else:
        reg, total = None, cls
    return total, {"cls": float(cls.data), "reg": float(reg.data) if reg is not None else 0.0}


def sparsity_loss(activations, beta: float, N: int, T: int):
    """``beta / (N T)`` times the summed L1 norm of every flagged activation map."""
    items = list(activations.values()) if isinstance(activations, dict) else list(activations)
    if not items:
        return F.Var(np.float32(0.0))
    total = F.l1(items[0])
    for a in items[1:]:
        total = total + F.l1(a)
    return F.scale(total, beta / (N * T))

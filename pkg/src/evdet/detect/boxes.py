"""Box geometry: IoU, SSD-style offset coding, anchors and anchor matching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..netspec import DEFAULT_RATIOS, DEFAULT_SCALES, NetworkSpec, describe

VARIANCES = (0.1, 0.2)


def xywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:4]], axis=-1)


def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:4] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:4]) / 2, b[..., 2:4] - b[..., :2]], axis=-1)


def iou_matrix(a, b):
    """Pairwise IoU of xyxy boxes ``a`` [n, 4] and ``b`` [m, 4]."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0, None), axis=2)
    area_a = np.prod(np.clip(a[:, 2:] - a[:, :2], 0, None), axis=1)
    area_b = np.prod(np.clip(b[:, 2:] - b[:, :2], 0, None), axis=1)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def encode(gt_cxcywh, anchors_cxcywh):
    g, a = np.asarray(gt_cxcywh, np.float64), np.asarray(anchors_cxcywh, np.float64)
    return np.concatenate([
        (g[..., :2] - a[..., :2]) / (a[..., 2:] * VARIANCES[0]),
        np.log(g[..., 2:] / a[..., 2:]) / VARIANCES[1],
    ], axis=-1)


def decode(deltas, anchors_cxcywh):
    d, a = np.asarray(deltas, np.float64), np.asarray(anchors_cxcywh, np.float64)
    ctr = a[..., :2] + d[..., :2] * VARIANCES[0] * a[..., 2:]
    wh = a[..., 2:] * np.exp(np.clip(d[..., 2:] * VARIANCES[1], -10, 10))
    return np.concatenate([ctr, wh], axis=-1)


@dataclass
class AnchorSet:
    boxes: np.ndarray  # [A_total, 4] as (cx, cy, w, h) pixels
    per_scale: list  # anchor count per scale
    feature_shapes: list  # (H, W) per scale
    image_size: tuple  # (H, W)

    def __len__(self):
        return len(self.boxes)

    @property
    def xyxy(self):
        return cxcywh_to_xyxy(self.boxes)


def make_anchors(feature_shapes, image_size, base_sizes, ratios=DEFAULT_RATIOS, scales=DEFAULT_SCALES) -> AnchorSet:
    """Tile every feature cell with one anchor per (ratio, scale); order is (y, x, anchor)."""
    img_h, img_w = image_size
    shapes = []
    for r in ratios:
        for m in scales:
            shapes.append((np.sqrt(1.0 / r), np.sqrt(r), m))
    out, counts = [], []
    for (H, W), base in zip(feature_shapes, base_sizes):
        sy, sx = img_h / H, img_w / W
        cy, cx = np.meshgrid((np.arange(H) + 0.5) * sy, (np.arange(W) + 0.5) * sx, indexing="ij")
        wh = np.array([(base * m * fw, base * m * fh) for fw, fh, m in shapes])  # [A, 2]
        A = len(wh)
        b = np.zeros((H, W, A, 4))
        b[..., 0] = cx[..., None]
        b[..., 1] = cy[..., None]
        b[..., 2] = wh[:, 0]
        b[..., 3] = wh[:, 1]
        out.append(b.reshape(-1, 4))
        counts.append(H * W * A)
    return AnchorSet(np.concatenate(out), counts, list(feature_shapes), tuple(image_size))


def anchors_for(spec: NetworkSpec) -> AnchorSet:
    head = spec.head
    shapes = [l.out_shape[1:] for l in describe(spec) if l.kind == "EventConvRNN"]
    return make_anchors(shapes, spec.input[1:], head["anchor_sizes"],
                        head.get("ratios", DEFAULT_RATIOS), head.get("scales", DEFAULT_SCALES))


def match_anchors(anchors: AnchorSet, gt_xywh, gt_cls, pos_iou=0.5, neg_iou=0.4):
    """Assign each anchor a label: -1 ignored, 0 background, ``1 + class`` foreground.

    Anchors with IoU >= ``pos_iou`` are positive, below ``neg_iou`` negative.
    Every ground-truth box additionally claims its best anchor.  Returns
    ``(labels, regression_targets)``.
    """
    n = len(anchors)
    labels = np.zeros(n, np.int64)
    targets = np.zeros((n, 4))
    gt_xywh = np.asarray(gt_xywh, np.float64).reshape(-1, 4)
    if len(gt_xywh) == 0:
        return labels, targets
    gt_xyxy = xywh_to_xyxy(gt_xywh)
    iou = iou_matrix(anchors.xyxy, gt_xyxy)  # [A, G]
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    forced = iou.argmax(axis=0)
    best_gt[forced] = np.arange(len(gt_xywh))
    best_iou[forced] = np.maximum(best_iou[forced], pos_iou)
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = -1
    pos = best_iou >= pos_iou
    labels[pos] = 1 + np.asarray(gt_cls)[best_gt[pos]]
    g = xyxy_to_cxcywh(gt_xyxy[best_gt[pos]])
    targets[pos] = encode(g, anchors.boxes[pos])
    return labels, targets

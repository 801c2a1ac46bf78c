"""SSD head on sparse multi-scale maps and detection post-processing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..network import Network
from ..sparse import ConvLayer, ShapeError, relu_sparsify, sparse_conv
from .boxes import AnchorSet, cxcywh_to_xyxy, decode, iou_matrix


@dataclass
class HeadScale:
    stems: list  # ConvLayers followed by ReLU
    cls: ConvLayer
    reg: ConvLayer


def head_layers(net: Network) -> list[HeadScale]:
    out = []
    for info in net.layers:
        if info.kind != "SSDHead":
            continue
        stems = [net.conv_layer(c.name, 1) for c in info.convs if ".stem" in c.name]
        out.append(HeadScale(stems, net.conv_layer(info.convs[-2].name, 1), net.conv_layer(info.convs[-1].name, 1)))
    return out


@dataclass
class RawPredictions:
    cls_logits: np.ndarray  # [anchors, classes]
    box_deltas: np.ndarray  # [anchors, 4]
    synops: int = 0


def head_forward(scales: list, head: list[HeadScale], num_classes: int, trace=None) -> RawPredictions:
    """Per scale, a classification and a regression convolution over the sparse map.

    Outputs are flattened in (scale, y, x, anchor) order to line up with
    :func:`evdet.detect.boxes.make_anchors`.  Stem outputs are recorded on
    ``trace`` (a :class:`evdet.network.SparsityTrace`) when one is given.
    """
    if len(scales) != len(head):
        raise ShapeError(f"head expects {len(head)} scales, got {len(scales)}")
    cls_parts, reg_parts, synops = [], [], 0
    for s, (m, hs) in enumerate(zip(scales, head)):
        for j, st in enumerate(hs.stems):
            pre, ops = sparse_conv(m, st)
            m = relu_sparsify(pre)
            synops += ops
            if trace is not None:
                trace.record(f"head.s{s}.stem{j}", m)
        c, ops_c = sparse_conv(m, hs.cls)
        r, ops_r = sparse_conv(m, hs.reg)
        synops += ops_c + ops_r
        cls_parts.append(c.transpose(1, 2, 0).reshape(-1, num_classes))
        reg_parts.append(r.transpose(1, 2, 0).reshape(-1, 4))
    return RawPredictions(np.concatenate(cls_parts), np.concatenate(reg_parts), synops)


@dataclass
class Detection:
    bbox: tuple  # (x, y, w, h) pixels
    cls: int
    score: float

    def to_json(self, frame: int) -> dict:
        return {"frame": frame, "bbox": [float(v) for v in self.bbox], "class": int(self.cls), "score": float(self.score)}


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, np.float64)))


def greedy_nms(boxes_xyxy, scores, iou_thresh):
    """Indices kept by greedy NMS, highest score first (ties broken by index)."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    keep = []
    boxes_xyxy = np.asarray(boxes_xyxy, np.float64)
    suppressed = np.zeros(len(order), bool)
    for i_pos, i in enumerate(order):
        if suppressed[i_pos]:
            continue
        keep.append(int(i))
        rest = order[i_pos + 1:]
        if len(rest):
            ious = iou_matrix(boxes_xyxy[i:i + 1], boxes_xyxy[rest])[0]
            suppressed[i_pos + 1:] |= ious > iou_thresh
    return keep


def nms(dets: list[Detection], iou_thresh=0.45, top_k=200) -> list[Detection]:
    """Per-class greedy NMS over an existing detection list."""
    out = []
    for k in sorted({d.cls for d in dets}):
        ds = [d for d in dets if d.cls == k]
        xyxy = np.array([[d.bbox[0], d.bbox[1], d.bbox[0] + d.bbox[2], d.bbox[1] + d.bbox[3]] for d in ds])
        out.extend(ds[i] for i in greedy_nms(xyxy, [d.score for d in ds], iou_thresh))
    out.sort(key=lambda d: -d.score)
    return out[:top_k]


def decode_nms(raw: RawPredictions, anchors: AnchorSet, score_thresh=0.05, iou_thresh=0.45, top_k=200,
               pre_nms_top=400) -> list[Detection]:
    """Decode offsets against anchors, clip to the image and run per-class NMS."""
    scores = _sigmoid(raw.cls_logits)
    boxes = cxcywh_to_xyxy(decode(raw.box_deltas, anchors.boxes))
    img_h, img_w = anchors.image_size
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, img_w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, img_h)
    dets = []
    for k in range(scores.shape[1]):
        cand = np.flatnonzero(scores[:, k] > score_thresh)
        cand = cand[(boxes[cand, 2] > boxes[cand, 0]) & (boxes[cand, 3] > boxes[cand, 1])]
        if len(cand) > pre_nms_top:
            cand = cand[np.argsort(-scores[cand, k], kind="stable")[:pre_nms_top]]
        for i in greedy_nms(boxes[cand], scores[cand, k], iou_thresh):
            b = boxes[cand[i]]
            dets.append(Detection((b[0], b[1], b[2] - b[0], b[3] - b[1]), k, float(scores[cand[i], k])))
    dets.sort(key=lambda d: -d.score)
    return dets[:top_k]

"""COCO-style mAP and group-wise mAP by instant event information."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..events import Box, box_event_density
from .boxes import iou_matrix

COCO_IOUS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class MapResult:
    map: float
    ap_per_iou: dict = field(default_factory=dict)  # iou -> AP averaged over classes
    ap_per_class: dict = field(default_factory=dict)  # class -> AP averaged over IoUs
    empty: bool = False  # no ground truth at all: mAP is reported as 0

    def to_json(self):
        return {"mAP": self.map, "ap_per_iou": {f"{k:.2f}": v for k, v in self.ap_per_iou.items()},
                "ap_per_class": {str(k): v for k, v in self.ap_per_class.items()}, "empty": self.empty}


def _xyxy(b):
    if isinstance(b, Box):
        return [b.x, b.y, b.x + b.w, b.y + b.h]
    x, y, w, h = b
    return [x, y, x + w, y + h]


def interpolated_ap(tp, n_gt):
    """101-point interpolated AP of a score-sorted true-positive sequence."""
    if n_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _match_class(dets, gts, thr):
    """Greedy COCO matching of score-sorted detections; returns the TP flag sequence."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    used = {}
    tp = []
    for i in order:
        frame, _score, box = dets[i]
        g = gts.get(frame, [])
        if not g:
            tp.append(0.0)
            continue
        taken = used.setdefault(frame, np.zeros(len(g), bool))
        ious = iou_matrix([box], g)[0]
        ious[taken] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= thr:
            taken[j] = True
            tp.append(1.0)
        else:
            tp.append(0.0)
    return tp


def coco_map(detections, ground_truth, iou_thresholds=COCO_IOUS, max_dets=100) -> MapResult:
    """Mean AP over IoU thresholds and over classes that have ground truth.

    ``detections`` and ``ground_truth`` are per-frame lists of
    :class:`~evdet.detect.head.Detection` and :class:`~evdet.events.Box`.
    """
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground truth must cover the same frames")
    classes = sorted({b.cls for frame in ground_truth for b in frame})
    if not classes:
        return MapResult(0.0, {float(t): 0.0 for t in iou_thresholds}, {}, empty=True)
    table = np.zeros((len(iou_thresholds), len(classes)))
    for ci, k in enumerate(classes):
        gts = {f: [_xyxy(b) for b in frame if b.cls == k] for f, frame in enumerate(ground_truth)}
        n_gt = sum(len(v) for v in gts.values())
        dets = []
        for f, frame in enumerate(detections):
            mine = sorted((d for d in frame if d.cls == k), key=lambda d: -d.score)[:max_dets]
            dets.extend((f, d.score, _xyxy(d.bbox)) for d in mine)
        for ti, thr in enumerate(iou_thresholds):
            table[ti, ci] = interpolated_ap(_match_class(dets, gts, thr), n_gt)
    return MapResult(
        float(table.mean()),
        {float(t): float(table[i].mean()) for i, t in enumerate(iou_thresholds)},
        {int(k): float(table[:, i].mean()) for i, k in enumerate(classes)},
    )


@dataclass
class EvalGroups:
    edges: np.ndarray  # unique quantile boundaries; group g holds values in (edges[g-1], edges[g]]
    values: list  # per frame, per GT box: instant event information

    def group_of(self, v) -> int:
        return int(np.searchsorted(self.edges, v, side="left"))

    @property
    def n_groups(self):
        return len(self.edges) + 1


def instant_information(frames, ground_truth) -> list:
    return [[box_event_density(f, b) for b in boxes] for f, boxes in zip(frames, ground_truth)]


def make_groups(frames, ground_truth, n_groups=5) -> EvalGroups:
    vals = instant_information(frames, ground_truth)
    flat = np.array([v for fr in vals for v in fr], np.float64)
    if len(flat) == 0:
        return EvalGroups(np.zeros(0), vals)
    qs = np.quantile(flat, np.arange(1, n_groups) / n_groups)
    return EvalGroups(np.unique(qs), vals)


@dataclass
class GroupwiseResult:
    group_map: list  # per effective group, lowest information first
    group_sizes: list
    edges: list
    overall: MapResult

    @property
    def n_groups(self):
        return len(self.group_map)

    def to_json(self):
        return {"group_mAP": self.group_map, "group_sizes": self.group_sizes, "group_edges": self.edges,
                "overall_mAP": self.overall.map}


def groupwise_map(detections, ground_truth, frames, n_groups=5, groups: EvalGroups | None = None) -> GroupwiseResult:
    """mAP within groups of ground-truth boxes ranked by instant event information.

    Predictions follow the group of their best-overlapping ground-truth box in
    the same frame; predictions overlapping none are placed by the event
    density under the predicted box.  Tied quantiles collapse into a single
    group, and empty groups are dropped from the report.
    """
    groups = groups or make_groups(frames, ground_truth, n_groups)
    G = groups.n_groups
    gt_by_group = [[[] for _ in ground_truth] for _ in range(G)]
    det_by_group = [[[] for _ in ground_truth] for _ in range(G)]
    for f, boxes in enumerate(ground_truth):
        gidx = [groups.group_of(v) for v in groups.values[f]]
        for b, g in zip(boxes, gidx):
            gt_by_group[g][f].append(b)
        gt_xyxy = np.array([_xyxy(b) for b in boxes]).reshape(-1, 4)
        for d in detections[f]:
            if len(boxes):
                ious = iou_matrix([_xyxy(d.bbox)], gt_xyxy)[0]
                j = int(np.argmax(ious))
                if ious[j] > 0:
                    det_by_group[gidx[j]][f].append(d)
                    continue
            v = box_event_density(frames[f], Box(*d.bbox))
            det_by_group[groups.group_of(v)][f].append(d)
    maps, sizes = [], []
    for g in range(G):
        n = sum(len(fr) for fr in gt_by_group[g])
        if n == 0:
            continue
        maps.append(coco_map(det_by_group[g], gt_by_group[g]).map)
        sizes.append(n)
    return GroupwiseResult(maps, sizes, [float(e) for e in groups.edges], coco_map(detections, ground_truth))

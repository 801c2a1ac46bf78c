from .boxes import AnchorSet, anchors_for, decode, encode, iou_matrix, make_anchors, match_anchors
from .head import Detection, RawPredictions, decode_nms, greedy_nms, head_forward, head_layers, nms
from .metrics import EvalGroups, MapResult, coco_map, groupwise_map, make_groups

__all__ = [
    "AnchorSet", "Detection", "EvalGroups", "MapResult", "RawPredictions", "anchors_for", "coco_map",
    "decode", "decode_nms", "encode", "greedy_nms", "groupwise_map", "head_forward", "head_layers", "iou_matrix",
    "make_anchors", "make_groups", "match_anchors", "nms",
]

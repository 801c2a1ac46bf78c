"""scikit-learn style wrappers: an event binner and a two-stage detector.

``EventBinner`` turns event streams into fixed-length frame stacks.
``EventDetector`` trains the recurrent detector on such stacks and
predicts per-frame detections; ``score`` is COCO mAP.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .datasets import ToyDataset, all_frame_tensors
from .detect import coco_map, groupwise_map
from .events import bin_events
from .losses import LossCfg
from .netspec import NetworkSpec, preset
from .network import build_network
from .train import TrainCfg, mean_flagged_density, predict, train_two_stage
from .validation import check_frames, check_ground_truth, check_positive_int, check_streams


class EventBinner(TransformerMixin, BaseEstimator):
    """Histogram each stream into ``n_frames`` frames of ``2 * micro_bins`` channels.

    ``fit`` learns the sensor size (and, when ``n_frames`` is None, the
    longest stream's frame count) so that ``transform`` yields one
    rectangular [S, T, C, H, W] array.
    """

    def __init__(self, frame_ms: float = 50.0, micro_bins: int = 5, n_frames: int | None = None):
        self.frame_ms = frame_ms
        self.micro_bins = micro_bins
        self.n_frames = n_frames

    def fit(self, X, y=None):
        streams = check_streams(X)
        if not streams:
            raise ValueError("need at least one stream")
        if self.frame_ms <= 0:
            raise ValueError("frame_ms must be positive")
        check_positive_int(self.micro_bins, "micro_bins")
        self.sensor_size_ = (streams[0].height, streams[0].width)
        if self.n_frames is None:
            us = self.frame_ms * 1000.0
            self.n_frames_ = max(int(s.t[-1] // us) + 1 if len(s) else 1 for s in streams)
        else:
            self.n_frames_ = check_positive_int(self.n_frames, "n_frames")
        return self

    def transform(self, X):
        check_is_fitted(self, "n_frames_")
        streams = check_streams(X)
        out = np.zeros((len(streams), self.n_frames_, 2 * self.micro_bins, *self.sensor_size_), np.float32)
        for i, s in enumerate(streams):
            if (s.height, s.width) != self.sensor_size_:
                raise ValueError(f"stream {i} is {s.width}x{s.height}, fitted on "
                                 f"{self.sensor_size_[1]}x{self.sensor_size_[0]}")
            out[i] = np.stack([f.values for f in bin_events(s, self.frame_ms, self.micro_bins, self.n_frames_)])
        return out


class EventDetector(BaseEstimator):
    """Recurrent event-based detector trained in two stages.

    ``X`` is a [S, T, C, H, W] frame stack and ``y[s][t]`` a list of
    :class:`evdet.events.Box`.  ``validation`` is an optional ``(X, y)``
    pair used for per-epoch model selection; without it a held-out
    ``validation_fraction`` of the sequences is used.
    """

    def __init__(self, network="toy-64", stage1_epochs: int = 20, stage2_epochs: int = 20,
                 max_lr1: float = 3e-3, max_lr2: float = 1e-3, batch_size: int = 8, beta_sparse: float = 3e-5,
                 ablate_recurrent: bool = False, validation_fraction: float = 0.2, score_thresh: float = 0.05,
                 nms_iou: float = 0.45, top_k: int = 200, random_state: int = 0, out_dir=None):
        self.network = network
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.max_lr1 = max_lr1
        self.max_lr2 = max_lr2
        self.batch_size = batch_size
        self.beta_sparse = beta_sparse
        self.ablate_recurrent = ablate_recurrent
        self.validation_fraction = validation_fraction
        self.score_thresh = score_thresh
        self.nms_iou = nms_iou
        self.top_k = top_k
        self.random_state = random_state
        self.out_dir = out_dir

    def _spec(self) -> NetworkSpec:
        if isinstance(self.network, NetworkSpec):
            return self.network
        if isinstance(self.network, dict):
            return NetworkSpec.from_dict(self.network)
        return preset(self.network)

    def _dataset(self, X, y):
        X = check_frames(X, self.spec_)
        gt = check_ground_truth(y, X.shape[0], X.shape[1], self.spec_.num_classes)
        return ToyDataset(X, gt, [None] * len(X), np.full(len(X), X.shape[1], np.int64))

    def fit(self, X, y, validation=None):
        self.spec_ = self._spec()
        data = self._dataset(X, y)
        if validation is not None:
            train, val = data, self._dataset(*validation)
        else:
            n_val = int(round(self.validation_fraction * len(data)))
            if not 0 < n_val < len(data):
                raise ValueError("validation_fraction leaves an empty train or validation split")
            perm = np.random.default_rng(self.random_state).permutation(len(data))
            train, val = data.subset(perm[n_val:]), data.subset(perm[:n_val])
        cfg = TrainCfg(stage1_epochs=self.stage1_epochs, stage2_epochs=self.stage2_epochs, max_lr1=self.max_lr1,
                       max_lr2=self.max_lr2, batch_size=self.batch_size, seq_len=X.shape[1] if hasattr(X, "shape")
                       else len(y[0]), ablate_recurrent=self.ablate_recurrent, score_thresh=self.score_thresh,
                       nms_iou=self.nms_iou, top_k=self.top_k, seed=self.random_state)
        stages = (1, 2) if self.stage2_epochs > 0 else (1,)
        self.net_ = build_network(self.spec_, self.random_state)
        res = train_two_stage(self.net_, train, val, cfg, LossCfg(beta_sparse=self.beta_sparse), self.out_dir,
                              stages)
        self.history_ = res.rows
        self.best_val_map_ = (res.stage2 or res.stage1).best_map
        return self

    def _predict(self, X):
        check_is_fitted(self, "net_")
        X = check_frames(X, self.spec_)
        ds = ToyDataset(X, [[[] for _ in range(X.shape[1])] for _ in range(len(X))], [None] * len(X),
                        np.full(len(X), X.shape[1], np.int64))
        dets, dens = predict(self.net_, ds, ablate=self.ablate_recurrent, score_thresh=self.score_thresh,
                             nms_iou=self.nms_iou, top_k=self.top_k)
        T = X.shape[1]
        return [dets[s * T:(s + 1) * T] for s in range(len(X))], dens

    def predict(self, X):
        """Per sequence, per step, a list of :class:`evdet.detect.Detection`."""
        return self._predict(X)[0]

    def densities(self, X) -> dict:
        """Mean activation density of every traced map over ``X``."""
        return self._predict(X)[1]

    def score(self, X, y) -> float:
        """COCO mAP (IoU 0.50:0.95) of the predictions on ``(X, y)``."""
        preds = self.predict(X)
        gt = check_ground_truth(y, len(preds), len(preds[0]))
        return coco_map([f for seq in preds for f in seq], [f for seq in gt for f in seq]).map

    def groupwise_score(self, X, y, n_groups: int = 5):
        X = check_frames(X, getattr(self, "spec_", None))
        preds = self.predict(X)
        gt = check_ground_truth(y, len(preds), len(preds[0]))
        ds = ToyDataset(X, gt, [None] * len(X), np.full(len(X), X.shape[1], np.int64))
        return groupwise_map([f for seq in preds for f in seq], ds.flat_gt(), all_frame_tensors(ds), n_groups)

    def mean_flagged_density(self, X) -> float:
        check_is_fitted(self, "net_")
        return mean_flagged_density(self.net_, self.densities(X))


__all__ = ["EventBinner", "EventDetector", "NotFittedError"]

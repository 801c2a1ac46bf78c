"""Two-stage training: detection first, then detection plus activation sparsity."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as F
from .datasets import ToyDataset
from .detect import anchors_for, coco_map, decode_nms
from .detect.head import RawPredictions
from .losses import LossCfg, build_targets, detection_loss, sparsity_loss
from .model import forward_train
from .network import Network, load_weights, read_weights, save_weights
from .optim import Adam, OneCycle, clip_grad_norm

log = logging.getLogger(__name__)


@dataclass
class TrainCfg:
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    max_lr1: float = 3e-3
    max_lr2: float = 1e-3
    batch_size: int = 8
    seq_len: int = 8
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    ablate_recurrent: bool = False
    score_thresh: float = 0.05
    nms_iou: float = 0.45
    top_k: int = 200
    seed: int = 0

    def validate(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be positive")
        if self.max_lr1 <= 0 or self.max_lr2 <= 0:
            raise ValueError("learning rates must be positive")
        return self


# full-resolution schedule; kept for reference, not run at desk scale
PAPER_PROFILE = {"max_lr1": 2.5e-4, "max_lr2": 1e-4, "stage1_epochs": 35, "stage2_epochs": 35}


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class EvalResult:
    map: float
    densities: dict
    detections: list  # per frame (sequence-major) list of Detection


def _frames_gt(ds: ToyDataset, idx, T):
    """Ground truth in the step-major row order used by the training forward."""
    return [ds.gt[n][t] for t in range(T) for n in idx]


def predict(net: Network, ds: ToyDataset, anchors=None, ablate=False, batch=16, score_thresh=0.05,
            nms_iou=0.45, top_k=200):
    """Detections per frame in sequence-major order, plus mean densities of every traced map."""
    anchors = anchors or anchors_for(net.spec)
    S, T = ds.frames.shape[:2]
    dets = [None] * (S * T)
    dens_sum, n = {}, 0
    for b0 in range(0, S, batch):
        idx = list(range(b0, min(S, b0 + batch)))
        out = forward_train(net, ds.frames[idx], training=False, ablate_recurrent=ablate)
        for k, v in out.densities().items():
            dens_sum[k] = dens_sum.get(k, 0.0) + v * len(idx)
        n += len(idx)
        cls, reg = out.cls_logits.data, out.box_deltas.data
        for t in range(T):
            for j, s in enumerate(idx):
                r = t * len(idx) + j
                dets[s * T + t] = decode_nms(RawPredictions(cls[r], reg[r]), anchors, score_thresh, nms_iou, top_k)
    return dets, {k: v / n for k, v in dens_sum.items()}


def evaluate(net: Network, ds: ToyDataset, ablate=False, **kw) -> EvalResult:
    dets, dens = predict(net, ds, ablate=ablate, **kw)
    return EvalResult(coco_map(dets, ds.flat_gt()).map, dens, dets)


def mean_flagged_density(net: Network, densities: dict) -> float:
    keys = [k for l in net.layers for k in l.flagged_keys]
    return float(np.mean([densities[k] for k in keys]))


@dataclass
class StageResult:
    best_state: dict
    best_map: float
    best_epoch: int
    rows: list = field(default_factory=list)


def _save_checkpoint(net, opt, path: Path, meta: dict):
    save_weights(net, path)
    side = {k: v for k, v in opt.state_dict().items()}
    for k, v in meta.items():
        side[f"__meta.{k}"] = np.asarray(v)
    np.savez(path.with_suffix(".opt.npz"), **side)


def load_checkpoint(net: Network, path, opt: Adam | None = None) -> dict:
    """Restore weights (and optimizer state when given); returns the stored metadata."""
    path = Path(path)
    load_weights(net, path)
    meta = {}
    side = path.with_suffix(".opt.npz")
    if side.exists():
        with np.load(side) as z:
            state = {k: z[k] for k in z.files}
        meta = {k[len("__meta."):]: state.pop(k).item() for k in list(state) if k.startswith("__meta.")}
        if opt is not None:
            opt.load_state_dict(state)
    return meta


def train_stage(net: Network, train: ToyDataset, val: ToyDataset, cfg: TrainCfg, loss_cfg: LossCfg, stage: int,
                beta_sparse: float, epochs: int, max_lr: float, out_dir: Path | None = None,
                resume: bool = False) -> StageResult:
    """Run one stage with per-epoch validation and keep the best state on validation mAP."""
    anchors = anchors_for(net.spec)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    S = len(train)
    T = min(cfg.seq_len, train.frames.shape[1])
    steps_per_epoch = math.ceil(S / cfg.batch_size)
    opt = Adam(net.params, max_lr, cfg.betas, cfg.adam_eps)
    sched = OneCycle(max_lr, max(1, epochs * steps_per_epoch))
    best = StageResult(net.state_dict(), -1.0, -1)
    start = 0
    last = out_dir / f"stage{stage}_last.seedw" if out_dir else None
    if resume and last is not None and last.exists():
        meta = load_checkpoint(net, last, opt)
        start = int(meta["epoch"]) + 1
        best.best_map = float(meta["best_map"])
        best.best_epoch = int(meta["best_epoch"])
        best_path = out_dir / f"stage{stage}_best.seedw"
        if best_path.exists():
            best.best_state = read_weights(best_path)
        if out_dir and (out_dir / "metrics.csv").exists():
            best.rows = [r for r in _read_metrics(out_dir / "metrics.csv") if int(r["stage"]) == stage
                         and int(r["epoch"]) < start]
    for epoch in range(start, epochs):
        rng = np.random.default_rng([cfg.seed, stage, epoch])
        order = rng.permutation(S)
        sums = {"loss": 0.0, "cls": 0.0, "reg": 0.0, "sparse": 0.0}
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size].tolist()
            x = train.frames[idx][:, :T]
            targets = build_targets(anchors, _frames_gt(train, idx, T), net.spec.num_classes, loss_cfg)
            tape = F.Tape()
            with tape:
                out = forward_train(net, x, training=True, ablate_recurrent=cfg.ablate_recurrent)
                loss, comp = detection_loss(out.cls_logits, out.box_deltas, targets, loss_cfg)
                ls = 0.0
                if beta_sparse > 0:
                    sp = sparsity_loss(out.flagged, beta_sparse, len(idx), T)
                    ls = float(sp.data)
                    loss = loss + sp
            total = float(loss.data)
            if not math.isfinite(total):
                net.load_state_dict(best.best_state)
                raise TrainingDiverged(f"stage {stage} epoch {epoch} step {b}: loss is {total}",
                                       out_dir / f"stage{stage}_best.seedw" if out_dir else None)
            opt.lr = sched.lr(epoch * steps_per_epoch + b)
            tape.backward(loss)
            clip_grad_norm(net.params, cfg.clip_norm)
            opt.step()
            sums["loss"] += total
            sums["cls"] += comp["cls"]
            sums["reg"] += comp["reg"]
            sums["sparse"] += ls
        ev = evaluate(net, val, ablate=cfg.ablate_recurrent, score_thresh=cfg.score_thresh, nms_iou=cfg.nms_iou,
                      top_k=cfg.top_k)
        row = {"epoch": epoch, "stage": stage, **{k: v / steps_per_epoch for k, v in sums.items()},
               "val_map": ev.map, "lr": opt.lr, "mean_flagged_density": mean_flagged_density(net, ev.densities)}
        row.update({f"density.{k}": v for k, v in sorted(ev.densities.items())})
        best.rows.append(row)
        log.info("stage %d epoch %d loss %.4f val mAP %.4f", stage, epoch, row["loss"], ev.map)
        if ev.map > best.best_map:
            best.best_map, best.best_epoch, best.best_state = ev.map, epoch, net.state_dict()
            if out_dir:
                save_weights(net, out_dir / f"stage{stage}_best.seedw")
        if out_dir:
            _save_checkpoint(net, opt, last, {"epoch": epoch, "best_map": best.best_map,
                                              "best_epoch": best.best_epoch})
            write_metrics(out_dir / "metrics.csv", _merge_rows(out_dir / "metrics.csv", stage, best.rows))
    return best


def _num(v: str):
    if v == "":
        return None
    f = float(v)
    return int(f) if f.is_integer() and "." not in v and "e" not in v else f


def _read_metrics(path):
    with open(path, newline="") as fh:
        return [{k: _num(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def _merge_rows(path, stage, rows):
    prev = [r for r in _read_metrics(path) if int(r["stage"]) != stage] if Path(path).exists() else []
    return prev + rows


def write_metrics(path, rows):
    cols = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


@dataclass
class TwoStageResult:
    stage1: StageResult
    stage2: StageResult | None

    @property
    def rows(self):
        return self.stage1.rows + (self.stage2.rows if self.stage2 else [])


def train_two_stage(net: Network, train: ToyDataset, val: ToyDataset, cfg: TrainCfg = TrainCfg(),
                    loss_cfg: LossCfg = LossCfg(), out_dir=None, stages=(1, 2), resume=False) -> TwoStageResult:
    """Stage 1 optimizes detection only; stage 2 restarts from the best stage-1 state and adds sparsity.

    Each stage keeps its best-on-validation weights, which are loaded into
    ``net`` when the stage ends.
    """
    cfg.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    s1 = s2 = None
    if 1 in stages:
        s1 = train_stage(net, train, val, cfg, loss_cfg, 1, 0.0, cfg.stage1_epochs, cfg.max_lr1, out_dir, resume)
        net.load_state_dict(s1.best_state)
    if 2 in stages:
        if s1 is None:
            if out_dir is None or not (out_dir / "stage1_best.seedw").exists():
                raise FileNotFoundError("stage 2 needs the best stage-1 checkpoint")
            load_weights(net, out_dir / "stage1_best.seedw")
            s1 = StageResult(net.state_dict(), float("nan"), -1)
        s2 = train_stage(net, train, val, cfg, loss_cfg, 2, loss_cfg.beta_sparse, cfg.stage2_epochs, cfg.max_lr2,
                         out_dir, resume)
        net.load_state_dict(s2.best_state)
    return TwoStageResult(s1, s2)


def cfg_dict(cfg: TrainCfg) -> dict:
    return asdict(cfg)

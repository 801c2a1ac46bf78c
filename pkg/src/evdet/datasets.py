"""Synthetic moving-shape detection sets built on the event simulator."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .events import (Box, EventFrameTensor, ObjectSpec, SceneSpec, bin_events, filter_boxes, read_events, read_ground_truth,
                     synth_scene, write_events, write_ground_truth)


@dataclass
class ToyTaskCfg:
    n_sequences: int = 64
    seq_len: int = 8
    size: int = 64
    micro_bins: int = 2
    frame_ms: float = 50.0
    min_side: int = 12
    max_side: int = 28
    min_speed: float = 1.5  # px per frame
    max_speed: float = 4.0
    stop_fraction: float = 0.5  # share of sequences whose object halts for the last third
    noise_rate: float = 0.0
    shapes: tuple = ("rectangle",)
    seed: int = 0

    def validate(self):
        if self.n_sequences < 1 or self.seq_len < 1:
            raise ValueError("n_sequences and seq_len must be positive")
        if not 0 < self.min_side <= self.max_side < self.size:
            raise ValueError("need 0 < min_side <= max_side < size")
        if not 0 <= self.min_speed <= self.max_speed:
            raise ValueError("need 0 <= min_speed <= max_speed")
        if not 0.0 <= self.stop_fraction <= 1.0:
            raise ValueError("stop_fraction must lie in [0, 1]")
        return self


@dataclass
class ToyDataset:
    frames: np.ndarray  # [S, T, C, H, W] float32 event histograms
    gt: list  # [S][T] list of Box
    scenes: list  # SceneSpec per sequence
    moving_frames: np.ndarray  # [S] frames before the object halts

    def __len__(self):
        return len(self.frames)

    def subset(self, idx):
        idx = list(idx)
        return ToyDataset(self.frames[idx], [self.gt[i] for i in idx], [self.scenes[i] for i in idx],
                          self.moving_frames[idx])

    def flat_gt(self):
        return [boxes for seq in self.gt for boxes in seq]


def stop_frame(seq_len: int) -> int:
    """First frame of the stationary last third."""
    return seq_len - seq_len // 3


def random_scene(cfg: ToyTaskCfg, rng: np.random.Generator, halt: bool, seed: int) -> SceneSpec:
    T = cfg.seq_len
    moving = stop_frame(T) if halt else T
    w, h = (int(v) for v in rng.integers(cfg.min_side, cfg.max_side + 1, 2))
    shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
    if shape == "disk":
        h = w
    speed = rng.uniform(cfg.min_speed, cfg.max_speed)
    ang = rng.uniform(0, 2 * np.pi)
    vx, vy = speed * np.cos(ang), speed * np.sin(ang)
    # shrink the velocity until the whole path fits on the sensor
    room_x, room_y = cfg.size - w, cfg.size - h
    dx, dy = abs(vx) * moving, abs(vy) * moving
    k = min(1.0, room_x / dx if dx > 0 else 1.0, room_y / dy if dy > 0 else 1.0)
    vx, vy = vx * k, vy * k
    x0 = rng.uniform(0, room_x - abs(vx) * moving) + (abs(vx) * moving if vx < 0 else 0)
    y0 = rng.uniform(0, room_y - abs(vy) * moving) + (abs(vy) * moving if vy < 0 else 0)
    bright = rng.random() < 0.5
    intensity = rng.uniform(0.7, 1.0) if bright else rng.uniform(0.05, 0.15)
    vel = [(0, float(vx), float(vy))]
    if halt:
        vel.append((moving, 0.0, 0.0))
    ob = ObjectSpec(shape, (w, h), (float(x0), float(y0)), vel, 0, float(intensity))
    return SceneSpec([ob], cfg.size, cfg.size, T, cfg.frame_ms, noise_rate=cfg.noise_rate, margin=0, seed=seed)


def synth_sequences(cfg: ToyTaskCfg):
    """Yield ``(scene, stream, gt, moving_frames)`` for every sequence of the task."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_halt = int(round(cfg.stop_fraction * cfg.n_sequences))
    halts = np.zeros(cfg.n_sequences, bool)
    halts[rng.permutation(cfg.n_sequences)[:n_halt]] = True
    for i in range(cfg.n_sequences):
        scene = random_scene(cfg, rng, bool(halts[i]), seed=cfg.seed * 100003 + i)
        stream, gt = synth_scene(scene)
        yield scene, stream, gt, stop_frame(cfg.seq_len) if halts[i] else cfg.seq_len


def make_toy_dataset(cfg: ToyTaskCfg) -> ToyDataset:
    """Single-class sequences of one moving shape; a share of them stop for the last third."""
    frames = np.zeros((cfg.n_sequences, cfg.seq_len, 2 * cfg.micro_bins, cfg.size, cfg.size), np.float32)
    gts, scenes, moving = [], [], np.zeros(cfg.n_sequences, np.int64)
    for i, (scene, stream, gt, mv) in enumerate(synth_sequences(cfg)):
        fr = bin_events(stream, cfg.frame_ms, cfg.micro_bins, n_frames=cfg.seq_len)
        frames[i] = np.stack([f.values for f in fr])
        gts.append(gt)
        scenes.append(scene)
        moving[i] = mv
    return ToyDataset(frames, gts, scenes, moving)


def write_split(cfg: ToyTaskCfg, out_dir, binary: bool = True) -> list[Path]:
    """Write each sequence as an event file plus a ground-truth JSON, and an index.

    Files are ``seq_0000.evt`` (or ``.csv``) and ``seq_0000.json``;
    ``index.json`` records the task parameters and per-sequence halt frames.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, moving = [], []
    for i, (scene, stream, gt, mv) in enumerate(synth_sequences(cfg)):
        ev = out / f"seq_{i:04d}.{'evt' if binary else 'csv'}"
        write_events(stream, ev)
        write_ground_truth(gt, out / f"seq_{i:04d}.json")
        written.append(ev)
        moving.append(int(mv))
    index = {"task": {**asdict(cfg), "shapes": list(cfg.shapes)}, "moving_frames": moving,
             "sequences": [p.name for p in written]}
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return written


def load_event_dir(path, frame_ms: float = 50.0, micro_bins: int = 5, seq_len: int | None = None,
                   min_diag: float = 0.0, min_side: float = 0.0) -> ToyDataset:
    """Bin every ``*.evt``/``*.csv`` file of a directory that has a sibling ground-truth JSON.

    Sequences are truncated (or zero-padded) to ``seq_len`` frames, which
    defaults to the length of the shortest ground truth.  Boxes below the
    size thresholds are dropped.
    """
    d = Path(path)
    files = sorted(p for p in d.iterdir() if p.suffix in (".evt", ".csv") and p.with_suffix(".json").exists())
    if not files:
        raise FileNotFoundError(f"{d}: no event files with ground truth")
    streams = [read_events(p) for p in files]
    gts = [read_ground_truth(p.with_suffix(".json")) for p in files]
    T = seq_len or min(len(g) for g in gts)
    sizes = {(s.height, s.width) for s in streams}
    if len(sizes) != 1:
        raise ValueError(f"{d}: sensor sizes differ: {sorted(sizes)}")
    H, W = sizes.pop()
    frames = np.zeros((len(files), T, 2 * micro_bins, H, W), np.float32)
    gt_out = []
    for i, (s, g) in enumerate(zip(streams, gts)):
        fr = bin_events(s, frame_ms, micro_bins, n_frames=T)
        frames[i] = np.stack([f.values for f in fr])
        g = (list(g) + [[] for _ in range(T)])[:T]
        gt_out.append(filter_boxes(g, min_diag, min_side))
    moving = np.full(len(files), T, np.int64)
    idx = d / "index.json"
    if idx.exists():
        doc = json.loads(idx.read_text())
        names = doc.get("sequences", [])
        for i, p in enumerate(files):
            if p.name in names:
                moving[i] = min(T, doc["moving_frames"][names.index(p.name)])
    return ToyDataset(frames, gt_out, [None] * len(files), moving)


def stop_motion_cfg(**kw) -> ToyTaskCfg:
    """Every sequence halts for its last third, no background noise."""
    base = ToyTaskCfg(stop_fraction=1.0, noise_rate=0.0)
    return replace(base, **kw)


def frame_tensors(ds: ToyDataset, seq: int):
    """Per-frame tensors of one sequence, for event-density statistics."""
    scene = ds.scenes[seq]
    ms = scene.frame_ms if scene is not None else 50.0
    return [EventFrameTensor(ds.frames[seq, t], t, ms) for t in range(ds.frames.shape[1])]


def all_frame_tensors(ds: ToyDataset):
    return [f for s in range(len(ds)) for f in frame_tensors(ds, s)]


__all__ = ["Box", "ToyDataset", "ToyTaskCfg", "all_frame_tensors", "load_event_dir", "make_toy_dataset",
           "stop_motion_cfg", "synth_sequences", "write_split"]

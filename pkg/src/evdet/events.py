"""Event streams, frame binning, synthetic scenes and event-file I/O.

Coordinates follow the sensor convention: origin top-left, ``x`` is the
column, ``y`` the row.  Timestamps are integer microseconds and boxes are
``(x_min, y_min, w, h)`` in pixels.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

EVENT_DTYPE = np.dtype([("t", np.int64), ("x", np.int32), ("y", np.int32), ("p", np.int8)])

_FILE_MAGIC = b"EVT0"
_HEADER = struct.Struct("<4sHHQ")
_RECORD_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
CSV_HEADER = ["t_us", "x", "y", "p"]


class EventFormatError(ValueError):
    """Malformed or inconsistent event data."""


@dataclass
class EventStream:
    events: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)

    def __len__(self):
        return len(self.events)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and np.array_equal(
            self.events, other.events
        )

    @property
    def t(self):
        return self.events["t"]

    @property
    def x(self):
        return self.events["x"]

    @property
    def y(self):
        return self.events["y"]

    @property
    def p(self):
        return self.events["p"]


def make_stream(t, x, y, p, width: int, height: int) -> EventStream:
    """Build a stream from column arrays; polarity may be given as +-1 or 0/1."""
    t = np.asarray(t, dtype=np.int64)
    ev = np.empty(len(t), dtype=EVENT_DTYPE)
    ev["t"] = t
    ev["x"] = np.asarray(x)
    ev["y"] = np.asarray(y)
    p = np.asarray(p)
    ev["p"] = np.where(p > 0, 1, -1)
    return EventStream(ev, width, height)


def check_stream(stream: EventStream) -> EventStream:
    ev = stream.events
    if len(ev) == 0:
        return stream
    if np.any(ev["t"] < 0):
        raise EventFormatError("negative timestamp in stream")
    bad = np.flatnonzero(np.diff(ev["t"]) < 0)
    if len(bad):
        raise EventFormatError(f"timestamps not sorted: record {bad[0] + 1} precedes record {bad[0]}")
    if np.any((ev["x"] < 0) | (ev["x"] >= stream.width) | (ev["y"] < 0) | (ev["y"] >= stream.height)):
        raise EventFormatError(f"event outside sensor {stream.width}x{stream.height}")
    if np.any((ev["p"] != 1) & (ev["p"] != -1)):
        raise EventFormatError("polarity must be +1 or -1")
    return stream


@dataclass
class EventFrameTensor:
    values: np.ndarray  # [2 * micro_bins, H, W], negative-polarity bins first
    frame_index: int
    duration_ms: float

    @property
    def micro_bins(self) -> int:
        return self.values.shape[0] // 2


def bin_events(stream: EventStream, frame_ms: float = 50.0, micro_bins: int = 5,
               n_frames: int | None = None) -> list[EventFrameTensor]:
    """Histogram events into consecutive frames with time folded into channels.

    Frame ``k`` covers the half-open interval ``[k * frame_ms, (k+1) * frame_ms)``.
    Channel ``pol * micro_bins + b`` holds the count of events of polarity
    ``pol`` (0 negative, 1 positive) falling into micro-bin ``b``.  Without
    ``n_frames`` the sequence ends at the last frame holding an event.
    """
    if frame_ms <= 0:
        raise ValueError("frame_ms must be positive")
    if micro_bins < 1:
        raise ValueError("micro_bins must be >= 1")
    check_stream(stream)
    ev = stream.events
    frame_us = frame_ms * 1000.0
    if n_frames is None:
        n_frames = 0 if len(ev) == 0 else int(ev["t"][-1] // frame_us) + 1
    C, H, W = 2 * micro_bins, stream.height, stream.width
    grid = np.zeros((n_frames, C, H, W), dtype=np.float32)
    if len(ev) and n_frames:
        t = ev["t"].astype(np.float64)
        k = np.floor(t / frame_us).astype(np.int64)
        keep = k < n_frames
        k, t = k[keep], t[keep]
        b = np.minimum(((t - k * frame_us) * micro_bins // frame_us).astype(np.int64), micro_bins - 1)
        c = np.where(ev["p"][keep] > 0, 1, 0) * micro_bins + b
        np.add.at(grid, (k, c, ev["y"][keep], ev["x"][keep]), 1.0)
    return [EventFrameTensor(grid[i], i, frame_ms) for i in range(n_frames)]


# ---------------------------------------------------------------- ground truth


@dataclass
class Box:
    x: float
    y: float
    w: float
    h: float
    cls: int = 0

    def as_list(self):
        return [self.x, self.y, self.w, self.h]


GroundTruth = list  # per frame: list[Box]


def filter_boxes(gt: Sequence[Sequence[Box]], min_diag: float, min_side: float) -> list[list[Box]]:
    """Keep boxes whose diagonal reaches ``min_diag`` and whose shorter side reaches ``min_side``."""
    if min_diag < 0 or min_side < 0:
        raise ValueError("thresholds must be non-negative")
    return [
        [b for b in frame if math.hypot(b.w, b.h) >= min_diag and min(b.w, b.h) >= min_side]
        for frame in gt
    ]


def write_ground_truth(gt, path) -> None:
    doc = {"frames": [[{"bbox": b.as_list(), "class": int(b.cls)} for b in frame] for frame in gt]}
    Path(path).write_text(json.dumps(doc))


def read_ground_truth(path) -> list[list[Box]]:
    doc = json.loads(Path(path).read_text())
    return [[Box(*map(float, d["bbox"]), cls=int(d["class"])) for d in frame] for frame in doc["frames"]]


# ---------------------------------------------------------------- file I/O


def write_events(stream: EventStream, path) -> None:
    """Write ``.csv`` as text, anything else in the 16-byte-header binary format."""
    check_stream(stream)
    path = Path(path)
    ev = stream.events
    if path.suffix.lower() == ".csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        pol = np.where(ev["p"] > 0, 1, 0)
        w.writerows(zip(ev["t"].tolist(), ev["x"].tolist(), ev["y"].tolist(), pol.tolist()))
        path.write_text(buf.getvalue())
        return
    if len(ev) and ev["t"][-1] > 0xFFFFFFFF:
        raise EventFormatError("timestamp exceeds 32-bit microsecond range")
    rec = np.empty(len(ev), dtype=_RECORD_DTYPE)
    rec["t"], rec["x"], rec["y"] = ev["t"], ev["x"], ev["y"]
    rec["p"] = ev["p"] > 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_FILE_MAGIC, stream.width, stream.height, len(ev)))
        f.write(rec.tobytes())


def _check_monotone(t: np.ndarray):
    bad = np.flatnonzero(np.diff(t) < 0)
    if len(bad):
        raise EventFormatError(f"non-monotone timestamp at record {bad[0] + 1}")


def read_events(path, width: int | None = None, height: int | None = None) -> EventStream:
    """Read a binary or CSV event file.

    Empty files give an empty stream.  For CSV the sensor size is taken from
    the arguments or, failing that, from the largest coordinates seen.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) == 0:
        return EventStream(np.empty(0, EVENT_DTYPE), width or 0, height or 0)
    if path.suffix.lower() == ".csv" or not raw.startswith(_FILE_MAGIC):
        return _read_csv(raw.decode(), width, height)
    if len(raw) < _HEADER.size:
        raise EventFormatError(f"truncated header: {len(raw)} bytes at offset 0")
    _, w, h, count = _HEADER.unpack_from(raw)
    body = len(raw) - _HEADER.size
    n_full = body // _RECORD_DTYPE.itemsize
    if n_full < count or body % _RECORD_DTYPE.itemsize:
        offset = _HEADER.size + n_full * _RECORD_DTYPE.itemsize
        raise EventFormatError(f"truncated record at byte offset {offset}")
    rec = np.frombuffer(raw, dtype=_RECORD_DTYPE, count=count, offset=_HEADER.size)
    _check_monotone(rec["t"].astype(np.int64))
    stream = make_stream(rec["t"], rec["x"], rec["y"], rec["p"].astype(np.int8), w, h)
    return check_stream(stream)


def _read_csv(text: str, width, height) -> EventStream:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return EventStream(np.empty(0, EVENT_DTYPE), width or 0, height or 0)
    if [c.strip() for c in rows[0]] != CSV_HEADER:
        raise EventFormatError(f"CSV header must be {','.join(CSV_HEADER)}")
    body = [r for r in rows[1:] if r]
    arr = np.array(body, dtype=np.int64).reshape(-1, 4)
    _check_monotone(arr[:, 0])
    if width is None:
        width = int(arr[:, 1].max()) + 1 if len(arr) else 0
    if height is None:
        height = int(arr[:, 2].max()) + 1 if len(arr) else 0
    return check_stream(make_stream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height))


# ---------------------------------------------------------------- synthetic scenes


@dataclass
class ObjectSpec:
    shape: str  # "rectangle" | "disk"
    size: tuple  # (w, h) for rectangles, (diameter, diameter) for disks
    position: tuple  # top-left corner (x, y) at t = 0
    velocity: list  # [(start_frame, vx, vy)], px per frame, piecewise constant
    cls: int = 0
    intensity: float = 0.8


@dataclass
class SceneSpec:
    objects: list
    width: int = 64
    height: int = 64
    n_frames: int = 8
    frame_ms: float = 50.0
    contrast_threshold: float = 0.15
    background: float = 0.3
    substeps: int = 10
    noise_rate: float = 0.0  # background-activity events per pixel per second
    margin: int = 8
    seed: int = 0

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor size must be positive")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.contrast_threshold <= 0:
            raise ValueError("contrast_threshold must be positive")
        for i, ob in enumerate(self.objects):
            if ob.shape not in ("rectangle", "disk"):
                raise ValueError(f"objects[{i}].shape must be 'rectangle' or 'disk'")
            if min(ob.size) <= 0:
                raise ValueError(f"objects[{i}].size must be positive")
            if not ob.velocity or ob.velocity[0][0] != 0:
                raise ValueError(f"objects[{i}].velocity schedule must start at frame 0")
            for f in range(self.n_frames + 1):
                x, y = object_position(ob, f)
                if (x < -self.margin or y < -self.margin or x + ob.size[0] > self.width + self.margin
                        or y + ob.size[1] > self.height + self.margin):
                    raise ValueError(f"objects[{i}] leaves the sensor margin at frame {f}")
        return self


def object_position(ob: ObjectSpec, frame: float):
    """Top-left corner after ``frame`` frames of the piecewise-constant schedule."""
    x, y = ob.position
    sched = sorted(ob.velocity, key=lambda s: s[0])
    for i, (start, vx, vy) in enumerate(sched):
        end = sched[i + 1][0] if i + 1 < len(sched) else math.inf
        if frame <= start:
            break
        dt = min(frame, end) - start
        x += vx * dt
        y += vy * dt
    return x, y


def _axis_coverage(lo, hi, n):
    edges = np.arange(n + 1, dtype=np.float64)
    return np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, 1.0)


def render_intensity(spec: SceneSpec, frame: float) -> np.ndarray:
    """Anti-aliased linear intensity image at fractional time ``frame``."""
    img = np.full((spec.height, spec.width), spec.background, dtype=np.float64)
    for ob in spec.objects:
        x, y = object_position(ob, frame)
        w, h = ob.size
        if ob.shape == "rectangle":
            cov = np.outer(_axis_coverage(y, y + h, spec.height), _axis_coverage(x, x + w, spec.width))
        else:
            ss = 4
            off = (np.arange(ss) + 0.5) / ss
            ys = (np.arange(spec.height)[:, None] + off[None, :]).ravel()
            xs = (np.arange(spec.width)[:, None] + off[None, :]).ravel()
            r = w / 2.0
            inside = ((xs[None, :] - x - r) ** 2 + (ys[:, None] - y - r) ** 2) <= r * r
            cov = inside.reshape(spec.height, ss, spec.width, ss).mean(axis=(1, 3))
        img = img * (1.0 - cov) + ob.intensity * cov
    return img


def synth_scene(spec: SceneSpec) -> tuple[EventStream, list[list[Box]]]:
    """Render a scene and emit DVS events plus per-frame ground truth.

    Each pixel latches a reference log intensity; whenever the rendered log
    intensity moves ``k`` contrast thresholds away, ``k`` events of the
    matching polarity are emitted and the reference follows.  Boxes are the
    object extents at the end of each frame, clipped to the sensor.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    frame_us = int(round(spec.frame_ms * 1000))
    n_sub = spec.n_frames * spec.substeps
    ref = np.log(render_intensity(spec, 0.0))
    chunks = []
    thr = spec.contrast_threshold
    for k in range(1, n_sub + 1):
        frame = k / spec.substeps
        t_us = int(round(frame * frame_us)) - 1  # stay inside the current frame
        cur = np.log(render_intensity(spec, frame))
        diff = cur - ref
        n = np.floor(np.abs(diff) / thr).astype(np.int64)
        ys, xs = np.nonzero(n)
        if len(ys):
            counts = n[ys, xs]
            pol = np.sign(diff[ys, xs]).astype(np.int8)
            ref[ys, xs] += pol * counts * thr
            rep = np.repeat(np.arange(len(ys)), counts)
            chunks.append((np.full(len(rep), t_us, np.int64), xs[rep], ys[rep], pol[rep]))
    if spec.noise_rate > 0:
        total_us = spec.n_frames * frame_us
        n_noise = rng.poisson(spec.noise_rate * spec.width * spec.height * total_us * 1e-6)
        chunks.append((
            rng.integers(0, total_us, n_noise).astype(np.int64),
            rng.integers(0, spec.width, n_noise),
            rng.integers(0, spec.height, n_noise),
            rng.choice(np.array([-1, 1], np.int8), n_noise),
        ))
    if chunks:
        t, x, y, p = (np.concatenate(c) for c in zip(*chunks))
        order = np.lexsort((x, y, t))
        stream = make_stream(t[order], x[order], y[order], p[order], spec.width, spec.height)
    else:
        stream = EventStream(np.empty(0, EVENT_DTYPE), spec.width, spec.height)
    gt = []
    for f in range(1, spec.n_frames + 1):
        boxes = []
        for ob in spec.objects:
            x, y = object_position(ob, f)
            x0, y0 = max(x, 0.0), max(y, 0.0)
            x1, y1 = min(x + ob.size[0], spec.width), min(y + ob.size[1], spec.height)
            if x1 > x0 and y1 > y0:
                boxes.append(Box(x0, y0, x1 - x0, y1 - y0, ob.cls))
        gt.append(boxes)
    return stream, gt


def box_event_density(frame: EventFrameTensor, box: Box) -> float:
    """Events inside ``box`` per unit box area for one frame."""
    v = frame.values
    x0, y0 = int(math.floor(box.x)), int(math.floor(box.y))
    x1, y1 = int(math.ceil(box.x + box.w)), int(math.ceil(box.y + box.h))
    x0, y0 = max(x0, 0), max(y0, 0)
    area = max(box.w * box.h, 1e-9)
    return float(v[:, y0:y1, x0:x1].sum() / area)

"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numbers

import numpy as np

from .events import Box, EventStream
from .netspec import NetworkSpec


def check_frames(X, spec: NetworkSpec | None = None) -> np.ndarray:
    """Return ``X`` as a float32 [S, T, C, H, W] array of finite, non-negative counts."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5:
        raise ValueError(f"frames must be 5-D [sequences, steps, channels, height, width], got {X.ndim}-D")
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("frames hold no sequences or no steps")
    if spec is not None and tuple(X.shape[2:]) != tuple(spec.input):
        raise ValueError(f"frames are {tuple(X.shape[2:])} per step, network expects {tuple(spec.input)}")
    if not np.isfinite(X).all():
        raise ValueError("frames contain NaN or infinite values")
    if (X < 0).any():
        raise ValueError("frames contain negative event counts")
    return X


def check_ground_truth(y, n_sequences: int, n_steps: int, num_classes: int | None = None) -> list:
    """``y[s][t]`` is a list of :class:`Box`; returns it as nested lists."""
    if len(y) != n_sequences:
        raise ValueError(f"ground truth covers {len(y)} sequences, frames have {n_sequences}")
    out = []
    for s, seq in enumerate(y):
        if len(seq) != n_steps:
            raise ValueError(f"ground truth of sequence {s} has {len(seq)} steps, frames have {n_steps}")
        rows = []
        for t, boxes in enumerate(seq):
            for b in boxes:
                if not isinstance(b, Box):
                    raise TypeError(f"ground truth [{s}][{t}] holds {type(b).__name__}, expected Box")
                if b.w <= 0 or b.h <= 0:
                    raise ValueError(f"ground truth [{s}][{t}] has a box with non-positive size")
                if num_classes is not None and not 0 <= b.cls < num_classes:
                    raise ValueError(f"ground truth [{s}][{t}] has class {b.cls} outside [0, {num_classes})")
            rows.append(list(boxes))
        out.append(rows)
    return out


def check_streams(streams) -> list:
    streams = list(streams)
    for i, s in enumerate(streams):
        if not isinstance(s, EventStream):
            raise TypeError(f"item {i} is {type(s).__name__}, expected EventStream")
    sizes = {(s.height, s.width) for s in streams}
    if len(sizes) > 1:
        raise ValueError(f"streams come from different sensor sizes: {sorted(sizes)}")
    return streams


def check_densities(densities, keys=None) -> dict:
    """Densities must be numbers in [0, 1]; ``keys`` lists entries that must be present."""
    if not isinstance(densities, dict):
        raise TypeError("densities must be a dict of activation key -> density")
    for k, v in densities.items():
        if not isinstance(v, numbers.Real) or not 0.0 <= float(v) <= 1.0:
            raise ValueError(f"density of {k!r} must be a number in [0, 1], got {v!r}")
    for k in keys or ():
        if k not in densities:
            raise KeyError(f"no density for activation {k!r}")
    return {k: float(v) for k, v in densities.items()}


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_fraction(value, name: str, closed: bool = True) -> float:
    v = float(value)
    ok = 0.0 <= v <= 1.0 if closed else 0.0 < v < 1.0
    if not ok:
        raise ValueError(f"{name} must lie in {'[0, 1]' if closed else '(0, 1)'}, got {value!r}")
    return v

"""Event-based convolutional recurrent cells.

All variants share the same skeleton.  Gate pre-activations come from two
convolutions, one over the sparse layer input ``x`` and one over the sparse
previous output ``y_prev``; the dense state is touched only pointwise::

    h  = alpha * h_prev + (1 - alpha) * z - s_prev * v_th
    s  = H(h - v_th)              # strict: H(0) = 0
    y  = h * s

For the LSTM the same update drives the cell state ``c`` (input gate tied to
``1 - f``) and events are generated from ``h = o * tanh(c)``.  ``convlstm``
is the standard dense ConvLSTM, kept for cost modelling of non-event
baselines; its output is the full hidden state.
"""
from __future__ import annotations

import types
from dataclasses import dataclass

import numpy as np

from .sparse import ConvLayer, SparseMap, sparse_conv


class StateError(FloatingPointError):
    pass


def _np_sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def _np_spike(u):
    return (u > 0).astype(u.dtype)


NUMPY_OPS = types.SimpleNamespace(sigmoid=_np_sigmoid, tanh=np.tanh, spike=_np_spike)


def split_gates(g, n, channel_axis):
    c = g.shape[channel_axis] // n
    idx = [slice(None)] * channel_axis
    return [g[tuple(idx + [slice(i * c, (i + 1) * c)])] for i in range(n)]


def recurrent_update(variant, ops, gx, gy, h, c, s_prev, vth, channel_axis=0):
    """Pointwise part of one step.

    ``gx``/``gy`` are the stacked gate pre-activations from the input and
    recurrent convolutions.  ``ops`` supplies ``sigmoid``, ``tanh`` and
    ``spike`` so the same code runs on plain arrays and on tape variables.
    Returns ``(h, c, s, y)``.
    """
    ax = channel_axis
    if variant == "convlstm":
        i_, f_, o_, g_ = (a + b for a, b in zip(split_gates(gx, 4, ax), split_gates(gy, 4, ax)))
        c = ops.sigmoid(f_) * c + ops.sigmoid(i_) * ops.tanh(g_)
        h = ops.sigmoid(o_) * ops.tanh(c)
        return h, c, None, h
    if variant == "gru":
        xa, xr, xz = split_gates(gx, 3, ax)
        ya, yr, yz = split_gates(gy, 3, ax)
        alpha = ops.sigmoid(xa + ya)
        r = ops.sigmoid(xr + yr)
        z = ops.tanh(xz + r * yz)
    elif variant == "mgu":
        xa, xz = split_gates(gx, 2, ax)
        ya, yz = split_gates(gy, 2, ax)
        alpha = ops.sigmoid(xa + ya)
        z = ops.tanh(xz + alpha * yz)
    elif variant == "minimal":
        xa, xz = split_gates(gx, 2, ax)
        alpha = ops.sigmoid(xa + gy)
        z = ops.tanh(xz)
    elif variant == "lstm":
        xf, xo, xz = split_gates(gx, 3, ax)
        yf, yo, yz = split_gates(gy, 3, ax)
        f = ops.sigmoid(xf + yf)
        o = ops.sigmoid(xo + yo)
        z = ops.tanh(xz + yz)
        c = f * c + (1.0 - f) * z - s_prev * vth
        h = o * ops.tanh(c)
        s = ops.spike(h - vth)
        return h, c, s, h * s
    else:
        raise ValueError(f"unknown recurrent cell {variant!r}")
    h = alpha * h + (1.0 - alpha) * z - s_prev * vth
    s = ops.spike(h - vth)
    return h, c, s, h * s


@dataclass
class ConvRecCell:
    variant: str
    wx: ConvLayer  # convolutions on x, gates stacked along C_out, with bias
    uy: ConvLayer  # convolutions on y_prev, stride 1, no bias
    rho: np.ndarray  # raw per-neuron thresholds [C, H, W]
    name: str = "rnn"

    @property
    def v_th(self) -> np.ndarray:
        # float32 sigmoid saturates to exactly 0 or 1 for large |rho|; keep it strictly inside
        v = np.exp(-np.logaddexp(0.0, -self.rho.astype(np.float64)))
        f32 = np.finfo(np.float32)
        return np.clip(v, f32.tiny, 1.0 - f32.epsneg).astype(np.float32)

    @property
    def shape(self):
        return self.rho.shape

    @property
    def stateful_c(self):
        return self.variant in ("lstm", "convlstm")


@dataclass
class ConvRecState:
    h: np.ndarray
    s_prev: np.ndarray
    c: np.ndarray | None = None

    @classmethod
    def zeros(cls, cell: ConvRecCell) -> "ConvRecState":
        z = np.zeros(cell.shape, np.float32)
        return cls(z.copy(), z.copy(), z.copy() if cell.stateful_c else None)


def convrec_step(cell: ConvRecCell, x: SparseMap, y_prev: SparseMap, state: ConvRecState, step: int | None = None):
    """One event-driven step; returns ``(y, new_state, synops)``.

    Only ``x`` and ``y_prev`` are convolved, so the synaptic-operation count
    covers exactly the multiplications driven by nonzero events.
    """
    gx, ops_x = sparse_conv(x, cell.wx)
    gy, ops_y = sparse_conv(y_prev, cell.uy)
    vth = cell.v_th
    h, c, s, y = recurrent_update(cell.variant, NUMPY_OPS, gx, gy, state.h, state.c, state.s_prev, vth)
    if not np.all(np.isfinite(h)):
        where = f" at step {step}" if step is not None else ""
        raise StateError(f"non-finite hidden state in {cell.name}{where}")
    h = h.astype(np.float32)
    s = np.zeros_like(h) if s is None else s.astype(np.float32)
    new = ConvRecState(h, s, None if c is None else c.astype(np.float32))
    return SparseMap.from_dense(y), new, ops_x + ops_y

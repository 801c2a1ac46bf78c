"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Operations record a closure on the active :class:`Tape` whenever one of
their inputs requires a gradient.  :meth:`Tape.backward` replays the record
in exact reverse order and accumulates gradients additively into ``.grad``.

    tape = Tape()
    with tape:
        loss = F.sum(F.relu(F.conv2d(x, w, b)))
    tape.backward(loss)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .sparse import im2col

_state = threading.local()


def _active():
    return getattr(_state, "tape", None)


class TapeError(RuntimeError):
    pass


class Var:
    __array_ufunc__ = None  # make numpy defer to the reflected operators
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Var({self.name or ''}{list(self.shape)})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def param(data, name=None) -> Var:
    return Var(np.asarray(data), requires_grad=True, name=name)


def _val(a):
    return a.data if isinstance(a, Var) else np.asarray(a)


def _needs(a):
    return isinstance(a, Var) and a.requires_grad


class Tape:
    """Ordered record of forward operations."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        self._prev = _active()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev

    def __len__(self):
        return len(self.records)

    def push(self, out: Var, inputs, backward_fn):
        out._tape = self
        self.records.append((out, inputs, backward_fn))

    def backward(self, out: Var, upstream=None):
        """Propagate ``upstream`` (default ones) from ``out`` through the tape."""
        if out._tape is not self:
            raise TapeError(f"{out!r} was not recorded on this tape")
        g = np.ones_like(out.data) if upstream is None else np.broadcast_to(upstream, out.shape).astype(out.data.dtype)
        out.grad = g if out.grad is None else out.grad + g
        for node, inputs, fn in reversed(self.records):
            if node.grad is None:
                continue
            grads = fn(node.grad)
            for inp, gi in zip(inputs, grads):
                if gi is None or not _needs(inp):
                    continue
                gi = _unbroadcast(gi, inp.shape)
                inp.grad = gi if inp.grad is None else inp.grad + gi
            if node is not out:
                node.grad = None  # free intermediate gradients
        self.records.clear()


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _op(data, inputs, backward_fn):
    tape = _active()
    req = tape is not None and any(_needs(i) for i in inputs)
    out = Var(data, requires_grad=req)
    if req:
        tape.push(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b):
    return _op(_val(a) + _val(b), (a, b), lambda g: (g, g))


def sub(a, b):
    return _op(_val(a) - _val(b), (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _op(av * bv, (a, b), lambda g: (g * bv, g * av))


def getitem(a, idx):
    av = _val(a)

    def bw(g):
        full = np.zeros_like(av)
        full[idx] = g
        return (full,)

    return _op(av[idx], (a,), bw)


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-_val(a)))
    return _op(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a):
    y = np.tanh(_val(a))
    return _op(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    av = _val(a)
    mask = av > 0
    return _op(np.where(mask, av, 0.0).astype(av.dtype), (a,), lambda g: (g * mask,))


@dataclass
class SurrogateCfg:
    """Triangular pseudo-derivative ``max(0, 1 - |u| / width) / width`` for the step."""

    width: float = 0.5
    shape: str = "triangular"

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("surrogate width must be positive")
        if self.shape != "triangular":
            raise ValueError(f"unsupported surrogate shape {self.shape!r}")

    def derivative(self, u):
        return np.maximum(0.0, 1.0 - np.abs(u) / self.width) / self.width


DEFAULT_SURROGATE = SurrogateCfg()


def spike(u, surrogate: SurrogateCfg = DEFAULT_SURROGATE):
    """Heaviside ``u > 0`` (strict) with a surrogate gradient."""
    uv = _val(u)
    s = (uv > 0).astype(uv.dtype)
    return _op(s, (u,), lambda g: (g * surrogate.derivative(uv).astype(uv.dtype),))


# ---------------------------------------------------------------- reductions / shape


def sum(a):  # noqa: A001
    av = _val(a)
    return _op(np.asarray(av.sum(), dtype=av.dtype), (a,), lambda g: (np.broadcast_to(g, av.shape),))


def l1(a):
    """Sum of absolute values (subgradient 0 at 0)."""
    av = _val(a)
    sgn = np.sign(av)
    return _op(np.asarray(np.abs(av).sum(), dtype=av.dtype), (a,), lambda g: (g * sgn,))


def scale(a, k: float):
    return mul(a, k)


def reshape(a, shape):
    av = _val(a)
    return _op(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _op(_val(a).transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(items, axis):
    vals = [_val(i) for i in items]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _op(np.concatenate(vals, axis=axis), tuple(items), bw)


# ---------------------------------------------------------------- convolution


def conv2d(x, w, b=None, stride: int = 1):
    """Same-padded cross-correlation of ``x`` [N, C, H, W] with ``w`` [Co, C, kh, kw]."""
    xv, wv = _val(x), _val(w)
    kh, kw = wv.shape[2:]
    ph, pw = kh // 2, kw // 2
    cols = im2col(xv, kh, kw, stride, (ph, pw))  # [N, Ho, Wo, C, kh, kw]
    out = np.tensordot(cols, wv, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + _val(b)[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=xv.dtype)
    N, C, H, W = xv.shape
    Ho, Wo = out.shape[2:]

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 1, 2])) if _needs(w) else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and _needs(b) else None
        gx = None
        if _needs(x):
            gxp = np.zeros((N, C, H + 2 * ph, W + 2 * pw), dtype=g.dtype)
            for ky in range(kh):
                for kx in range(kw):
                    contrib = np.tensordot(wv[:, :, ky, kx], g, axes=([0], [1]))  # [C, N, Ho, Wo]
                    gxp[:, :, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride] += contrib.transpose(1, 0, 2, 3)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _op(out, inputs, bw)


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.mean = np.zeros(channels, dtype)
        self.var = np.ones(channels, dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x, gamma, beta, state: BatchNormState, training: bool):
    xv = _val(x)
    gv, bv = _val(gamma), _val(beta)
    if not training:
        inv = 1.0 / np.sqrt(state.var + state.eps)
        k = (gv * inv).astype(xv.dtype)
        sh = (bv - state.mean * gv * inv).astype(xv.dtype)
        xhat = (xv - state.mean[None, :, None, None]) * inv[None, :, None, None]
        out = xv * k[None, :, None, None] + sh[None, :, None, None]

        def bw_eval(g):
            return (g * k[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _op(out.astype(xv.dtype), (x, gamma, beta), bw_eval)
    axes = (0, 2, 3)
    m = xv.shape[0] * xv.shape[2] * xv.shape[3]
    mu = xv.mean(axis=axes)
    var = xv.var(axis=axes)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xv - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gv[None, :, None, None] * xhat + bv[None, :, None, None]
    mom = state.momentum
    state.mean = (mom * state.mean + (1 - mom) * mu).astype(state.mean.dtype)
    unbiased = var * m / max(m - 1, 1)
    state.var = (mom * state.var + (1 - mom) * unbiased).astype(state.var.dtype)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gv[None, :, None, None]
        gx = (inv[None, :, None, None] / m) * (
            m * gxhat - gxhat.sum(axis=axes)[None, :, None, None]
            - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
        )
        return gx, gg, gb

    return _op(out.astype(xv.dtype), (x, gamma, beta), bw)


# ---------------------------------------------------------------- losses


def focal_loss(logits, targets, valid, alpha=0.25, gamma=2.0):
    """Summed sigmoid focal loss.

    ``targets`` is one-hot (same shape as ``logits``); ``valid`` masks out
    ignored anchors and broadcasts over the class axis.
    """
    z = _val(logits).astype(np.float64)
    t = np.asarray(targets, dtype=np.float64)
    v = np.broadcast_to(np.asarray(valid, dtype=np.float64), z.shape)
    p = 1.0 / (1.0 + np.exp(-z))
    pt = np.where(t > 0, p, 1.0 - p)
    at = np.where(t > 0, alpha, 1.0 - alpha)
    # log(pt) computed stably from logits
    log_pt = -np.logaddexp(0.0, np.where(t > 0, -z, z))
    loss = -at * (1.0 - pt) ** gamma * log_pt * v

    def bw(g):
        # d/dz of -(1-pt)^gamma log(pt) with dpt/dz = s * pt * (1-pt), s = +1 for t=1 else -1
        s = np.where(t > 0, 1.0, -1.0)
        d_pt = gamma * (1.0 - pt) ** (gamma - 1) * log_pt - (1.0 - pt) ** gamma / np.maximum(pt, 1e-300)
        d = at * d_pt * s * pt * (1.0 - pt) * v
        return ((g * d).astype(_val(logits).dtype),)

    return _op(np.asarray(loss.sum(), dtype=_val(logits).dtype), (logits,), bw)


def smooth_l1(pred, target, mask, beta=1.0):
    """Summed smooth-L1 over entries selected by ``mask`` (broadcasts over the last axis)."""
    pv = _val(pred).astype(np.float64)
    d = pv - np.asarray(target, dtype=np.float64)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), d.shape)
    ad = np.abs(d)
    small = ad < beta
    loss = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta) * m

    def bw(g):
        grad = np.where(small, d / beta, np.sign(d)) * m
        return ((g * grad).astype(_val(pred).dtype),)

    return _op(np.asarray(loss.sum(), dtype=_val(pred).dtype), (pred,), bw)

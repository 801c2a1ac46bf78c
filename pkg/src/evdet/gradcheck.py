"""Finite-difference verification of every differentiable component.

Each fixture is a small random instance evaluated in float64 and reduced to
a scalar through a fixed random projection.  Analytic gradients from the
tape are compared with central differences at randomly drawn entries.  A
probe is redrawn when the two difference points see different ReLU or
spike patterns, since the derivative does not exist across a kink.

Recurrent cells are checked twice: on fixtures where every neuron stays
more than the surrogate width away from its threshold (the surrogate is
then inactive and the match must be exact), and on ordinary fixtures where
the surrogate is active; the latter are reported separately.
"""
from __future__ import annotations

import types
from dataclasses import dataclass, field

import numpy as np

from . import autograd as F
from .cells import recurrent_update
from .losses import sparsity_loss
from .netspec import CELL_GATES

COMPONENTS = ("conv", "bn", "residual", "gru", "mgu", "minimal", "lstm", "convlstm", "focal", "smoothl1", "sparsity")
CELL_VARIANTS = ("gru", "mgu", "minimal", "lstm", "convlstm")


@dataclass
class GradCheckReport:
    component: str
    max_rel_error: dict  # parameter group -> max relative error over exact-path probes
    probes: int
    band_max_rel_error: dict = field(default_factory=dict)  # surrogate-active probes, not held to the tolerance
    band_probes: int = 0
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def to_json(self):
        return {"component": self.component, "max_rel_error": self.max_rel_error, "probes": self.probes,
                "surrogate_band": {"max_rel_error": self.band_max_rel_error, "probes": self.band_probes},
                "tol": self.tol, "passed": self.passed}


def rel_error(a, n, floor=1e-8):
    return abs(a - n) / max(abs(a), abs(n), floor)


class _Masks:
    """Collects kink patterns (ReLU and spike masks) of one forward evaluation."""

    def __init__(self):
        self.items = []

    def relu(self, a):
        self.items.append(F._val(a) > 0)
        return F.relu(a)

    def same(self, other) -> bool:
        return len(self.items) == len(other.items) and all(np.array_equal(a, b) for a, b in zip(self.items, other.items))


# ---------------------------------------------------------------- fixtures
# each returns (params, fn) with fn(vars, masks) -> scalar Var; fn may also
# return a list of threshold margins through masks.margins


def _proj(rng, shape):
    return rng.normal(size=shape)


def _fx_conv(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    params = {"x": x, "w": rng.normal(size=(4, 3, 3, 3)) * 0.4, "b": rng.normal(size=4)}
    stride = int(rng.integers(1, 3))
    R = _proj(rng, F.conv2d(x, params["w"], params["b"], stride).shape)

    def fn(v, m):
        return F.sum(F.conv2d(v["x"], v["w"], v["b"], stride) * R)

    return params, fn


def _fx_bn(rng):
    params = {"x": rng.normal(size=(3, 4, 3, 3)) * 2 + 0.5, "gamma": rng.normal(size=4), "beta": rng.normal(size=4)}
    training = bool(rng.integers(0, 2))
    st = F.BatchNormState(4, dtype=np.float64)
    st.mean, st.var = rng.normal(size=4), rng.uniform(0.5, 2.0, 4)
    R = _proj(rng, params["x"].shape)

    def fn(v, m):
        s = F.BatchNormState(4, dtype=np.float64)
        s.mean, s.var = st.mean.copy(), st.var.copy()
        return F.sum(F.batchnorm(v["x"], v["gamma"], v["beta"], s, training) * R)

    return params, fn


def _fx_residual(rng):
    cin, cout = 3, 4
    stride = int(rng.integers(1, 3))
    params = {
        "x": np.abs(rng.normal(size=(2, cin, 6, 6))),
        "conv1.w": rng.normal(size=(cout, cin, 3, 3)) * 0.4,
        "conv2.w": rng.normal(size=(cout, cout, 3, 3)) * 0.3,
        "shortcut.w": rng.normal(size=(cout, cin, 1, 1)) * 0.5,
    }
    for k in ("conv1", "conv2", "shortcut"):
        params[f"{k}.gamma"] = rng.uniform(0.5, 1.5, cout)
        params[f"{k}.beta"] = rng.normal(size=cout) * 0.2
    Ho = (6 + 2 - 3) // stride + 1
    R = _proj(rng, (2, cout, Ho, Ho))

    def bn(v, k, a):
        return F.batchnorm(a, v[f"{k}.gamma"], v[f"{k}.beta"], F.BatchNormState(cout, dtype=np.float64), True)

    def fn(v, m):
        mid = m.relu(bn(v, "conv1", F.conv2d(v["x"], v["conv1.w"], None, stride)))
        out = bn(v, "conv2", F.conv2d(mid, v["conv2.w"], None, 1))
        sc = bn(v, "shortcut", F.conv2d(v["x"], v["shortcut.w"], None, stride))
        return F.sum(m.relu(out + sc) * R)

    return params, fn


def _fx_cell(rng, variant, saturated: bool, steps=3, C=2, Cin=2, S=3):
    gx_n, gy_n = CELL_GATES[variant]
    scale = 0.15 if saturated else 0.2
    params = {
        "x": rng.normal(size=(steps, 1, Cin, S, S)),
        "wx.w": rng.normal(size=(gx_n * C, Cin, 3, 3)) * scale,
        "wx.b": rng.normal(size=gx_n * C) * 0.6,
        "uy.w": rng.normal(size=(gy_n * C, C, 3, 3)) * scale,
    }
    if saturated:
        # leak gate near 0, output gate near 1, candidate near +-1, thresholds near 0.05:
        # every |h - v_th| then clears the surrogate width
        bias = {"a": -4.0, "f": -4.0, "r": 0.0, "o": 4.0}
        names = {"gru": "arz", "mgu": "az", "minimal": "az", "lstm": "foz"}[variant]
        b = np.concatenate([np.full(C, bias[g]) if g != "z" else 3.0 * rng.choice([-1.0, 1.0], C) for g in names])
        params["wx.b"] = b + rng.normal(size=b.shape) * 0.1
    if variant != "convlstm":
        params["rho"] = rng.normal(-3.0, 0.3, (C, S, S)) if saturated else rng.normal(0.0, np.sqrt(2.0), (C, S, S))
    R = _proj(rng, (steps, 1, C, S, S))

    def fn(v, m):
        ops = types.SimpleNamespace(sigmoid=F.sigmoid, tanh=F.tanh, spike=m.spike)
        vth = F.sigmoid(v["rho"]) if "rho" in v else np.zeros((C, S, S))
        h = c = s = np.zeros((1, C, S, S))
        y = None
        total = None
        for t in range(steps):
            gx = F.conv2d(v["x"][t], v["wx.w"], v["wx.b"], 1)
            gy = np.zeros((1, gy_n * C, S, S)) if y is None else F.conv2d(y, v["uy.w"], None, 1)
            h, c, s, y = recurrent_update(variant, ops, gx, gy, h, c, s, vth, channel_axis=1)
            if s is None:
                s = np.zeros((1, C, S, S))
            else:
                m.margins.append(F._val(h) - F._val(vth))
            term = F.sum(y * R[t])
            total = term if total is None else total + term
        return total

    return params, fn


def _fx_focal(rng):
    logits = rng.normal(size=(2, 7, 3)) * 2
    t = np.zeros_like(logits)
    t[0, 1, 2] = t[1, 4, 0] = t[1, 5, 1] = 1.0
    valid = (rng.random((2, 7, 1)) > 0.2).astype(np.float64)

    def fn(v, m):
        return F.focal_loss(v["logits"], t, valid)

    return {"logits": logits}, fn


def _fx_smoothl1(rng):
    pred = rng.normal(size=(2, 6, 4)) * 1.5
    target = rng.normal(size=(2, 6, 4))
    d = pred - target
    pred = np.where(np.abs(np.abs(d) - 1.0) < 0.01, pred + 0.05, pred)  # keep away from the |d| = beta seam
    mask = (rng.random((2, 6, 1)) > 0.4).astype(np.float64)

    def fn(v, m):
        return F.smooth_l1(v["pred"], target, mask)

    return {"pred": pred}, fn


def _fx_sparsity(rng):
    a = np.maximum(rng.normal(size=(4, 3, 5, 5)), 0) + (rng.random((4, 3, 5, 5)) > 0.5) * 0.1
    b = np.maximum(rng.normal(size=(4, 2, 3, 3)), 0)

    def fn(v, m):
        m.items.append(F._val(v["a"]) > 0)
        m.items.append(F._val(v["b"]) > 0)
        return sparsity_loss({"a": v["a"], "b": v["b"]}, 0.04, 2, 2)

    return {"a": a, "b": b}, fn


# ---------------------------------------------------------------- driver


class _Ctx(_Masks):
    def __init__(self, surrogate):
        super().__init__()
        self.margins = []
        self.surrogate = surrogate

    def spike(self, u):
        self.items.append(F._val(u) > 0)
        return F.spike(u, self.surrogate)


def _evaluate(fn, values, surrogate):
    ctx = _Ctx(surrogate)
    out = fn({k: F.Var(v) for k, v in values.items()}, ctx)
    return float(out.data), ctx


def _analytic(fn, values, surrogate):
    tape = F.Tape()
    vars_ = {k: F.param(v.copy(), k) for k, v in values.items()}
    ctx = _Ctx(surrogate)
    with tape:
        out = fn(vars_, ctx)
    tape.backward(out)
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in vars_.items()}, ctx


def _probe(fn, values, grads, probes, h, rng, surrogate, max_tries=20):
    """Max relative error per group over ``probes`` kink-free entries; returns (errors, count)."""
    names = sorted(values)
    errs = {k: 0.0 for k in names}
    done = 0
    for i in range(probes):
        k = names[i % len(names)]
        for _ in range(max_tries):
            idx = tuple(int(rng.integers(0, n)) for n in values[k].shape)
            base = values[k][idx]
            values[k][idx] = base + h
            fp, cp = _evaluate(fn, values, surrogate)
            values[k][idx] = base - h
            fm, cm = _evaluate(fn, values, surrogate)
            values[k][idx] = base
            if cp.same(cm):
                num = (fp - fm) / (2 * h)
                errs[k] = max(errs[k], rel_error(float(grads[k][idx]), num))
                done += 1
                break
    return errs, done


def _saturated_cell_fixture(variant, rng, eps, margin, tries=4000):
    """Redraw until every neuron at every step is further than ``eps + margin`` from its threshold."""
    for _ in range(tries):
        params, fn = _fx_cell(rng, variant, saturated=True)
        _, ctx = _evaluate(fn, params, F.SurrogateCfg(eps))
        if all(np.all(np.abs(mg) > eps + margin) for mg in ctx.margins):
            return params, fn
    raise RuntimeError(f"no out-of-band fixture found for {variant}")


def grad_check(component: str, probes: int = 100, h: float = 1e-3, seed: int = 0, tol: float = 1e-4,
               surrogate: F.SurrogateCfg = F.DEFAULT_SURROGATE) -> GradCheckReport:
    """Compare analytic and central-difference gradients on ``probes`` random entries."""
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; choose from {', '.join(COMPONENTS)}")
    rng = np.random.default_rng(seed)
    builders = {"conv": _fx_conv, "bn": _fx_bn, "residual": _fx_residual, "focal": _fx_focal,
                "smoothl1": _fx_smoothl1, "sparsity": _fx_sparsity}
    band_errs, band_n = {}, 0
    n_fix = max(1, probes // 25)
    per_fix = -(-probes // n_fix)
    errs, total = {}, 0
    for _ in range(n_fix):
        if component in CELL_VARIANTS and component != "convlstm":
            params, fn = _saturated_cell_fixture(component, rng, surrogate.width, 4 * h)
        elif component == "convlstm":
            params, fn = _fx_cell(rng, "convlstm", saturated=False)
        else:
            params, fn = builders[component](rng)
        grads, _ = _analytic(fn, params, surrogate)
        e, n = _probe(fn, params, grads, per_fix, h, rng, surrogate)
        for k, v in e.items():
            errs[k] = max(errs.get(k, 0.0), v)
        total += n
        if component in CELL_VARIANTS and component != "convlstm":
            params, fn = _fx_cell(rng, component, saturated=False)
            grads, _ = _analytic(fn, params, surrogate)
            e, n = _probe(fn, params, grads, per_fix, h, rng, surrogate)
            for k, v in e.items():
                band_errs[k] = max(band_errs.get(k, 0.0), v)
            band_n += n
    return GradCheckReport(component, errs, total, band_errs, band_n, tol)


def grad_check_all(probes=100, h=1e-3, seed=0) -> list[GradCheckReport]:
    return [grad_check(c, probes, h, seed) for c in COMPONENTS]

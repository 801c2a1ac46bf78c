"""Adam, the one-cycle learning-rate schedule and global-norm clipping."""
from __future__ import annotations

import math

import numpy as np


class Adam:
    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data, dtype=np.float64) for k, v in params.items()}

    def step(self):
        """Bias-corrected update of every parameter with a gradient; clears the gradients."""
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in sorted(self.params):
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)
            p.grad = None

    def state_dict(self) -> dict:
        out = {"__t": np.array([self.t], np.float64), "__lr": np.array([self.lr], np.float64)}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict):
        self.t = int(state["__t"][0])
        self.lr = float(state["__lr"][0])
        for k in self.m:
            self.m[k] = np.asarray(state[f"m.{k}"], np.float64).reshape(self.m[k].shape)
            self.v[k] = np.asarray(state[f"v.{k}"], np.float64).reshape(self.v[k].shape)


class OneCycle:
    """Cosine warm-up from ``max_lr / div`` to ``max_lr``, then cosine anneal to ``max_lr / final_div``."""

    def __init__(self, max_lr, total_steps, pct_start=0.3, div=25.0, final_div=1e4):
        if total_steps < 1:
            raise ValueError("total_steps must be positive")
        self.max_lr = max_lr
        self.total = total_steps
        self.warm = max(1, int(round(pct_start * total_steps)))
        self.initial = max_lr / div
        self.final = self.initial / final_div

    @staticmethod
    def _cos(a, b, frac):
        return b + (a - b) * (1 + math.cos(math.pi * frac)) / 2

    def lr(self, step: int) -> float:
        step = min(max(step, 0), self.total - 1)
        if step < self.warm:
            return self._cos(self.initial, self.max_lr, step / self.warm)
        down = max(1, self.total - 1 - self.warm)
        return self._cos(self.max_lr, self.final, (step - self.warm) / down)


def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before."""
    sq = 0.0
    for k in sorted(params):
        g = params[k].grad
        if g is not None:
            sq += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(sq)
    if norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * f).astype(p.grad.dtype)
    return norm

"""Differentiable dense forward pass used for training and gradient checks.

Computes the same function as :func:`evdet.network.forward_sequence` on a
batch of sequences, recording onto the active tape.  Feed-forward work is
batched over all time steps (rows are ordered step-major, ``t * N + n``);
only the recurrent convolutions run inside the time loop.
"""
from __future__ import annotations

import types
from dataclasses import dataclass

import numpy as np

from . import autograd as F
from .cells import recurrent_update
from .network import Network


@dataclass
class TrainOutput:
    cls_logits: F.Var  # [T*N, anchors, classes]
    box_deltas: F.Var  # [T*N, anchors, 4]
    flagged: dict  # key -> Var [T*N, C, H, W], ReLU outputs under the sparsity loss
    recurrent: dict  # key -> Var [T*N, C, H, W], event outputs y
    T: int
    N: int
    other: dict = None  # key -> array for maps outside the loss: the input and head stems

    def densities(self) -> dict:
        maps = {k: v.data for k, v in self.flagged.items()}
        maps.update({k: v.data for k, v in self.recurrent.items()})
        maps.update(self.other or {})
        return {k: float(np.count_nonzero(v) / v.size) for k, v in maps.items()}


def _bn(net: Network, name, x, training):
    return F.batchnorm(x, net.params[f"{name}.bn.gamma"], net.params[f"{name}.bn.beta"], net.bn[name], training)


def _conv(net: Network, info, x):
    return F.conv2d(x, net.params[f"{info.name}.w"], net.params.get(f"{info.name}.b"), info.stride)


def forward_train(net: Network, x, training: bool = True, ablate_recurrent: bool = False,
                  surrogate: F.SurrogateCfg = F.DEFAULT_SURROGATE) -> TrainOutput:
    """``x`` is [N, T, C, H, W]; returns head outputs for every (step, sample)."""
    x = np.asarray(x)
    N, T = x.shape[:2]
    a = F.Var(np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4)).reshape(T * N, *x.shape[2:]))
    ops = types.SimpleNamespace(sigmoid=F.sigmoid, tanh=F.tanh, spike=lambda u: F.spike(u, surrogate))
    flagged, recurrent, scales = {}, {}, []
    other = {"input": a.data}
    for info in net.layers:
        if info.kind == "ConvBNReLU":
            cv = info.convs[0]
            a = F.relu(_bn(net, cv.name, _conv(net, cv, a), training))
            flagged[info.output_key] = a
        elif info.kind == "ResidualBlock":
            c1, c2 = info.convs[:2]
            mid = F.relu(_bn(net, c1.name, _conv(net, c1, a), training))
            out = _bn(net, c2.name, _conv(net, c2, mid), training)
            if len(info.convs) > 2:
                sc = _bn(net, info.convs[2].name, _conv(net, info.convs[2], a), training)
            else:
                sc = a
            a = F.relu(out + sc)
            flagged[f"{info.name}.mid"] = mid
            flagged[info.output_key] = a
        elif info.kind == "EventConvRNN":
            wx, uy = info.convs
            gx_all = _conv(net, wx, a)
            C, H, W = info.out_shape
            rho = net.params.get(f"{info.name}.rho")
            vth = F.sigmoid(rho) if rho is not None else np.ones((C, H, W), a.data.dtype)
            zeros = np.zeros((N, C, H, W), a.data.dtype)
            h, c, s, y = zeros, zeros, zeros, None
            ys = []
            for t in range(T):
                gx = gx_all[t * N:(t + 1) * N]
                if ablate_recurrent or y is None:
                    h, c, s = zeros, zeros, zeros
                    gy = np.zeros((N, uy.c_out, H, W), a.data.dtype)
                else:
                    gy = F.conv2d(y, net.params[f"{uy.name}.w"], None, 1)
                h, c, s, y = recurrent_update(info.cell, ops, gx, gy, h, c, s, vth, channel_axis=1)
                if s is None:
                    s = zeros
                ys.append(y)
            a = F.concat(ys, axis=0)
            recurrent[info.output_key] = a
            scales.append(a)
    cls_parts, reg_parts = [], []
    K = net.spec.num_classes
    for s_idx, (feat, info) in enumerate(zip(scales, [l for l in net.layers if l.kind == "SSDHead"])):
        f = feat
        for cv in info.convs:
            if ".stem" in cv.name:
                f = F.relu(_conv(net, cv, f))
                other[cv.name] = f.data
        cls_cv, reg_cv = info.convs[-2:]
        cls = _conv(net, cls_cv, f)
        reg = _conv(net, reg_cv, f)
        B, _, H, W = cls.shape
        cls_parts.append(F.reshape(F.transpose(cls, (0, 2, 3, 1)), (B, -1, K)))
        reg_parts.append(F.reshape(F.transpose(reg, (0, 2, 3, 1)), (B, -1, 4)))
    cls_all = F.concat(cls_parts, axis=1) if len(cls_parts) > 1 else cls_parts[0]
    reg_all = F.concat(reg_parts, axis=1) if len(reg_parts) > 1 else reg_parts[0]
    return TrainOutput(cls_all, reg_all, flagged, recurrent, T, N, other)

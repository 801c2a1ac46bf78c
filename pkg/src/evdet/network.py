"""Network assembly, event-driven inference and weight checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import BatchNormState, param
from .cells import ConvRecCell, ConvRecState, convrec_step
from .netspec import NetworkSpec, describe
from .sparse import ConvLayer, ShapeError, SparseMap, relu_sparsify, sparse_conv

PRIOR_PROB = 0.01
WEIGHT_MAGIC = b"SEEDW"
WEIGHT_VERSION = 1


class Network:
    """Parameters and batch-norm statistics of one network spec.

    ``params`` maps names such as ``res1.conv1.w`` or ``rnn4.rho`` to
    trainable :class:`~evdet.autograd.Var` objects; ``bn`` maps each
    normalised convolution to its running statistics.
    """

    def __init__(self, spec: NetworkSpec, params: dict, bn: dict):
        self.spec = spec
        self.layers = describe(spec)
        self.params = params
        self.bn = bn

    def __getitem__(self, name) -> np.ndarray:
        return self.params[name].data

    @property
    def n_params(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def conv_layer(self, conv_name: str, stride: int) -> ConvLayer:
        """Inference form of a convolution with its batch norm folded in."""
        w = self[f"{conv_name}.w"]
        b = self.params.get(f"{conv_name}.b")
        b = np.zeros(w.shape[0], np.float32) if b is None else b.data
        fused = None
        if conv_name in self.bn:
            st = self.bn[conv_name]
            inv = 1.0 / np.sqrt(st.var.astype(np.float64) + st.eps)
            g = self[f"{conv_name}.bn.gamma"].astype(np.float64)
            scale = g * inv
            shift = self[f"{conv_name}.bn.beta"] - st.mean * scale
            fused = (scale.astype(np.float32), shift.astype(np.float32))
        return ConvLayer(w, b, stride, conv_name, fused)

    def cell(self, name) -> ConvRecCell:
        info = self.layer(name)
        wx, uy = info.convs
        return ConvRecCell(info.cell, self.conv_layer(wx.name, wx.stride), self.conv_layer(uy.name, 1),
                           self[f"{name}.rho"] if f"{name}.rho" in self.params else np.full(info.out_shape, np.inf, np.float32),
                           name)

    def state_dict(self) -> dict:
        out = {k: v.data for k, v in self.params.items()}
        for k, st in self.bn.items():
            out[f"{k}.bn.running_mean"] = st.mean
            out[f"{k}.bn.running_var"] = st.var
        return out

    def load_state_dict(self, sd: dict):
        for k, v in self.params.items():
            if k not in sd:
                raise KeyError(f"checkpoint lacks tensor {k}")
            if sd[k].shape != v.data.shape:
                raise ShapeError(f"tensor {k}: checkpoint shape {sd[k].shape} != {v.data.shape}")
            v.data = np.array(sd[k], dtype=np.float32)
        for k, st in self.bn.items():
            st.mean = np.array(sd[f"{k}.bn.running_mean"], np.float32)
            st.var = np.array(sd[f"{k}.bn.running_var"], np.float32)

    def copy(self) -> "Network":
        other = build_network(self.spec, 0)
        other.load_state_dict(self.state_dict())
        return other


def build_network(spec: NetworkSpec, init_seed: int = 0) -> Network:
    """Initialise every tensor of ``spec`` deterministically from ``init_seed``.

    Kernels are uniform in ``+-1/sqrt(fan_in)``, threshold parameters are
    normal with standard deviation sqrt(2), biases start at zero except the
    classification bias, which encodes a 1 % foreground prior.
    """
    rng = np.random.default_rng(init_seed)
    params, bn = {}, {}
    for info in describe(spec):
        for cv in info.convs:
            bound = 1.0 / np.sqrt(cv.c_in * cv.k * cv.k)
            params[f"{cv.name}.w"] = param(
                rng.uniform(-bound, bound, (cv.c_out, cv.c_in, cv.k, cv.k)).astype(np.float32), f"{cv.name}.w")
            if cv.bias:
                b = np.zeros(cv.c_out, np.float32)
                if cv.name.endswith(".cls"):
                    b[:] = -np.log((1 - PRIOR_PROB) / PRIOR_PROB)
                params[f"{cv.name}.b"] = param(b, f"{cv.name}.b")
            if info.kind in ("ConvBNReLU", "ResidualBlock"):
                params[f"{cv.name}.bn.gamma"] = param(np.ones(cv.c_out, np.float32))
                params[f"{cv.name}.bn.beta"] = param(np.zeros(cv.c_out, np.float32))
                bn[cv.name] = BatchNormState(cv.c_out)
        if info.threshold_count:
            params[f"{info.name}.rho"] = param(
                rng.normal(0.0, np.sqrt(2.0), info.out_shape).astype(np.float32), f"{info.name}.rho")
    net = Network(spec, params, bn)
    expected = sum(l.params for l in net.layers)
    if net.n_params != expected:
        raise AssertionError(f"initialised {net.n_params} parameters, spec describes {expected}")
    return net


# ---------------------------------------------------------------- event-driven inference


@dataclass
class ResidualLayers:
    conv1: ConvLayer
    conv2: ConvLayer
    shortcut: ConvLayer | None


def residual_block(inp: SparseMap, block: ResidualLayers):
    """``relu(bnconv2(relu(bnconv1(x))) + shortcut(x))``; returns ``(out, mid, synops)``."""
    pre1, ops1 = sparse_conv(inp, block.conv1)
    mid = relu_sparsify(pre1)
    pre2, ops2 = sparse_conv(mid, block.conv2)
    if block.shortcut is None:
        if inp.shape != tuple(pre2.shape):
            raise ShapeError(f"{block.conv1.name}: identity shortcut needs matching shapes")
        sc, ops3 = inp.to_dense(), 0
    else:
        sc, ops3 = sparse_conv(inp, block.shortcut)
    return relu_sparsify(pre2 + sc), mid, ops1 + ops2 + ops3


@dataclass
class SparsityTrace:
    """Per-activation density for every processed frame."""

    densities: dict = field(default_factory=dict)

    def record(self, key, m: SparseMap):
        self.densities.setdefault(key, []).append(m.density)

    def mean(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.densities.items()}

    def merge(self, other: "SparsityTrace"):
        for k, v in other.densities.items():
            self.densities.setdefault(k, []).extend(v)
        return self


@dataclass
class SequenceResult:
    scales: list  # per frame: list of SparseMaps feeding the head
    trace: SparsityTrace
    synops: dict  # per layer name, summed over frames

    @property
    def total_synops(self) -> int:
        return int(sum(self.synops.values()))


def _frame_values(f):
    return f.values if hasattr(f, "values") else np.asarray(f)


def forward_sequence(net: Network, frames, ablate_recurrent: bool = False) -> SequenceResult:
    """Run the backbone and recurrent layers event by event over a frame sequence.

    With ``ablate_recurrent`` every recurrent layer starts each step from zero
    state and an empty previous output, so step ``t`` depends on frame ``t``
    only.
    """
    frames = list(frames)
    if frames:
        shapes = {tuple(_frame_values(f).shape) for f in frames}
        if len(shapes) != 1:
            raise ShapeError(f"frames differ in shape: {sorted(shapes)}")
        if shapes.pop() != tuple(net.spec.input):
            raise ShapeError(f"frames must have shape {tuple(net.spec.input)}")
    layers = [l for l in net.layers if l.kind != "SSDHead"]
    convs, blocks, cells = {}, {}, {}
    for l in layers:
        if l.kind == "ConvBNReLU":
            convs[l.name] = net.conv_layer(l.convs[0].name, l.convs[0].stride)
        elif l.kind == "ResidualBlock":
            sc = net.conv_layer(l.convs[2].name, l.convs[2].stride) if len(l.convs) > 2 else None
            blocks[l.name] = ResidualLayers(net.conv_layer(l.convs[0].name, l.convs[0].stride),
                                            net.conv_layer(l.convs[1].name, 1), sc)
        else:
            cells[l.name] = net.cell(l.name)
    states = {n: ConvRecState.zeros(c) for n, c in cells.items()}
    y_prev = {n: SparseMap.empty(c.shape) for n, c in cells.items()}
    trace = SparsityTrace()
    synops = {l.name: 0 for l in layers}
    scales = []
    for t, f in enumerate(frames):
        x = SparseMap.from_dense(_frame_values(f))
        trace.record("input", x)
        outs = []
        for l in layers:
            try:
                if l.kind == "ConvBNReLU":
                    pre, ops = sparse_conv(x, convs[l.name])
                    x = relu_sparsify(pre)
                elif l.kind == "ResidualBlock":
                    x, mid, ops = residual_block(x, blocks[l.name])
                    trace.record(f"{l.name}.mid", mid)
                else:
                    cell = cells[l.name]
                    if ablate_recurrent:
                        states[l.name] = ConvRecState.zeros(cell)
                        y_prev[l.name] = SparseMap.empty(cell.shape)
                    x, states[l.name], ops = convrec_step(cell, x, y_prev[l.name], states[l.name], step=t)
                    y_prev[l.name] = x
                    outs.append(x)
            except ShapeError as e:
                raise ShapeError(f"step {t}: {e}") from None
            synops[l.name] += ops
            trace.record(l.output_key, x)
        scales.append(outs)
    return SequenceResult(scales, trace, synops)


# ---------------------------------------------------------------- checkpoints


def save_weights(net: Network, path) -> None:
    """Flat little-endian container: magic, version, tensor table, float32 payload."""
    sd = net.state_dict()
    table = bytearray()
    for name, arr in sd.items():
        nb = name.encode()
        table += struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC + struct.pack("<HII", WEIGHT_VERSION, len(sd), len(table)))
        f.write(bytes(table))
        for arr in sd.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_weights(path) -> dict:
    raw = Path(path).read_bytes()
    if not raw.startswith(WEIGHT_MAGIC):
        raise ValueError(f"{path}: not a weight container")
    off = len(WEIGHT_MAGIC)
    version, n, table_len = struct.unpack_from("<HII", raw, off)
    if version != WEIGHT_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off += 10
    entries = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", raw, off)
        name = raw[off + 2:off + 2 + ln].decode()
        off += 2 + ln
        (nd,) = struct.unpack_from("<B", raw, off)
        shape = struct.unpack_from(f"<{nd}I", raw, off + 1)
        off += 1 + 4 * nd
        entries.append((name, shape))
    out = {}
    for name, shape in entries:
        cnt = int(np.prod(shape)) if shape else 1
        if off + 4 * cnt > len(raw):
            raise ValueError(f"{path}: truncated tensor {name}")
        out[name] = np.frombuffer(raw, "<f4", cnt, off).reshape(shape).astype(np.float32)
        off += 4 * cnt
    return out


def load_weights(net: Network, path) -> Network:
    net.load_state_dict(read_weights(path))
    return net

"""Declarative network description and its static analysis.

A :class:`NetworkSpec` is an ordered list of layer descriptors::

    {"name": "toy-64", "input": [4, 64, 64], "num_classes": 1,
     "layers": [{"type": "ConvBNReLU", "channels": 8, "stride": 2},
                {"type": "ResidualBlock", "channels": 16, "stride": 2},
                {"type": "EventConvRNN", "channels": 32, "stride": 2, "cell": "gru"},
                {"type": "SSDHead", "anchor_sizes": [16], "stem": 0}]}

:func:`describe` expands it into :class:`LayerInfo` records listing every
convolution with its shapes and the activation key that drives it.  The
same records feed parameter counting, synaptic-operation counting and the
hardware cost model, so all three agree by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .sparse import ConvLayer, conv_out_size, valid_taps

LAYER_TYPES = ("ConvBNReLU", "ResidualBlock", "EventConvRNN", "SSDHead")
CELL_GATES = {
    # variant: (gates computed from x, gates computed from y_prev)
    "gru": (3, 3),
    "lstm": (3, 3),
    "mgu": (2, 2),
    "minimal": (2, 1),
    "convlstm": (4, 4),  # standard dense ConvLSTM (i, f, o, g), no event generation
}
EVENT_CELLS = ("gru", "lstm", "mgu", "minimal")
DEFAULT_RATIOS = (0.5, 1.0, 2.0)
DEFAULT_SCALES = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))


class SpecError(ValueError):
    pass


@dataclass
class NetworkSpec:
    name: str
    input: tuple  # (C, H, W)
    num_classes: int
    layers: list

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        try:
            spec = cls(d["name"], tuple(int(v) for v in d["input"]), int(d["num_classes"]), [dict(l) for l in d["layers"]])
        except KeyError as e:
            raise SpecError(f"network spec missing field {e}") from None
        describe(spec)  # validates
        return spec

    def to_dict(self):
        return {"name": self.name, "input": list(self.input), "num_classes": self.num_classes, "layers": self.layers}

    @classmethod
    def load(cls, path) -> "NetworkSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @property
    def head(self) -> dict:
        return self.layers[-1]

    @property
    def num_anchors(self) -> int:
        h = self.head
        return len(h.get("ratios", DEFAULT_RATIOS)) * len(h.get("scales", DEFAULT_SCALES))


def preset(name: str) -> NetworkSpec:
    """Bundled network specs: ``seed-256``, ``seed-128``, ``red-like``, ``toy-64`` and variants."""
    fname = f"{name}.json"
    try:
        text = resources.files("evdet.presets").joinpath("networks", fname).read_text()
    except FileNotFoundError:
        raise SpecError(f"unknown network preset {name!r}") from None
    return NetworkSpec.from_dict(json.loads(text))


@dataclass
class ConvInfo:
    name: str
    c_in: int
    c_out: int
    k: int
    stride: int
    in_hw: tuple
    out_hw: tuple
    input_key: str  # activation driving this conv in a density trace
    bias: bool

    @property
    def params(self) -> int:
        return self.c_in * self.c_out * self.k * self.k + (self.c_out if self.bias else 0)

    @property
    def weight_count(self) -> int:
        return self.c_in * self.c_out * self.k * self.k

    def dense_synops(self) -> int:
        p = self.k // 2
        th = valid_taps(self.in_hw[0], self.k, self.stride, p, self.out_hw[0])
        tw = valid_taps(self.in_hw[1], self.k, self.stride, p, self.out_hw[1])
        return th * tw * self.c_in * self.c_out

    def taps_per_input(self) -> float:
        """Mean output fan-out (in positions) of one input pixel."""
        return self.dense_synops() / (self.c_in * self.c_out * self.in_hw[0] * self.in_hw[1])


@dataclass
class LayerInfo:
    name: str
    kind: str
    in_shape: tuple
    out_shape: tuple
    convs: list = field(default_factory=list)
    bn_channels: int = 0  # total BN channels (2 params each)
    threshold_count: int = 0  # per-neuron thresholds of event-based recurrent layers
    state_tensors: int = 0  # dense per-neuron states (h, c) kept across steps
    cell: str | None = None
    output_key: str = ""
    flagged_keys: tuple = ()  # ReLU outputs under the sparsity loss
    out_channels: int = 0

    @property
    def params(self) -> int:
        return sum(c.params for c in self.convs) + 2 * self.bn_channels + self.threshold_count

    @property
    def neurons(self) -> int:
        c, h, w = self.out_shape
        return c * h * w


def _conv(name, c_in, c_out, k, stride, in_hw, key, bias):
    out_hw = (conv_out_size(in_hw[0], k, stride, k // 2), conv_out_size(in_hw[1], k, stride, k // 2))
    return ConvInfo(name, c_in, c_out, k, stride, tuple(in_hw), out_hw, key, bias)


def describe(spec: NetworkSpec) -> list[LayerInfo]:
    if len(spec.input) != 3 or min(spec.input) <= 0:
        raise SpecError("input must be [channels, height, width] with positive entries")
    if spec.num_classes < 1:
        raise SpecError("num_classes must be >= 1")
    if not spec.layers or spec.layers[-1].get("type") != "SSDHead":
        raise SpecError("the last layer must be an SSDHead")
    shape = tuple(spec.input)
    key = "input"
    infos, rnn_keys = [], []
    for i, d in enumerate(spec.layers):
        kind = d.get("type")
        name = f"{kind_prefix(kind)}{i}"
        if kind not in LAYER_TYPES:
            raise SpecError(f"layers[{i}]: unknown type {kind!r}")
        if kind == "SSDHead":
            if i != len(spec.layers) - 1:
                raise SpecError(f"layers[{i}]: SSDHead must be last")
            break
        c_out = int(d.get("channels", 0))
        stride = int(d.get("stride", 1))
        k = int(d.get("kernel", 3))
        if c_out <= 0 or stride < 1 or k % 2 == 0:
            raise SpecError(f"layers[{i}] ({kind}): need channels > 0, stride >= 1, odd kernel")
        c_in, h, w = shape
        if kind == "ConvBNReLU":
            cv = _conv(f"{name}.conv", c_in, c_out, k, stride, (h, w), key, False)
            info = LayerInfo(name, kind, shape, (c_out, *cv.out_hw), [cv], bn_channels=c_out,
                             output_key=name, flagged_keys=(name,))
        elif kind == "ResidualBlock":
            c1 = _conv(f"{name}.conv1", c_in, c_out, k, stride, (h, w), key, False)
            c2 = _conv(f"{name}.conv2", c_out, c_out, k, 1, c1.out_hw, f"{name}.mid", False)
            convs, bn = [c1, c2], 2 * c_out
            if stride != 1 or c_in != c_out:
                convs.append(_conv(f"{name}.shortcut", c_in, c_out, 1, stride, (h, w), key, False))
                bn += c_out
            info = LayerInfo(name, kind, shape, (c_out, *c1.out_hw), convs, bn_channels=bn,
                             output_key=name, flagged_keys=(f"{name}.mid", name))
        else:
            cell = d.get("cell", "gru")
            if cell not in CELL_GATES:
                raise SpecError(f"layers[{i}]: unknown recurrent cell {cell!r}")
            gx, gy = CELL_GATES[cell]
            wx = _conv(f"{name}.wx", c_in, gx * c_out, k, stride, (h, w), key, True)
            ho, wo = wx.out_hw
            uy = _conv(f"{name}.uy", c_out, gy * c_out, k, 1, (ho, wo), name, False)
            info = LayerInfo(name, kind, shape, (c_out, ho, wo), [wx, uy],
                             threshold_count=c_out * ho * wo if cell in EVENT_CELLS else 0,
                             state_tensors=2 if cell in ("lstm", "convlstm") else 1, cell=cell, output_key=name)
            rnn_keys.append((name, (c_out, ho, wo)))
        info.out_channels = c_out
        infos.append(info)
        shape, key = info.out_shape, info.output_key
    if not rnn_keys:
        raise SpecError("the SSDHead needs at least one EventConvRNN layer to read from")
    head = spec.layers[-1]
    sizes = head.get("anchor_sizes")
    if sizes is None or len(sizes) != len(rnn_keys):
        raise SpecError(f"SSDHead.anchor_sizes must list one base size per recurrent scale ({len(rnn_keys)})")
    A = spec.num_anchors
    stem = int(head.get("stem", 0))
    for s, (src, (c, h, w)) in enumerate(rnn_keys):
        name = f"head.s{s}"
        convs, k_in, c_in = [], src, c
        for j in range(stem):
            convs.append(_conv(f"{name}.stem{j}", c_in, c, 3, 1, (h, w), k_in, True))
            k_in = f"{name}.stem{j}"
        convs.append(_conv(f"{name}.cls", c, A * spec.num_classes, 3, 1, (h, w), k_in, True))
        convs.append(_conv(f"{name}.reg", c, A * 4, 3, 1, (h, w), k_in, True))
        infos.append(LayerInfo(name, "SSDHead", (c, h, w), (A * (spec.num_classes + 4), h, w), convs,
                               output_key=name, out_channels=A * (spec.num_classes + 4)))
    return infos


def kind_prefix(kind):
    return {"ConvBNReLU": "conv", "ResidualBlock": "res", "EventConvRNN": "rnn", "SSDHead": "head"}.get(kind, "layer")


def param_count(spec: NetworkSpec) -> int:
    return sum(l.params for l in describe(spec))


def dense_synops(spec: NetworkSpec) -> int:
    """Boundary-exact multiply count of one frame with every activation nonzero."""
    return sum(c.dense_synops() for l in describe(spec) for c in l.convs)


def flagged_keys(spec: NetworkSpec) -> list[str]:
    return [k for l in describe(spec) for k in l.flagged_keys]


def recurrent_keys(spec: NetworkSpec) -> list[str]:
    return [l.output_key for l in describe(spec) if l.kind == "EventConvRNN"]


def to_conv_layer(info: ConvInfo, weight, bias) -> ConvLayer:
    return ConvLayer(weight, bias, info.stride, info.name)

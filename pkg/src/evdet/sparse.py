"""Sparse activation maps and zero-skipping convolution.

A :class:`SparseMap` stores only the nonzero activations of a ``(C, H, W)``
tensor.  :func:`sparse_conv` scatters each nonzero input into the output
positions its kernel covers, so the work is proportional to the number of
events rather than the size of the map, and it reports the exact number of
multiplications performed (synaptic operations).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


@dataclass
class SparseMap:
    shape: tuple  # (C, H, W)
    c: np.ndarray
    y: np.ndarray
    x: np.ndarray
    values: np.ndarray

    @classmethod
    def from_dense(cls, grid) -> "SparseMap":
        grid = np.asarray(grid, dtype=np.float32)
        if grid.ndim != 3:
            raise ShapeError(f"expected a (C, H, W) grid, got shape {grid.shape}")
        # nonzero over (H, W, C) yields (y, x, c)-lexicographic order directly
        y, x, c = np.nonzero(grid.transpose(1, 2, 0))
        return cls(tuple(grid.shape), c, y, x, grid[c, y, x])

    @classmethod
    def empty(cls, shape) -> "SparseMap":
        z = np.zeros(0, dtype=np.intp)
        return cls(tuple(shape), z, z, z, np.zeros(0, np.float32))

    def __len__(self):
        return len(self.values)

    @property
    def density(self) -> float:
        n = int(np.prod(self.shape))
        return len(self.values) / n if n else 0.0

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.float32)
        out[self.c, self.y, self.x] = self.values
        return out


def relu_sparsify(pre_act) -> SparseMap:
    """Keep exactly the strictly positive pre-activations."""
    pre_act = np.asarray(pre_act, dtype=np.float32)
    return SparseMap.from_dense(np.where(pre_act > 0, pre_act, 0.0).astype(np.float32))


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


@dataclass
class ConvLayer:
    """Inference-time convolution, optionally followed by a per-channel affine (folded BN)."""

    weight: np.ndarray  # [C_out, C_in, K_h, K_w]
    bias: np.ndarray  # [C_out]
    stride: int = 1
    name: str = "conv"
    fused_bn: tuple | None = None  # (scale, shift), each [C_out]

    def __post_init__(self):
        kh, kw = self.weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"{self.name}: kernel size must be odd, got {kh}x{kw}")

    @property
    def padding(self):
        return self.weight.shape[2] // 2, self.weight.shape[3] // 2

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def c_in(self):
        return self.weight.shape[1]

    def out_hw(self, h, w):
        ph, pw = self.padding
        return (conv_out_size(h, self.weight.shape[2], self.stride, ph),
                conv_out_size(w, self.weight.shape[3], self.stride, pw))

    def effective(self):
        """(weight, bias) with the affine folded in."""
        if self.fused_bn is None:
            return self.weight, self.bias
        scale, shift = self.fused_bn
        return self.weight * scale[:, None, None, None], self.bias * scale + shift

    def dense_synops(self, h: int, w: int) -> int:
        """Multiplications of a fully dense input, boundary exact."""
        kh, kw = self.weight.shape[2:]
        ph, pw = self.padding
        ho, wo = self.out_hw(h, w)
        return valid_taps(h, kh, self.stride, ph, ho) * valid_taps(w, kw, self.stride, pw, wo) * self.c_out * self.c_in


def valid_taps(n: int, k: int, stride: int, pad: int, n_out: int | None = None) -> int:
    """Number of (output, tap) pairs along one axis that land inside the input."""
    if n_out is None:
        n_out = conv_out_size(n, k, stride, pad)
    pos = np.arange(n_out)[:, None] * stride - pad + np.arange(k)[None, :]
    return int(np.count_nonzero((pos >= 0) & (pos < n)))


def sparse_conv(inp: SparseMap, layer: ConvLayer):
    """Event-driven convolution of a sparse map.

    Returns the dense pre-activation grid ``[C_out, H_out, W_out]`` (bias and
    folded BN applied everywhere) and the number of multiplications actually
    needed, counting only kernel taps that land on a valid output position.
    """
    C, H, W = inp.shape
    if C != layer.c_in:
        raise ShapeError(f"{layer.name}: input has {C} channels, layer expects {layer.c_in}")
    weight, bias = layer.effective()
    kh, kw = weight.shape[2:]
    ph, pw = layer.padding
    s = layer.stride
    ho, wo = layer.out_hw(H, W)
    co = weight.shape[0]
    acc = np.zeros((ho * wo, co), dtype=np.float64)
    synops = 0
    if len(inp):
        v = inp.values.astype(np.float64)
        for ky in range(kh):
            ny = inp.y + ph - ky
            oky = (ny % s == 0) & (ny >= 0) & (ny // s < ho)
            for kx in range(kw):
                nx = inp.x + pw - kx
                ok = oky & (nx % s == 0) & (nx >= 0) & (nx // s < wo)
                if not ok.any():
                    continue
                idx = (ny[ok] // s) * wo + nx[ok] // s
                contrib = weight[:, inp.c[ok], ky, kx].T * v[ok, None]
                np.add.at(acc, idx, contrib)
                synops += int(ok.sum()) * co
    out = acc.T.reshape(co, ho, wo) + bias[:, None, None]
    return out.astype(np.float32), synops


def sparse_synops(inp: SparseMap, layer: ConvLayer) -> int:
    """Synaptic-operation count of :func:`sparse_conv` without doing the arithmetic."""
    _, H, W = inp.shape
    kh, kw = layer.weight.shape[2:]
    ph, pw = layer.padding
    ho, wo = layer.out_hw(H, W)
    s = layer.stride

    def per_axis(coord, k, p, n_out):
        t = coord[:, None] + p - np.arange(k)[None, :]
        return ((t % s == 0) & (t >= 0) & (t // s < n_out)).sum(axis=1)

    return int((per_axis(inp.y, kh, ph, ho) * per_axis(inp.x, kw, pw, wo)).sum()) * layer.c_out


def conv2d_dense(x, weight, bias=None, stride: int = 1, pad: int | tuple | None = None):
    """Batched dense cross-correlation via sliding windows; ``x`` is [N, C, H, W]."""
    kh, kw = weight.shape[2:]
    if pad is None:
        pad = (kh // 2, kw // 2)
    elif isinstance(pad, int):
        pad = (pad, pad)
    cols = im2col(x, kh, kw, stride, pad)  # [N, Ho, Wo, C, kh, kw]
    out = np.tensordot(cols, weight, axes=([3, 4, 5], [1, 2, 3]))  # [N, Ho, Wo, Co]
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def im2col(x, kh, kw, stride, pad):
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)

"""Layer vocabulary for the numpy engine.

Every layer exposes ``forward(x)`` returning ``(out, cache)`` and
``backward(dout, cache)`` returning ``(dx, grads)`` where ``grads`` is a dict
keyed like the layer's parameters. Arrays are float32, NCHW.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an input does not fit the layer that consumes it."""

    def __init__(self, layer_index: int | None, layer: str, message: str):
        self.layer_index = layer_index
        self.layer = layer
        where = f"layer {layer_index} ({layer})" if layer_index is not None else layer
        super().__init__(f"{where}: {message}")


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    if stride != 1:
        win = win[:, :, ::stride, ::stride]
    return win


@dataclass(eq=False)
class Conv2D:
    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray  # (out,)
    stride: int = 1

    kind = "conv2d"
    prunable = True

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def units(self) -> int:
        return self.out_channels

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, in_shape: tuple[int, ...], index: int | None = None) -> tuple[int, ...]:
        kh, kw = self.kernel
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(index, "Conv2D", f"expected ({self.in_channels}, H, W), got {in_shape}")
        c, h, w = in_shape
        if h < kh or w < kw:
            raise ShapeError(index, "Conv2D", f"input {h}x{w} smaller than kernel {kh}x{kw}")
        return (self.out_channels, (h - kh) // self.stride + 1, (w - kw) // self.stride + 1)

    def forward(self, x: np.ndarray):
        kh, kw = self.kernel
        n, c = x.shape[:2]
        win = _windows(x, kh, kw, self.stride)
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        wmat = self.weight.reshape(self.out_channels, -1)
        out = cols @ wmat.T
        out += self.bias
        out = out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (x.shape, cols)

    def backward(self, dout: np.ndarray, cache):
        x_shape, cols = cache
        n, c, h, w = x_shape
        kh, kw = self.kernel
        s = self.stride
        o, ho, wo = dout.shape[1:]
        dcol_out = dout.transpose(0, 2, 3, 1).reshape(-1, o)
        wmat = self.weight.reshape(o, -1)
        dw = (dcol_out.T @ cols).reshape(self.weight.shape)
        db = dcol_out.sum(axis=0)
        dcols = (dcol_out @ wmat).reshape(n, ho, wo, c, kh, kw)
        dx = np.zeros(x_shape, dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, {"weight": dw, "bias": db}


@dataclass(eq=False)
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    kind = "dense"
    prunable = True

    @property
    def out_units(self) -> int:
        return self.weight.shape[0]

    @property
    def in_units(self) -> int:
        return self.weight.shape[1]

    @property
    def units(self) -> int:
        return self.out_units

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, in_shape, index=None):
        if len(in_shape) != 1 or in_shape[0] != self.in_units:
            raise ShapeError(index, "Dense", f"expected ({self.in_units},), got {tuple(in_shape)}")
        return (self.out_units,)

    def forward(self, x):
        out = x @ self.weight.T
        out += self.bias
        return out, x

    def backward(self, dout, x):
        dw = dout.T @ x
        db = dout.sum(axis=0)
        return dout @ self.weight, {"weight": dw, "bias": db}


@dataclass(eq=False)
class ReLU:
    kind = "relu"
    prunable = False

    def params(self):
        return {}

    def output_shape(self, in_shape, index=None):
        return tuple(in_shape)

    def forward(self, x):
        out = np.maximum(x, 0)
        return out, out

    def backward(self, dout, out):
        return dout * (out > 0), {}


@dataclass(eq=False)
class MaxPool2D:
    window: int = 2
    stride: int = 2

    kind = "maxpool2d"
    prunable = False

    def params(self):
        return {}

    def output_shape(self, in_shape, index=None):
        if len(in_shape) != 3:
            raise ShapeError(index, "MaxPool2D", f"expected (C, H, W), got {tuple(in_shape)}")
        c, h, w = in_shape
        if h < self.window or w < self.window:
            raise ShapeError(index, "MaxPool2D", f"input {h}x{w} smaller than window {self.window}")
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)

    def forward(self, x):
        k, s = self.window, self.stride
        n, c, h, w = x.shape
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        out = None
        for i in range(k):
            for j in range(k):
                part = x[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                out = part.copy() if out is None else np.maximum(out, part, out=out)
        return out, x

    def backward(self, dout, x):
        k, s = self.window, self.stride
        win = _windows(x, k, k, s)
        n, c, ho, wo = win.shape[:4]
        # first maximal element of each window receives the gradient
        arg = win.reshape(n, c, ho, wo, k * k).argmax(axis=-1)
        dx = np.zeros(x.shape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dout * hit
        return dx, {}


@dataclass(eq=False)
class Flatten:
    kind = "flatten"
    prunable = False

    def params(self):
        return {}

    def output_shape(self, in_shape, index=None):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, shape):
        return dout.reshape(shape), {}


Layer = Conv2D | Dense | ReLU | MaxPool2D | Flatten

LAYER_TYPES: dict[str, type] = {
    cls.kind: cls for cls in (Conv2D, Dense, ReLU, MaxPool2D, Flatten)
}


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def conv2d(rng, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1) -> Conv2D:
    fan_in = in_channels * kernel * kernel
    w = kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in)
    return Conv2D(w, np.zeros(out_channels, dtype=DTYPE), stride)


def dense(rng, in_units: int, out_units: int) -> Dense:
    w = kaiming_uniform(rng, (out_units, in_units), in_units)
    return Dense(w, np.zeros(out_units, dtype=DTYPE))


__all__ = [
    "DTYPE",
    "ShapeError",
    "Conv2D",
    "Dense",
    "ReLU",
    "MaxPool2D",
    "Flatten",
    "Layer",
    "LAYER_TYPES",
    "conv2d",
    "dense",
    "kaiming_uniform",
]

"""Binary checkpoint format.

Layout (all integers little-endian u32, floats little-endian f32)::

    b"TTBD" | version | num_classes | C | H | W | layer_count
    per layer: type tag, then
        conv2d:    out, in, kh, kw, stride, weight[out*in*kh*kw], bias[out]
        dense:     out, in, weight[out*in], bias[out]
        maxpool2d: window, stride
        relu, flatten: nothing
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .layers import Conv2D, Dense, Flatten, MaxPool2D, ReLU
from .model import Model

MAGIC = b"TTBD"
VERSION = 1
TAGS = {"conv2d": 1, "dense": 2, "relu": 3, "maxpool2d": 4, "flatten": 5}
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _u32(*vals: int) -> bytes:
    return struct.pack(f"<{len(vals)}I", *vals)


def dumps(model: Model) -> bytes:
    parts = [MAGIC, _u32(VERSION, model.num_classes, *model.input_shape, len(model.layers))]
    for layer in model.layers:
        parts.append(_u32(TAGS[layer.kind]))
        if isinstance(layer, Conv2D):
            o, i, kh, kw = layer.weight.shape
            parts.append(_u32(o, i, kh, kw, layer.stride))
        elif isinstance(layer, Dense):
            parts.append(_u32(*layer.weight.shape))
        elif isinstance(layer, MaxPool2D):
            parts.append(_u32(layer.window, layer.stride))
        if isinstance(layer, (Conv2D, Dense)):
            parts.append(layer.weight.astype(_F32).tobytes())
            parts.append(layer.bias.astype(_F32).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def f32(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype=_F32).astype(np.float32).reshape(shape)


def loads(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes, not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    num_classes, c, h, w, count = r.u32(5)
    layers = []
    for _ in range(count):
        tag = r.u32()
        if tag == TAGS["conv2d"]:
            o, i, kh, kw, stride = r.u32(5)
            layers.append(Conv2D(r.f32((o, i, kh, kw)), r.f32((o,)), stride))
        elif tag == TAGS["dense"]:
            o, i = r.u32(2)
            layers.append(Dense(r.f32((o, i)), r.f32((o,))))
        elif tag == TAGS["maxpool2d"]:
            layers.append(MaxPool2D(*r.u32(2)))
        elif tag == TAGS["relu"]:
            layers.append(ReLU())
        elif tag == TAGS["flatten"]:
            layers.append(Flatten())
        else:
            raise CheckpointError(f"unknown layer tag {tag}")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last layer")
    return Model(layers, (c, h, w), num_classes)


def save(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path: str | Path) -> Model:
    return loads(Path(path).read_bytes())

"""
Binary checkpoint format (all integers little-endian)::

    magic       4 bytes  b"PLM1"
    version     u32      1
    config      u32 length + UTF-8 text (ModelConfig.to_text())
    count       u32
    count x     u16 name length, name bytes, u8 rank, rank x u32 extents,
                raw float32 values
    optional optimizer section:
    tag         4 bytes  b"ADAM"
    step        u32
    count       u32
    count x     tensor entries as above, named "m/<param>" and "v/<param>"
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Optional, Tuple

import numpy as np

from .errors import (CheckpointError, CheckpointMagicError, CheckpointTruncatedError,
                     CheckpointVersionError, ShapeMismatchError)
from .model import ModelConfig, ParameterSet, head_shapes, parameter_shapes
from .tensor import Tensor
from .trainer import OptimizerState

MAGIC = b"PLM1"
OPT_TAG = b"ADAM"
VERSION = 1


def _tensor_bytes(name: str, data: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF or data.ndim > 0xFF:
        raise CheckpointError(f"cannot encode tensor {name!r}")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    return head + np.ascontiguousarray(data, dtype="<f4").tobytes()


def dumps(params: ParameterSet, config: ModelConfig, state: Optional[OptimizerState] = None) -> bytes:
    text = config.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text,
             struct.pack("<I", len(params))]
    parts += [_tensor_bytes(n, p.data) for n, p in params.items()]
    if state is not None:
        entries = [(f"m/{n}", state.m[n]) for n in state.m] + [(f"v/{n}", state.v[n]) for n in state.v]
        parts += [OPT_TAG, struct.pack("<II", state.t, len(entries))]
        parts += [_tensor_bytes(n, a) for n, a in entries]
    return b"".join(parts)


def save_checkpoint(params: ParameterSet, config: ModelConfig, path, state: Optional[OptimizerState] = None):
    with open(path, "wb") as fh:
        fh.write(dumps(params, config, state))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> Tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = bytes(self.take(n)).decode("utf-8")
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}I")
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        return name, data

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def loads(buf: bytes, config: Optional[ModelConfig] = None):
    r = _Reader(buf)
    if len(buf) < 4 or bytes(r.take(4)) != MAGIC:
        raise CheckpointMagicError("not a checkpoint: bad magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    stored = ModelConfig.from_text(bytes(r.take(n)).decode("utf-8"))
    (count,) = r.unpack("<I")
    params: ParameterSet = OrderedDict()
    for _ in range(count):
        name, data = r.tensor()
        params[name] = Tensor(data, requires_grad=True, name=name)
    state = None
    if not r.done:
        if bytes(r.take(4)) != OPT_TAG:
            raise CheckpointError("unexpected data after parameters")
        t, count = r.unpack("<II")
        state = OptimizerState(t=t)
        for _ in range(count):
            name, data = r.tensor()
            kind, _, pname = name.partition("/")
            (state.m if kind == "m" else state.v)[pname] = data
        if not r.done:
            raise CheckpointError("trailing bytes after optimizer section")
    if config is not None:
        _check_shapes(params, config)
    return params, stored, state


def _check_shapes(params: ParameterSet, config: ModelConfig):
    expected = dict(parameter_shapes(config))
    for name, p in params.items():
        if name in expected:
            want = expected[name]
        elif name.startswith("head."):
            kind = name.split(".")[1]
            nc = params[f"head.{kind}.w2"].shape[1] if kind == "fold" else None
            want = head_shapes(config, kind, nc)[name]
        else:
            raise ShapeMismatchError(f"tensor {name} is not part of the configured model")
        if p.shape != tuple(want):
            raise ShapeMismatchError(f"tensor {name}: checkpoint shape {p.shape} != configured {tuple(want)}")
    missing = set(expected) - set(params)
    if missing:
        raise ShapeMismatchError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")


def load_checkpoint(path, config: Optional[ModelConfig] = None):
    """Read a checkpoint; returns ``(params, config, optimizer_state_or_None)``.

    With ``config`` given, every tensor shape is checked against it.
    """
    with open(path, "rb") as fh:
        return loads(fh.read(), config)

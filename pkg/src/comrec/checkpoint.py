"""``CPRM`` model checkpoints.

Layout (little-endian)::

    magic     4 bytes  b"CPRM"
    version   u8       1
    kind      u8       1 = ComCNN, 2 = RecCNN
    channels  u8
    then one record per layer, in network order, until end of file:
        layer kind  u8       1 = conv, 2 = ReLU, 3 = batch norm
        dims        4 x u32  conv: (out, in, 3, 3); batch norm: (C, 1, 1, 1); ReLU: zeros
        payload     float64  conv: weights then bias;
                             batch norm: gamma, beta, running mean, running var

The architecture is rebuilt from the model kind, channel count, the first
conv's output width and the number of conv records, then every record is
checked against it.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .models import ComCNN, RecCNN
from .nn import BatchNorm2d, Conv2d, ReLU

MAGIC = b"CPRM"
VERSION = 1
_HEAD = struct.Struct("<4sBBB")
_REC = struct.Struct("<BIIII")
KINDS = {ComCNN.kind: ComCNN, RecCNN.kind: RecCNN}


class ModelKindError(FormatError):
    """Checkpoint holds a different network than the one requested."""


def _layer_arrays(layer) -> list[np.ndarray]:
    if isinstance(layer, Conv2d):
        return [layer.weight.data, layer.bias.data]
    if isinstance(layer, BatchNorm2d):
        return [layer.gamma.data, layer.beta.data, layer.running_mean, layer.running_var]
    return []


def _layer_dims(layer) -> tuple[int, int, int, int]:
    if isinstance(layer, Conv2d):
        return tuple(layer.weight.data.shape)
    if isinstance(layer, BatchNorm2d):
        return (layer.gamma.data.shape[0], 1, 1, 1)
    return (0, 0, 0, 0)


def to_bytes(model) -> bytes:
    parts = [_HEAD.pack(MAGIC, VERSION, model.kind, model.channels)]
    for layer in model.layers:
        parts.append(_REC.pack(layer.kind, *_layer_dims(layer)))
        for arr in _layer_arrays(layer):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def _records(data: bytes, pos: int):
    out = []
    while pos < len(data):
        if pos + _REC.size > len(data):
            raise FormatError(f"truncated layer record at byte {pos}")
        kind, *dims = _REC.unpack_from(data, pos)
        pos += _REC.size
        out.append((kind, tuple(dims), pos))
        if kind == Conv2d.kind:
            pos += 8 * (int(np.prod(dims)) + dims[0])
        elif kind == BatchNorm2d.kind:
            pos += 8 * 4 * dims[0]
        elif kind != ReLU.kind:
            raise FormatError(f"unknown layer kind {kind} at byte {pos - _REC.size}")
    if pos != len(data):
        raise FormatError("truncated layer payload")
    return out


def from_bytes(data: bytes, expected=None):
    """Rebuild a model. ``expected`` (ComCNN or RecCNN) enforces the kind."""
    if len(data) < _HEAD.size:
        raise FormatError("checkpoint shorter than its header")
    magic, version, kind, channels = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if kind not in KINDS:
        raise FormatError(f"unknown model kind {kind}")
    cls = KINDS[kind]
    if expected is not None and cls is not expected:
        raise ModelKindError(
            f"checkpoint holds a {cls.__name__}, expected {expected.__name__}")

    records = _records(data, _HEAD.size)
    convs = [r for r in records if r[0] == Conv2d.kind]
    if not convs:
        raise FormatError("checkpoint has no conv layers")
    width = convs[0][1][0]
    if cls is ComCNN:
        model = ComCNN(channels, width, rng=None)
    else:
        model = RecCNN(channels, width, depth=len(convs), rng=None)
    if len(records) != len(model.layers):
        raise FormatError(f"expected {len(model.layers)} layers, found {len(records)}")
    for layer, (lkind, dims, pos) in zip(model.layers, records):
        if lkind != layer.kind or dims != _layer_dims(layer):
            raise FormatError(f"layer record {lkind}{dims} does not fit {cls.__name__}")
        for arr in _layer_arrays(layer):
            arr[...] = np.frombuffer(data, dtype="<f8", count=arr.size, offset=pos).reshape(arr.shape)
            pos += 8 * arr.size
    return model


def save(model, path) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(model))


def load(path, expected=None):
    with open(path, "rb") as f:
        return from_bytes(f.read(), expected)

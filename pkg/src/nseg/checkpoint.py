"""Binary checkpoint format.

Layout::

    b"NSEG1\\n"
    b"<depth> <base_channels> <kernel> <input_channels> <prune_level>\\n"
    repeated until EOF, in canonical parameter order:
        u16 LE   name length
        bytes    UTF-8 name, e.g. "x0_1/unit0/conv"
        u8       number of dims
        u32 LE   each dim
        f32 LE   raw values, row-major

Batch-norm running statistics are stored as named entries right after the
gamma/beta of their unit so a loaded model can run in inference mode.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

from .errors import LoadError
from .network import GraphConfig, NestedUNet, parameter_names

MAGIC = b"NSEG1\n"


def dumps(model: NestedUNet) -> bytes:
    cfg = model.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = f"{cfg.depth} {cfg.base_channels} {cfg.kernel} {cfg.input_channels} {model.prune_level}\n"
    buf.write(header.encode("ascii"))
    for name in parameter_names(cfg, model.prune_level, include_buffers=True):
        arr = model.params[name] if name in model.params else model.buffers[name]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes, deep_supervision: bool = True, dtype=np.float32) -> NestedUNet:
    if not data.startswith(MAGIC):
        raise LoadError("not an NSEG1 checkpoint (bad magic)")
    pos = len(MAGIC)
    end = data.find(b"\n", pos)
    if end < 0:
        raise LoadError("truncated checkpoint header")
    try:
        depth, base, kernel, in_ch, level = (int(v) for v in data[pos:end].split())
    except ValueError as exc:
        raise LoadError(f"malformed checkpoint header {data[pos:end]!r}") from exc
    pos = end + 1
    cfg = GraphConfig(depth=depth, base_channels=base, kernel=kernel,
                      input_channels=in_ch, deep_supervision=deep_supervision)
    arrays: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape))
            if pos + 4 * count > len(data):
                raise LoadError(f"truncated data for {name}")
            arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(dtype)
            pos += 4 * count
    except struct.error as exc:
        raise LoadError("truncated checkpoint entry") from exc

    learned = parameter_names(cfg, level)
    expected = parameter_names(cfg, level, include_buffers=True)
    if list(arrays) != expected:
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise LoadError(f"checkpoint entries do not match the header: missing {missing[:3]}, unexpected {extra[:3]}")
    learned_set = set(learned)
    params = {k: v for k, v in arrays.items() if k in learned_set}
    buffers = {k: v for k, v in arrays.items() if k not in learned_set}
    return NestedUNet(cfg, params, buffers, prune_level=level)


def save(model: NestedUNet, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(dumps(model))


def load(path: str | os.PathLike, deep_supervision: bool = True, dtype=np.float32) -> NestedUNet:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data, deep_supervision=deep_supervision, dtype=dtype)

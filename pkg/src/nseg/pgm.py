"""Minimal binary PGM (P5, 8-bit) reader and writer."""
from __future__ import annotations

import os

import numpy as np

from .errors import LoadError


def _tokens(data: bytes, count: int):
    """Yield ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last one.
    """
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise LoadError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos


def decode_pgm(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic != b"P5":
        raise LoadError(f"unsupported PNM type {magic!r}; only binary P5 is read")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise LoadError("malformed PGM header") from exc
    if not 0 < maxval < 256:
        raise LoadError(f"only 8-bit PGM is supported (maxval {maxval})")
    pos += 1
    if len(data) - pos < w * h:
        raise LoadError(f"PGM pixel data truncated: need {w * h} bytes, have {len(data) - pos}")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("PGM pixels must be a 2-D uint8 array")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    try:
        return decode_pgm(data)
    except LoadError as exc:
        raise LoadError(f"{path}: {exc}") from None


def write_pgm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_pgm(pixels))

"""Binary PGM (P5, maxval 255) reading and writing."""

from __future__ import annotations

import os

import numpy as np

from .codec import as_image
from .errors import IngestionError, ShapeError


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            break
        tokens.append(data[start:pos])
    return tokens, pos


def parse_pgm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    tokens, pos = _tokens(data, 4)
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise IngestionError(f"{name}: not a binary PGM (P5) file")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise IngestionError(f"{name}: malformed PGM header") from None
    if width < 1 or height < 1:
        raise IngestionError(f"{name}: empty image {width}x{height}")
    if maxval != 255:
        raise IngestionError(f"{name}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace after maxval
    body = data[pos:pos + width * height]
    if len(body) != width * height:
        raise IngestionError(
            f"{name}: truncated, expected {width * height} samples, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(1, height, width).copy()


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into a ``(1, h, w)`` uint8 image."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror or exc}") from exc
    return parse_pgm(data, os.fspath(path))


def write_pgm(path, img) -> None:
    img = as_image(img)
    if img.shape[0] != 1:
        raise ShapeError(f"PGM holds one channel, image has {img.shape[0]}")
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())

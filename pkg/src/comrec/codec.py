"""JPEG-like 8x8 block-DCT codec with exp-Golomb run/level entropy coding,
a lossless identity codec, and the ``CPRC`` bitstream container.

Pipeline per channel: edge-replicate padding to multiples of 8, level shift
by -128, orthonormal 2-D DCT-II, quantisation with a quality-scaled JPEG
luminance table, zigzag scan, then per block a sequence of
``ue(run + 1), level`` pairs closed by an end-of-block symbol ``ue(0)``.
Levels are nonzero and use the folded mapping of
:func:`comrec.bitio.nonzero_to_unsigned`. All rounding is half away from zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .bitio import BitReader, BitWriter
from .errors import DecodeError, FormatError, ParameterError, ShapeError

MAGIC = b"CPRC"
VERSION_DIRECT = 1   # payload holds the image at header dims
VERSION_COMPACT = 2  # payload holds the half-resolution compact image
_HEADER = struct.Struct("<4sBBIIBQ")
HEADER_BITS = 8 * _HEADER.size
LOSSLESS_QF = 0
BLOCK = 8

# JPEG Annex K luminance table, natural (row-major) order
BASE_LUMA_TABLE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.int64)


def _zigzag_order() -> np.ndarray:
    cells = [(i, j) for i in range(BLOCK) for j in range(BLOCK)]
    cells.sort(key=lambda ij: (ij[0] + ij[1], ij[0] if (ij[0] + ij[1]) % 2 else -ij[0]))
    return np.array([i * BLOCK + j for i, j in cells], dtype=np.int64)


ZIGZAG = _zigzag_order()             # zigzag position -> natural index
UNZIGZAG = np.argsort(ZIGZAG)        # natural index -> zigzag position


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def as_image(img) -> np.ndarray:
    """Coerce to a uint8 ``(channels, height, width)`` array."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"image must be (h, w) or (c, h, w), got {arr.shape}")
    if arr.dtype != np.uint8:
        raise ShapeError(f"image samples must be uint8, got {arr.dtype}")
    if min(arr.shape) < 1:
        raise ShapeError(f"image has an empty dimension: {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# quantisation tables and transforms
# --------------------------------------------------------------------------

def qf_to_qtable(qf: int) -> np.ndarray:
    """Quality factor 1..100 -> 64 quantiser steps in zigzag order."""
    if not isinstance(qf, (int, np.integer)) or not 1 <= qf <= 100:
        raise ParameterError(f"quality factor must be an integer in 1..100, got {qf!r}")
    scale = 5000 / qf if qf < 50 else 200 - 2 * qf
    table = np.clip(round_half_away(BASE_LUMA_TABLE * scale / 100.0), 1, 255).astype(np.int64)
    return table[ZIGZAG]


def _dct_matrix() -> np.ndarray:
    k = np.arange(BLOCK)[:, None]
    n = np.arange(BLOCK)[None, :]
    d = np.cos(np.pi * (2 * n + 1) * k / (2 * BLOCK)) * np.sqrt(2.0 / BLOCK)
    d[0] /= np.sqrt(2.0)
    return d


DCT_MATRIX = _dct_matrix()


def dct8x8(block: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Orthonormal 2-D DCT-II (or its inverse, DCT-III) over the last two axes."""
    d = DCT_MATRIX
    if inverse:
        return d.T @ block @ d
    return d @ block @ d.T


def quantize(coeffs: np.ndarray, table_zigzag: np.ndarray) -> np.ndarray:
    """Natural-order coefficients ``(..., 8, 8)`` -> integer levels."""
    steps = table_zigzag[UNZIGZAG].reshape(BLOCK, BLOCK)
    return round_half_away(coeffs / steps).astype(np.int64)


def dequantize(levels: np.ndarray, table_zigzag: np.ndarray) -> np.ndarray:
    steps = table_zigzag[UNZIGZAG].reshape(BLOCK, BLOCK)
    return levels * steps.astype(np.float64)


# --------------------------------------------------------------------------
# entropy coding
# --------------------------------------------------------------------------

def _write_block(writer: BitWriter, zz: list[int]) -> None:
    last = -1
    for k, level in enumerate(zz):
        if level:
            writer.write_ue(k - last)  # run of zeros + 1
            writer.write_nonzero(level)
            last = k
    writer.write_ue(0)


def entropy_encode(blocks: np.ndarray) -> tuple[bytes, int]:
    """Zigzag-ordered integer blocks ``(nblocks, 64)`` -> (payload, bit_count)."""
    writer = BitWriter()
    for zz in np.asarray(blocks, dtype=np.int64).reshape(-1, 64).tolist():
        _write_block(writer, zz)
    return writer.getvalue(), writer.bit_count


def entropy_decode(payload: bytes, bit_count: int, nblocks: int) -> np.ndarray:
    """Inverse of :func:`entropy_encode`; raises :class:`DecodeError` with the
    bit offset on truncated or inconsistent payloads."""
    reader = BitReader(payload, bit_count)
    out = np.zeros((nblocks, 64), dtype=np.int64)
    for b in range(nblocks):
        pos = 0
        while True:
            at = reader.pos
            sym = reader.read_ue()
            if sym == 0:
                break
            pos += sym - 1
            if pos >= 64:
                raise DecodeError(f"run overflows block {b}", at)
            out[b, pos] = reader.read_nonzero()
            pos += 1
    if reader.pos != reader.bit_count:
        raise DecodeError("trailing bits after last block", reader.pos)
    return out


# --------------------------------------------------------------------------
# codecs
# --------------------------------------------------------------------------

def _pad_to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return np.pad(plane, ((0, -h % BLOCK), (0, -w % BLOCK)), mode="edge")


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).swapaxes(1, 2)


def _from_blocks(blocks: np.ndarray) -> np.ndarray:
    nby, nbx = blocks.shape[:2]
    return blocks.swapaxes(1, 2).reshape(nby * BLOCK, nbx * BLOCK)


class BlockDCTCodec:
    """Lossy JPEG-like codec at a fixed quality factor."""

    def __init__(self, qf: int):
        self.table = qf_to_qtable(qf)
        self.qf = int(qf)

    def encode_payload(self, img: np.ndarray) -> tuple[bytes, int]:
        img = as_image(img)
        levels = []
        for plane in img:
            blocks = _to_blocks(_pad_to_blocks(plane).astype(np.float64) - 128.0)
            q = quantize(dct8x8(blocks), self.table)
            levels.append(q.reshape(-1, 64)[:, ZIGZAG])
        return entropy_encode(np.concatenate(levels))

    def decode_payload(self, payload: bytes, bit_count: int, channels: int,
                       height: int, width: int) -> np.ndarray:
        nby, nbx = -(-height // BLOCK), -(-width // BLOCK)
        per_plane = nby * nbx
        levels = entropy_decode(payload, bit_count, channels * per_plane)
        out = np.empty((channels, height, width), dtype=np.uint8)
        for c in range(channels):
            zz = levels[c * per_plane:(c + 1) * per_plane]
            nat = zz[:, UNZIGZAG].reshape(nby, nbx, BLOCK, BLOCK)
            plane = _from_blocks(dct8x8(dequantize(nat, self.table), inverse=True)) + 128.0
            plane = round_half_away(np.clip(plane, 0.0, 255.0))
            out[c] = plane[:height, :width].astype(np.uint8)
        return out


class IdentityCodec:
    """Lossless pass-through: raw 8-bit samples."""

    qf = LOSSLESS_QF

    def encode_payload(self, img: np.ndarray) -> tuple[bytes, int]:
        data = as_image(img).tobytes()
        return data, 8 * len(data)

    def decode_payload(self, payload: bytes, bit_count: int, channels: int,
                       height: int, width: int) -> np.ndarray:
        n = channels * height * width
        if bit_count != 8 * n or len(payload) != n:
            raise DecodeError(f"identity payload must hold {n} bytes", min(bit_count, 8 * n))
        return np.frombuffer(payload, dtype=np.uint8).reshape(channels, height, width).copy()


def codec_for(qf: int):
    return IdentityCodec() if qf == LOSSLESS_QF else BlockDCTCodec(qf)


# --------------------------------------------------------------------------
# bitstream container
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Bitstream:
    """Header plus entropy-coded payload.

    ``width``/``height`` are the dims the receiver reconstructs. For
    ``VERSION_COMPACT`` streams the payload holds a ``ceil(h/2) x ceil(w/2)``
    image instead.
    """

    version: int
    channels: int
    width: int
    height: int
    qf: int
    payload: bytes
    bit_count: int

    def __post_init__(self):
        if self.bit_count > 8 * len(self.payload):
            raise FormatError("bit_count exceeds payload length")

    @property
    def payload_size(self) -> tuple[int, int]:
        """(height, width) of the image carried in the payload."""
        if self.version == VERSION_COMPACT:
            return -(-self.height // 2), -(-self.width // 2)
        return self.height, self.width

    @property
    def total_bits(self) -> int:
        return HEADER_BITS + self.bit_count

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, self.version, self.channels, self.width,
                            self.height, self.qf, self.bit_count)
        return head + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise FormatError(f"stream shorter than the {_HEADER.size}-byte header")
        magic, version, channels, width, height, qf, bit_count = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version not in (VERSION_DIRECT, VERSION_COMPACT):
            raise FormatError(f"unsupported version {version}")
        if channels < 1 or width < 1 or height < 1:
            raise FormatError("header has an empty dimension")
        if qf > 100:
            raise FormatError(f"quality factor {qf} out of range")
        payload = data[_HEADER.size:]
        if len(payload) != -(-bit_count // 8):
            raise FormatError(
                f"payload is {len(payload)} bytes, header announces {bit_count} bits")
        return cls(version, channels, width, height, qf, bytes(payload), bit_count)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Bitstream":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def encode_image(img, qf: int, version: int = VERSION_DIRECT,
                 dims: tuple[int, int] | None = None) -> Bitstream:
    """Encode ``img`` at quality ``qf`` (0 selects the lossless identity codec).

    ``dims`` = (height, width) recorded in the header; defaults to the image's
    own size. For compact streams it must be the original full-size dims.
    """
    img = as_image(img)
    c, h, w = img.shape
    height, width = dims if dims is not None else (h, w)
    bs_codec = codec_for(qf)
    payload, bits = bs_codec.encode_payload(img)
    bs = Bitstream(version, c, width, height, bs_codec.qf, payload, bits)
    if bs.payload_size != (h, w):
        raise ShapeError(f"image {h}x{w} does not match header payload size {bs.payload_size}")
    return bs


def decode_image(bs: Bitstream) -> np.ndarray:
    """Decode the payload image (compact-size for compact streams)."""
    h, w = bs.payload_size
    return codec_for(bs.qf).decode_payload(bs.payload, bs.bit_count, bs.channels, h, w)


def bits_per_pixel(bs: Bitstream, original_w: int, original_h: int) -> float:
    """(header + payload bits) / original pixel count."""
    if original_w <= 0 or original_h <= 0:
        raise ParameterError(f"original dims must be positive, got {original_w}x{original_h}")
    return bs.total_bits / (original_w * original_h)

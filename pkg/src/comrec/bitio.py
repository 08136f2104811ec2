"""Bit-level writer/reader with exponential-Golomb helpers."""

from __future__ import annotations

from .errors import DecodeError, ParameterError


def ue_length(value: int) -> int:
    """Length in bits of the unsigned exp-Golomb code for ``value``."""
    if value < 0:
        raise ParameterError(f"unsigned exp-Golomb needs value >= 0, got {value}")
    return 2 * (value + 1).bit_length() - 1


def nonzero_to_unsigned(level: int) -> int:
    """Map a nonzero level onto 0, 1, 2, ...: +1 -> 0, -1 -> 1, +2 -> 2, ..."""
    if level == 0:
        raise ParameterError("level must be nonzero")
    return 2 * (abs(level) - 1) + (level < 0)


def unsigned_to_nonzero(code: int) -> int:
    mag = code // 2 + 1
    return -mag if code & 1 else mag


class BitWriter:
    def __init__(self):
        self._chunks: list[str] = []
        self.bit_count = 0

    def write_bits(self, value: int, nbits: int) -> None:
        if nbits:
            self._chunks.append(format(value, f"0{nbits}b"))
            self.bit_count += nbits

    def write_ue(self, value: int) -> None:
        n = (value + 1).bit_length()
        self.write_bits(value + 1, 2 * n - 1)

    def write_nonzero(self, level: int) -> None:
        self.write_ue(nonzero_to_unsigned(level))

    def getvalue(self) -> bytes:
        """Payload bytes, zero-padded to a byte boundary."""
        bits = "".join(self._chunks)
        if not bits:
            return b""
        pad = -len(bits) % 8
        bits += "0" * pad
        return int(bits, 2).to_bytes(len(bits) // 8, "big")


class BitReader:
    def __init__(self, data: bytes, bit_count: int | None = None):
        total = 8 * len(data)
        if bit_count is None:
            bit_count = total
        if bit_count > total:
            raise DecodeError(f"bit count {bit_count} exceeds payload size {total}", total)
        self._bits = format(int.from_bytes(data, "big"), f"0{total}b") if data else ""
        self.bit_count = bit_count
        self.pos = 0

    def read_bits(self, nbits: int) -> int:
        end = self.pos + nbits
        if end > self.bit_count:
            raise DecodeError("unexpected end of payload", self.pos)
        value = int(self._bits[self.pos:end], 2) if nbits else 0
        self.pos = end
        return value

    def read_ue(self) -> int:
        start = self.pos
        one = self._bits.find("1", start, self.bit_count)
        if one < 0:
            raise DecodeError("unterminated exp-Golomb prefix", start)
        zeros = one - start
        end = one + zeros + 1
        if end > self.bit_count:
            raise DecodeError("truncated exp-Golomb suffix", start)
        self.pos = end
        return int(self._bits[one:end], 2) - 1

    def read_nonzero(self) -> int:
        return unsigned_to_nonzero(self.read_ue())

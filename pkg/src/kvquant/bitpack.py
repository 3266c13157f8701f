"""Pack N-bit codes into M-bit words, first code in the most significant bits.

A group of ``M // N`` codes ``v`` becomes the word ``sum(v[i] << (M - N*(1+i)))``;
unpacking shifts right by the same amount and masks with ``2**N - 1``.
The tail group is zero-padded and ``logical_count`` records how many codes
are real.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import ConfigurationError, DomainError, FormatError

WORD_DTYPES = {8: np.uint8, 16: np.uint16, 32: np.uint32}
DEFAULT_WORD_BITS = 8

SEGMENT_MAGIC = b"KVQP"
SEGMENT_VERSION = 1
_SEGMENT_HEADER = struct.Struct("<4sIBBHQ")


def check_widths(code_bits: int, word_bits: int) -> None:
    if word_bits not in WORD_DTYPES:
        raise ConfigurationError(f"word size must be one of {sorted(WORD_DTYPES)}, got {word_bits}")
    if code_bits < 1 or word_bits % code_bits:
        raise ConfigurationError(f"code width {code_bits} does not divide word width {word_bits}")


def word_count(logical_count: int, code_bits: int, word_bits: int) -> int:
    per_word = word_bits // code_bits
    return -(-logical_count // per_word)


def _shifts(code_bits: int, word_bits: int) -> np.ndarray:
    per_word = word_bits // code_bits
    return np.array([word_bits - code_bits * (1 + i) for i in range(per_word)], dtype=np.uint64)


@dataclass(frozen=True, eq=False)
class PackedBuffer:
    words: np.ndarray
    code_bits: int
    word_bits: int
    logical_count: int

    def __post_init__(self):
        check_widths(self.code_bits, self.word_bits)
        expected = word_count(self.logical_count, self.code_bits, self.word_bits)
        if self.words.ndim != 1 or self.words.size != expected:
            raise DomainError(
                f"{self.logical_count} codes of {self.code_bits} bits need {expected} "
                f"{self.word_bits}-bit words, got {self.words.size}"
            )
        if self.words.dtype != WORD_DTYPES[self.word_bits]:
            raise DomainError(f"words must be {np.dtype(WORD_DTYPES[self.word_bits])}, got {self.words.dtype}")
        self.words.setflags(write=False)

    @property
    def codes_per_word(self) -> int:
        return self.word_bits // self.code_bits

    @property
    def nbytes(self) -> int:
        return self.words.size * self.word_bits // 8

    def __eq__(self, other) -> bool:
        if not isinstance(other, PackedBuffer):
            return NotImplemented
        return (
            (self.code_bits, self.word_bits, self.logical_count)
            == (other.code_bits, other.word_bits, other.logical_count)
            and np.array_equal(self.words, other.words)
        )


def pack(codes, code_bits: int, word_bits: int = DEFAULT_WORD_BITS) -> PackedBuffer:
    check_widths(code_bits, word_bits)
    flat = np.asarray(codes).ravel()
    if flat.size and (flat.min() < 0 or flat.max() >= 2**code_bits):
        bad = int(flat[(flat < 0) | (flat >= 2**code_bits)][0])
        raise DomainError(f"code {bad} does not fit in {code_bits} bits")
    per_word = word_bits // code_bits
    n_words = word_count(flat.size, code_bits, word_bits)
    groups = np.zeros(n_words * per_word, dtype=np.uint64)
    groups[: flat.size] = flat
    groups = groups.reshape(n_words, per_word) << _shifts(code_bits, word_bits)
    words = np.bitwise_or.reduce(groups, axis=1) if per_word > 1 else groups[:, 0]
    return PackedBuffer(words.astype(WORD_DTYPES[word_bits]), code_bits, word_bits, int(flat.size))


def unpack(buf: PackedBuffer) -> np.ndarray:
    """Return the ``logical_count`` codes as a uint8 (or wider) array."""
    mask = np.uint64(2**buf.code_bits - 1)
    wide = buf.words.astype(np.uint64)[:, None] >> _shifts(buf.code_bits, buf.word_bits)
    codes = (wide & mask).ravel()[: buf.logical_count]
    return codes.astype(np.uint8 if buf.code_bits <= 8 else np.uint32)


# ---------------------------------------------------------------------------
# KVQP segment file format
# ---------------------------------------------------------------------------


def dump_packed(fh: BinaryIO, buf: PackedBuffer, alpha, beta) -> None:
    alpha = np.asarray(alpha, dtype="<f4").ravel()
    beta = np.asarray(beta, dtype="<f4").ravel()
    if alpha.shape != beta.shape:
        raise DomainError("alpha and beta lengths differ")
    fh.write(_SEGMENT_HEADER.pack(SEGMENT_MAGIC, SEGMENT_VERSION, buf.code_bits, buf.word_bits, 0, buf.logical_count))
    fh.write(buf.words.astype(np.dtype(WORD_DTYPES[buf.word_bits]).newbyteorder("<")).tobytes())
    fh.write(struct.pack("<Q", alpha.size))
    fh.write(alpha.tobytes())
    fh.write(beta.tobytes())


def _read_exact(fh: BinaryIO, nbytes: int, what: str, base: int) -> bytes:
    data = fh.read(nbytes)
    if len(data) != nbytes:
        raise FormatError(f"truncated {what}: wanted {nbytes} bytes, got {len(data)}", base + len(data))
    return data


def load_packed(fh: BinaryIO) -> tuple[PackedBuffer, np.ndarray, np.ndarray]:
    """Read one segment; returns ``(buffer, alpha, beta)``."""
    pos = fh.tell() if fh.seekable() else 0
    header = _read_exact(fh, _SEGMENT_HEADER.size, "segment header", pos)
    magic, version, n_bits, m_bits, _reserved, count = _SEGMENT_HEADER.unpack(header)
    if magic != SEGMENT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {SEGMENT_MAGIC!r}", pos)
    if version != SEGMENT_VERSION:
        raise FormatError(f"unsupported segment version {version}", pos + 4)
    try:
        check_widths(n_bits, m_bits)
    except ConfigurationError as exc:
        raise FormatError(str(exc), pos + 8) from None
    pos += _SEGMENT_HEADER.size
    n_words = word_count(count, n_bits, m_bits)
    dtype = np.dtype(WORD_DTYPES[m_bits]).newbyteorder("<")
    raw = _read_exact(fh, n_words * dtype.itemsize, "packed words", pos)
    words = np.frombuffer(raw, dtype=dtype).astype(WORD_DTYPES[m_bits])
    pos += len(raw)
    (d,) = struct.unpack("<Q", _read_exact(fh, 8, "stats length", pos))
    pos += 8
    alpha = np.frombuffer(_read_exact(fh, 4 * d, "alpha vector", pos), dtype="<f4").astype(np.float32)
    pos += 4 * d
    beta = np.frombuffer(_read_exact(fh, 4 * d, "beta vector", pos), dtype="<f4").astype(np.float32)
    return PackedBuffer(words, n_bits, m_bits, count), alpha, beta

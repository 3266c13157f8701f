"""Uniform b-bit integer quantization with channel-wise or global ranges.

``code = round((x - alpha) * (2**b - 1) / (beta - alpha))`` with ties rounded
away from zero and the result clamped to ``[0, 2**b - 1]``; dequantization is
``code * (beta - alpha) / (2**b - 1) + alpha``.  A channel with
``beta == alpha`` stores code 0 and dequantizes to ``alpha`` exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import bitpack
from .errors import ConfigurationError, DomainError
from .tensor_core import DenseMatrix

SUPPORTED_BITS = (1, 2, 4, 8)


class Mode(str, enum.Enum):
    CHANNEL_WISE = "channel_wise"
    GLOBAL = "global"


@dataclass(frozen=True, eq=False)
class ChannelStats:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float32).ravel()
        beta = np.array(self.beta, dtype=np.float32).ravel()
        if alpha.shape != beta.shape:
            raise DomainError(f"alpha has {alpha.size} channels but beta has {beta.size}")
        if np.any(alpha > beta):
            raise DomainError("channel stats need alpha <= beta in every channel")
        alpha.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def d(self) -> int:
        return self.alpha.size

    @property
    def nbytes(self) -> int:
        return self.alpha.nbytes + self.beta.nbytes

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChannelStats):
            return NotImplemented
        return np.array_equal(self.alpha, other.alpha) and np.array_equal(self.beta, other.beta)


@dataclass(frozen=True)
class QuantizationConfig:
    bits: int = 1
    mode: Mode = Mode.CHANNEL_WISE
    word_bits: int = bitpack.DEFAULT_WORD_BITS

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.bits not in SUPPORTED_BITS:
            raise ConfigurationError(f"bitwidth must be one of {SUPPORTED_BITS}, got {self.bits}")
        bitpack.check_widths(self.bits, self.word_bits)


@dataclass(frozen=True, eq=False)
class QuantizedSegment:
    """Packed codes of an ``n x d`` block (row-major, d contiguous) plus its ranges."""

    codes: bitpack.PackedBuffer
    stats: ChannelStats
    n: int
    d: int
    bits: int

    def __post_init__(self):
        if self.codes.code_bits != self.bits:
            raise DomainError(f"codes are {self.codes.code_bits}-bit but segment says {self.bits}")
        if self.codes.logical_count != self.n * self.d:
            raise DomainError(f"segment {self.n}x{self.d} holds {self.codes.logical_count} codes")
        if self.stats.d != self.d:
            raise DomainError(f"stats cover {self.stats.d} channels, segment has {self.d}")

    @property
    def levels(self) -> int:
        return 2**self.bits - 1

    @property
    def step(self) -> np.ndarray:
        """Per-channel dequantization step ``(beta - alpha) / (2**b - 1)``."""
        return ((self.stats.beta.astype(np.float64) - self.stats.alpha) / self.levels).astype(np.float32)

    @property
    def code_bytes(self) -> int:
        return self.codes.nbytes

    @property
    def nbytes(self) -> int:
        return self.codes.nbytes + self.stats.nbytes

    def unpacked(self) -> np.ndarray:
        return bitpack.unpack(self.codes).reshape(self.n, self.d)


def _as_matrix(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float32)
    if arr.ndim != 2:
        raise DomainError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def compute_stats(m, mode: Mode | str = Mode.CHANNEL_WISE) -> ChannelStats:
    arr = _as_matrix(m)
    if arr.size == 0:
        raise DomainError("cannot compute ranges of an empty matrix")
    if Mode(mode) is Mode.CHANNEL_WISE:
        return ChannelStats(arr.min(axis=0), arr.max(axis=0))
    d = arr.shape[1]
    return ChannelStats(np.full(d, arr.min()), np.full(d, arr.max()))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_codes(m, stats: ChannelStats, bits: int) -> np.ndarray:
    """Unpacked integer codes, shape of ``m``."""
    arr = _as_matrix(m)
    if arr.shape[1] != stats.d:
        raise DomainError(f"matrix has {arr.shape[1]} columns, stats cover {stats.d}")
    levels = 2**bits - 1
    alpha = stats.alpha.astype(np.float64)
    width = stats.beta.astype(np.float64) - alpha
    live = width > 0
    scaled = np.zeros(arr.shape, dtype=np.float64)
    scaled[:, live] = (arr[:, live] - alpha[live]) * levels / width[live]
    codes = np.clip(round_half_away(scaled), 0, levels)
    return codes.astype(np.uint8 if bits <= 8 else np.uint32)


def quantize(m, stats: ChannelStats, bits: int, word_bits: int = bitpack.DEFAULT_WORD_BITS) -> QuantizedSegment:
    if bits not in SUPPORTED_BITS:
        raise ConfigurationError(f"bitwidth must be one of {SUPPORTED_BITS}, got {bits}")
    codes = quantize_codes(m, stats, bits)
    n, d = codes.shape
    return QuantizedSegment(bitpack.pack(codes, bits, word_bits), stats, n, d, bits)


def quantize_matrix(m, config: QuantizationConfig = QuantizationConfig()) -> QuantizedSegment:
    """Compute ranges from ``m`` itself and quantize it."""
    return quantize(m, compute_stats(m, config.mode), config.bits, config.word_bits)


def dequantize_codes(codes: np.ndarray, stats: ChannelStats, bits: int) -> np.ndarray:
    alpha = stats.alpha.astype(np.float64)
    width = stats.beta.astype(np.float64) - alpha
    out = codes.astype(np.float64) * (width / (2**bits - 1)) + alpha
    return out.astype(np.float32)


def dequantize(seg: QuantizedSegment) -> DenseMatrix:
    return DenseMatrix(dequantize_codes(seg.unpacked(), seg.stats, seg.bits))


def frobenius_error(m, seg: QuantizedSegment) -> float:
    diff = np.asarray(m, dtype=np.float64) - np.asarray(dequantize(seg), dtype=np.float64)
    return float(np.linalg.norm(diff))

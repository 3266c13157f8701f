"""Hybrid per-head KV cache: a frozen quantized prefill segment plus a float32 tail.

The prefill ("visual") tokens are quantized once when the cache is built and
never touched again.  Tokens produced while decoding are appended to the
full-precision tail.  A decode step scores both parts, calibrates only the
quantized part, and runs a single softmax over the concatenation.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bitpack
from .calibration import IDENTITY, CalibrationParams, CalibrationWarning, calibrate_rows, softmax
from .errors import DomainError, FormatError
from .kernels import KernelConfig, PackedHeads, qk_scores, wv_output
from .quantizer import ChannelStats, QuantizationConfig, QuantizedSegment, dequantize, quantize_matrix
from .tensor_core import dump_tensor, load_tensor

CACHE_MAGIC = b"KVQC"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIQQIIQQdd")


@dataclass(frozen=True)
class MemoryReport:
    heads: int
    n_vis: int
    n_txt: int
    d: int
    bits: int
    code_bytes: int
    stats_bytes: int
    tail_bytes: int

    @property
    def quantized_bytes(self) -> int:
        return self.code_bytes + self.stats_bytes

    @property
    def total_bytes(self) -> int:
        return self.quantized_bytes + self.tail_bytes

    @property
    def fp32_bytes(self) -> int:
        """Footprint of the same tokens held entirely in float32."""
        return 2 * self.heads * (self.n_vis + self.n_txt) * self.d * 4

    @property
    def fp32_vis_payload(self) -> int:
        return 2 * self.heads * self.n_vis * self.d * 4

    def as_dict(self) -> dict:
        return {
            "code_bytes": self.code_bytes,
            "stats_bytes": self.stats_bytes,
            "quantized_bytes": self.quantized_bytes,
            "tail_bytes": self.tail_bytes,
            "total_bytes": self.total_bytes,
            "fp32_bytes": self.fp32_bytes,
        }


def expected_quantized_bytes(heads: int, n_vis: int, d: int, bits: int, word_bits: int = 8) -> int:
    """Codes for K and V padded to whole words, plus four float32 range vectors per head."""
    if n_vis == 0:
        return 0
    words = bitpack.word_count(n_vis * d, bits, word_bits)
    return heads * (2 * words * (word_bits // 8) + 2 * 2 * d * 4)


class HybridKVCache:
    def __init__(self, heads: int, d: int, k_segments: Sequence[QuantizedSegment],
                 v_segments: Sequence[QuantizedSegment], bits: int,
                 params: CalibrationParams = IDENTITY, kernel: KernelConfig = KernelConfig()):
        if len(k_segments) != len(v_segments):
            raise DomainError("key and value segments differ in head count")
        if k_segments and len(k_segments) != heads:
            raise DomainError(f"{len(k_segments)} segments for {heads} heads")
        self.heads = heads
        self.d = d
        self.bits = bits
        self.params = params
        self.kernel = kernel
        self.k_segments = tuple(k_segments)
        self.v_segments = tuple(v_segments)
        self.n_vis = self.k_segments[0].n if self.k_segments else 0
        for seg in self.k_segments + self.v_segments:
            if seg.n != self.n_vis or seg.d != d:
                raise DomainError("every head segment must be n_vis x d")
        self._k_packed = PackedHeads.from_segments(self.k_segments) if self.n_vis else None
        self._v_packed = PackedHeads.from_segments(self.v_segments) if self.n_vis else None
        self._k_tail = np.zeros((heads, 16, d), dtype=np.float32)
        self._v_tail = np.zeros((heads, 16, d), dtype=np.float32)
        self.n_txt = 0

    # -- construction -----------------------------------------------------

    @classmethod
    def build(cls, k_vis, v_vis, config: QuantizationConfig = QuantizationConfig(),
              params: CalibrationParams = IDENTITY, kernel: KernelConfig = KernelConfig(),
              value_config: QuantizationConfig | None = None) -> "HybridKVCache":
        k_vis = np.asarray(k_vis, dtype=np.float32)
        v_vis = np.asarray(v_vis, dtype=np.float32)
        if k_vis.ndim != 3 or k_vis.shape != v_vis.shape:
            raise DomainError(f"keys {k_vis.shape} and values {v_vis.shape} must both be (h, n, d)")
        heads, n_vis, d = k_vis.shape
        value_config = value_config or config
        if n_vis == 0:
            return cls(heads, d, [], [], config.bits, params, kernel)
        k_segs = [quantize_matrix(k_vis[i], config) for i in range(heads)]
        v_segs = [quantize_matrix(v_vis[i], value_config) for i in range(heads)]
        return cls(heads, d, k_segs, v_segs, config.bits, params, kernel)

    # -- state ---------------------------------------------------------------

    @property
    def n_total(self) -> int:
        return self.n_vis + self.n_txt

    @property
    def k_tail(self) -> np.ndarray:
        return self._k_tail[:, : self.n_txt]

    @property
    def v_tail(self) -> np.ndarray:
        return self._v_tail[:, : self.n_txt]

    def memory(self) -> MemoryReport:
        code = sum(s.code_bytes for s in self.k_segments + self.v_segments)
        stats = sum(s.stats.nbytes for s in self.k_segments + self.v_segments)
        return MemoryReport(self.heads, self.n_vis, self.n_txt, self.d, self.bits, code, stats,
                            self.k_tail.nbytes + self.v_tail.nbytes)

    def dequantized(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense copies of the quantized segment; for tests and oracles only."""
        shape = (self.heads, self.n_vis, self.d)
        if not self.n_vis:
            return np.zeros(shape, np.float32), np.zeros(shape, np.float32)
        k = np.stack([np.asarray(dequantize(s)) for s in self.k_segments])
        v = np.stack([np.asarray(dequantize(s)) for s in self.v_segments])
        return k, v

    # -- decoding ------------------------------------------------------------

    def _check_rows(self, x, what: str) -> np.ndarray:
        arr = np.asarray(x, dtype=np.float32)
        if arr.ndim == 3 and arr.shape[1] == 1:
            arr = arr[:, 0, :]
        if arr.shape != (self.heads, self.d):
            raise DomainError(f"{what} must be ({self.heads}, {self.d}), got {np.shape(x)}")
        return arr

    def append(self, k_new, v_new) -> None:
        k_new = self._check_rows(k_new, "k_new")
        v_new = self._check_rows(v_new, "v_new")
        if self.n_txt == self._k_tail.shape[1]:
            grow = max(16, self.n_txt)
            pad = np.zeros((self.heads, grow, self.d), dtype=np.float32)
            self._k_tail = np.concatenate([self._k_tail, pad], axis=1)
            self._v_tail = np.concatenate([self._v_tail, pad], axis=1)
        self._k_tail[:, self.n_txt] = k_new
        self._v_tail[:, self.n_txt] = v_new
        self.n_txt += 1

    def attention_weights(self, q_new) -> tuple[np.ndarray, np.ndarray]:
        """Softmax weights over (quantized, tail) tokens, ``(h, n_vis)`` and ``(h, n_txt)``."""
        q = self._check_rows(q_new, "q_new")
        if self.n_total == 0:
            raise DomainError("cannot attend over an empty cache")
        scale = 1.0 / math.sqrt(self.d)
        vis = np.zeros((self.heads, 0))
        if self.n_vis:
            vis = qk_scores(q, self._k_packed, self.kernel).astype(np.float64) * scale
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", CalibrationWarning)
                vis = calibrate_rows(vis, self.params)
        tail = np.einsum("hd,hnd->hn", q.astype(np.float64), self.k_tail.astype(np.float64)) * scale
        weights = softmax(np.concatenate([vis, tail], axis=1))
        return weights[:, : self.n_vis], weights[:, self.n_vis:]

    def decode_step(self, q_new) -> np.ndarray:
        w_vis, w_tail = self.attention_weights(q_new)
        out = np.einsum("hn,hnd->hd", w_tail, self.v_tail.astype(np.float64))
        if self.n_vis:
            out += wv_output(w_vis, self._v_packed, self.kernel)
        return out.astype(np.float32)

    # -- snapshots -------------------------------------------------------------

    def save(self, path: Path | str) -> None:
        with open(path, "wb") as fh:
            fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, self.heads, self.d, self.bits, 0,
                                        self.n_vis, self.n_txt, self.params.tau1, self.params.tau2))
            empty = bitpack.pack([], self.bits)
            zeros = np.zeros(self.d, np.float32)
            for h in range(self.heads):
                for segs in (self.k_segments, self.v_segments):
                    if self.n_vis:
                        bitpack.dump_packed(fh, segs[h].codes, segs[h].stats.alpha, segs[h].stats.beta)
                    else:
                        bitpack.dump_packed(fh, empty, zeros, zeros)
                dump_tensor(fh, self.k_tail[h])
                dump_tensor(fh, self.v_tail[h])

    @classmethod
    def load(cls, path: Path | str, kernel: KernelConfig = KernelConfig()) -> "HybridKVCache":
        with open(path, "rb") as fh:
            header = fh.read(_CACHE_HEADER.size)
            if len(header) < _CACHE_HEADER.size:
                raise FormatError("truncated cache header", len(header))
            magic, version, heads, d, bits, _, n_vis, n_txt, tau1, tau2 = _CACHE_HEADER.unpack(header)
            if magic != CACHE_MAGIC:
                raise FormatError(f"bad magic {magic!r}, expected {CACHE_MAGIC!r}", 0)
            if version != CACHE_VERSION:
                raise FormatError(f"unsupported cache version {version}", 4)
            k_segs, v_segs, k_tail, v_tail = [], [], [], []
            for _h in range(heads):
                for segs in (k_segs, v_segs):
                    offset = fh.tell()
                    buf, alpha, beta = bitpack.load_packed(fh)
                    if buf.logical_count != n_vis * d or buf.code_bits != bits or alpha.size != d:
                        raise FormatError("segment does not match cache header", offset)
                    if n_vis:
                        segs.append(QuantizedSegment(buf, ChannelStats(alpha, beta), n_vis, d, bits))
                for tails in (k_tail, v_tail):
                    offset = fh.tell()
                    m = load_tensor(fh)
                    if m.shape != (n_txt, d):
                        raise FormatError(f"tail tensor is {m.shape}, header says ({n_txt}, {d})", offset)
                    tails.append(np.asarray(m))
            if fh.read(1):
                raise FormatError("unexpected bytes after cache snapshot", fh.tell() - 1)
        cache = cls(heads, d, k_segs, v_segs, bits, CalibrationParams(tau1, tau2), kernel)
        for t in range(n_txt):
            cache.append(np.stack([k[t] for k in k_tail]), np.stack([v[t] for v in v_tail]))
        return cache


def build_cache(k_vis, v_vis, config: QuantizationConfig = QuantizationConfig(),
                params: CalibrationParams = IDENTITY, kernel: KernelConfig = KernelConfig(),
                value_config: QuantizationConfig | None = None) -> HybridKVCache:
    return HybridKVCache.build(k_vis, v_vis, config, params, kernel, value_config)


def dense_decode(q, keys, values) -> np.ndarray:
    """Full-precision single-query attention over ``(h, n, d)`` caches (the fp32 baseline path)."""
    q = np.asarray(q, dtype=np.float32).reshape(keys.shape[0], 1, keys.shape[-1])
    scores = np.matmul(q, np.swapaxes(keys, -1, -2)) / np.float32(math.sqrt(keys.shape[-1]))
    scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
    scores /= scores.sum(axis=-1, keepdims=True)
    return np.matmul(scores, values)[:, 0, :]

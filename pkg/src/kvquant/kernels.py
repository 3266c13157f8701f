"""Fused attention kernels over packed low-bit caches.

Both kernels use the post-scaling rearrangement so no full-precision copy of
the cache is ever built::

    q . k_deq   = (q * step) . k_codes + q . alpha
    (w V_deq)_i = step_i * (w V_codes)_i + alpha_i * sum(w)

with ``step = (beta - alpha) / (2**b - 1)``.

``qk_scores`` splits heads into blocks of ``head_block`` heads, one program per
block.  Each program builds its query-side table once and then walks the
tokens in blocks of ``token_block``, decoding one packed word at a time.  The
reduction runs over the head dimension (the packed axis), producing one score
per token.

``wv_output`` divides every head's packed columns into ``x = ceil(d_pack /
col_block)`` output blocks and hands each of ``P`` workers the contiguous task
range ``[y*pid, y*(pid+1))`` with ``y = ceil(h*x / P)``.  A worker loads the
weight row of a head once and computes all of its tasks on that head before
moving on.

Packed words of 8 bits whose rows are word-aligned take a table-driven path
(256-entry tables per word position); any other layout falls back to per-code
shifting and masking.  Accumulation is float64 in a fixed order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from numba import njit

from .errors import ConfigurationError, DomainError
from .quantizer import QuantizedSegment


def default_workers() -> int:
    env = os.environ.get("KVQ_WORKERS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigurationError(f"KVQ_WORKERS must be an integer, got {env!r}") from None
        if value < 1:
            raise ConfigurationError(f"KVQ_WORKERS must be >= 1, got {value}")
        return value
    return os.cpu_count() or 1


@dataclass(frozen=True)
class KernelConfig:
    head_block: int = 1
    token_block: int = 256
    workers: int = 1
    col_block: int = 8  # packed words per wV output block

    def __post_init__(self):
        for name in ("head_block", "token_block", "workers", "col_block"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")


@lru_cache(maxsize=None)
def _pool(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="kvq-worker")


def _run(workers: int, fn, jobs: Sequence) -> None:
    if workers == 1 or len(jobs) <= 1:
        for job in jobs:
            fn(job)
        return
    # surface worker exceptions; the barrier is the list() over results
    list(_pool(workers).map(fn, jobs))


@dataclass(frozen=True, eq=False)
class PackedHeads:
    """Per-head segments stacked into contiguous arrays for the kernels."""

    words: np.ndarray  # (h, W) uint8 for the table path, int64 otherwise
    alpha: np.ndarray  # (h, d) float64
    step: np.ndarray  # (h, d) float64
    n: int
    d: int
    bits: int
    word_bits: int

    @classmethod
    def from_segments(cls, segments: Sequence[QuantizedSegment]) -> "PackedHeads":
        if not segments:
            raise DomainError("need at least one head")
        first = segments[0]
        key = (first.n, first.d, first.bits, first.codes.word_bits)
        for seg in segments[1:]:
            if (seg.n, seg.d, seg.bits, seg.codes.word_bits) != key:
                raise DomainError("all heads must share n, d, bitwidth and word size")
        n, d, bits, word_bits = key
        words = np.stack([seg.codes.words for seg in segments])
        if not _table_layout(d, bits, word_bits):
            words = words.astype(np.int64)
        alpha = np.stack([seg.stats.alpha for seg in segments]).astype(np.float64)
        beta = np.stack([seg.stats.beta for seg in segments]).astype(np.float64)
        step = (beta - alpha) / (2**bits - 1)
        return cls(np.ascontiguousarray(words), alpha, step, n, d, bits, word_bits)

    @property
    def heads(self) -> int:
        return self.alpha.shape[0]

    @property
    def table_path(self) -> bool:
        return self.words.dtype == np.uint8

    @property
    def codes_per_word(self) -> int:
        return self.word_bits // self.bits

    @property
    def packed_cols(self) -> int:
        return -(-self.d // self.codes_per_word)


def _table_layout(d: int, bits: int, word_bits: int) -> bool:
    return word_bits == 8 and (d * bits) % 8 == 0


def _as_packed(segments) -> PackedHeads:
    if isinstance(segments, PackedHeads):
        return segments
    if isinstance(segments, QuantizedSegment):
        segments = [segments]
    return PackedHeads.from_segments(list(segments))


def _rows(x, h: int, width: int, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[1] == 1:
        arr = arr[:, 0, :]
    elif arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape != (h, width):
        raise DomainError(f"{what} must have shape ({h}, {width}) or ({h}, 1, {width}), got {np.shape(x)}")
    return arr


# ---------------------------------------------------------------------------
# compiled inner loops
# ---------------------------------------------------------------------------


@njit(nogil=True, cache=True)
def _qk_table(qs, qa, words, n, d, bits, token_block, out):
    per = 8 // bits
    row_words = d // per
    mask = (1 << bits) - 1
    table = np.zeros((row_words, 256))
    for p in range(row_words):
        for v in range(256):
            acc = 0.0
            for k in range(per):
                acc += qs[p * per + k] * ((v >> (8 - bits * (k + 1))) & mask)
            table[p, v] = acc
    for j0 in range(0, n, token_block):
        j1 = min(j0 + token_block, n)
        for j in range(j0, j1):
            base = j * row_words
            acc = 0.0
            for p in range(row_words):
                acc += table[p, words[base + p]]
            out[j] = acc + qa


@njit(nogil=True, cache=True)
def _qk_generic(qs, qa, words, n, d, bits, word_bits, token_block, out):
    per = word_bits // bits
    mask = (1 << bits) - 1
    for j0 in range(0, n, token_block):
        j1 = min(j0 + token_block, n)
        for j in range(j0, j1):
            acc = 0.0
            idx = j * d
            i = 0
            while i < d:
                word = words[idx // per]
                k = idx % per
                while k < per and i < d:
                    acc += qs[i] * ((word >> (word_bits - bits * (k + 1))) & mask)
                    k += 1
                    i += 1
                    idx += 1
            out[j] = acc + qa


@njit(nogil=True, cache=True)
def _wv_table(w, words, n, d, bits, p0, p1, step, alpha, wsum, out):
    per = 8 // bits
    row_words = d // per
    mask = (1 << bits) - 1
    hist = np.zeros((p1 - p0, 256))
    for j in range(n):
        wj = w[j]
        base = j * row_words
        for p in range(p0, p1):
            hist[p - p0, words[base + p]] += wj
    for p in range(p0, p1):
        for k in range(per):
            shift = 8 - bits * (k + 1)
            acc = 0.0
            for v in range(256):
                acc += hist[p - p0, v] * ((v >> shift) & mask)
            i = p * per + k
            out[i] = step[i] * acc + alpha[i] * wsum


@njit(nogil=True, cache=True)
def _wv_generic(w, words, n, d, bits, word_bits, c0, c1, step, alpha, wsum, out):
    per = word_bits // bits
    mask = (1 << bits) - 1
    acc = np.zeros(c1 - c0)
    for j in range(n):
        wj = w[j]
        for i in range(c0, c1):
            idx = j * d + i
            word = words[idx // per]
            acc[i - c0] += wj * ((word >> (word_bits - bits * (idx % per + 1))) & mask)
    for i in range(c0, c1):
        out[i] = step[i] * acc[i - c0] + alpha[i] * wsum


# ---------------------------------------------------------------------------
# public kernels
# ---------------------------------------------------------------------------


def qk_scores(q, segments, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """Unscaled scores ``q . k_deq`` for every cached token; returns ``(h, n)`` float32."""
    packed = _as_packed(segments)
    h, n, d = packed.heads, packed.n, packed.d
    q = _rows(q, h, d, "q")
    out = np.zeros((h, n), dtype=np.float32)
    if n == 0:
        return out
    q64 = q.astype(np.float64)
    q_scaled = q64 * packed.step
    q_offset = np.einsum("hd,hd->h", q64, packed.alpha)

    def program(pid: int) -> None:
        for head in range(pid * cfg.head_block, min((pid + 1) * cfg.head_block, h)):
            if packed.table_path:
                _qk_table(q_scaled[head], q_offset[head], packed.words[head], n, d,
                          packed.bits, cfg.token_block, out[head])
            else:
                _qk_generic(q_scaled[head], q_offset[head], packed.words[head], n, d,
                            packed.bits, packed.word_bits, cfg.token_block, out[head])

    _run(cfg.workers, program, range(-(-h // cfg.head_block)))
    return out


def task_ranges(heads: int, packed_cols: int, col_block: int, workers: int) -> list[tuple[int, int]]:
    """Contiguous ``[s, t)`` task range of every worker, clipped to the task count."""
    blocks = -(-packed_cols // col_block)
    total = heads * blocks
    per_worker = -(-total // workers)
    return [(min(per_worker * pid, total), min(per_worker * (pid + 1), total)) for pid in range(workers)]


def wv_output(w, segments, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """Weighted value sum ``w . V_deq`` per head; returns ``(h, d)`` float32."""
    packed = _as_packed(segments)
    h, n, d = packed.heads, packed.n, packed.d
    w = _rows(w, h, n, "w")
    out = np.zeros((h, d), dtype=np.float32)
    if n == 0:
        return out
    per = packed.codes_per_word
    blocks = -(-packed.packed_cols // cfg.col_block)

    def worker(span: tuple[int, int]) -> None:
        i, t = span
        while i != t:
            matrix = i // blocks
            end = min((matrix + 1) * blocks, t)
            stripe = w[matrix].astype(np.float64)
            wsum = float(stripe.sum())
            for task in range(i, end):
                blk = task - matrix * blocks
                p0 = blk * cfg.col_block
                p1 = min(p0 + cfg.col_block, packed.packed_cols)
                if packed.table_path:
                    _wv_table(stripe, packed.words[matrix], n, d, packed.bits, p0, p1,
                              packed.step[matrix], packed.alpha[matrix], wsum, out[matrix])
                else:
                    _wv_generic(stripe, packed.words[matrix], n, d, packed.bits, packed.word_bits,
                                p0 * per, min(p1 * per, d), packed.step[matrix], packed.alpha[matrix],
                                wsum, out[matrix])
            i = end

    spans = [s for s in task_ranges(h, packed.packed_cols, cfg.col_block, cfg.workers) if s[0] < s[1]]
    _run(cfg.workers, worker, spans)
    return out


# ---------------------------------------------------------------------------
# dense reference paths
# ---------------------------------------------------------------------------


def naive_qk(q, k_deq) -> np.ndarray:
    """Dense ``q K^T``; ``q`` is ``(1, d)`` or ``(h, 1, d)``, keys ``(n, d)`` or ``(h, n, d)``."""
    q = np.asarray(q, dtype=np.float32)
    k = np.asarray(k_deq, dtype=np.float32)
    if q.shape[-1] != k.shape[-1]:
        raise DomainError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    return np.matmul(q, np.swapaxes(k, -1, -2))


def naive_wv(w, v_deq) -> np.ndarray:
    """Dense ``w V``; ``w`` is ``(1, n)`` or ``(h, 1, n)``."""
    w = np.asarray(w, dtype=np.float32)
    v = np.asarray(v_deq, dtype=np.float32)
    if w.shape[-1] != v.shape[-2]:
        raise DomainError(f"weight length {w.shape[-1]} != value rows {v.shape[-2]}")
    return np.matmul(w, v)


def warmup() -> None:
    """Compile every inner loop once so timing runs exclude JIT cost."""
    from .quantizer import quantize_matrix, QuantizationConfig

    rng = np.random.default_rng(0)
    m = rng.normal(size=(4, 8)).astype(np.float32)
    for word_bits in (8, 16):
        seg = quantize_matrix(m, QuantizationConfig(bits=2, word_bits=word_bits))
        wv_output(np.ones((1, 4)), [seg])
        qk_scores(np.ones((1, 8)), [seg])

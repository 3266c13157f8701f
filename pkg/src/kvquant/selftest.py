"""Property suites run by ``kvq selftest``."""

from __future__ import annotations

import math
import traceback
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import bitpack, reference
from .calibration import CalibrationParams, CalibrationSample, g_transform, grid_search, grid_table, ScoreRange
from .kernels import KernelConfig, PackedHeads, naive_qk, naive_wv, qk_scores, wv_output
from .kvcache import HybridKVCache
from .quantizer import QuantizationConfig, compute_stats, dequantize, quantize, quantize_matrix

PACK_WIDTHS = ((1, 8), (2, 8), (4, 8), (8, 8), (1, 16), (2, 16))


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str = ""


def _all_groups(code_bits: int, word_bits: int) -> np.ndarray:
    """Every possible word, expressed as its code group (MSB-first)."""
    per_word = word_bits // code_bits
    words = np.arange(2**word_bits, dtype=np.uint64)
    shifts = np.array([word_bits - code_bits * (i + 1) for i in range(per_word)], dtype=np.uint64)
    return ((words[:, None] >> shifts) & np.uint64(2**code_bits - 1)).astype(np.uint32)


def suite_pack_roundtrip(inject_fault: bool = False) -> None:
    for code_bits, word_bits in PACK_WIDTHS:
        groups = _all_groups(code_bits, word_bits)
        buf = bitpack.pack(groups, code_bits, word_bits)
        if inject_fault:
            words = buf.words.copy()
            words[len(words) // 2] ^= 1
            buf = bitpack.PackedBuffer(words, code_bits, word_bits, buf.logical_count)
        back = bitpack.unpack(buf).reshape(groups.shape)
        if not np.array_equal(back, groups):
            bad = int(np.flatnonzero((back != groups).any(axis=1))[0])
            raise AssertionError(f"unpack(pack(.)) differs for N={code_bits}, M={word_bits} at group {bad}")
        if not np.array_equal(buf.words, np.arange(2**word_bits)):
            raise AssertionError(f"packing all groups for N={code_bits}, M={word_bits} is not the identity on words")


def suite_pack_oracle(inject_fault: bool = False) -> None:
    if int(bitpack.pack([3, 1, 0, 2], 2, 8).words[0]) != 210:
        raise AssertionError("[3,1,0,2] with N=2, M=8 must pack to 210")
    rng = np.random.default_rng(1)
    for code_bits, word_bits in PACK_WIDTHS:
        codes = rng.integers(0, 2**code_bits, size=int(rng.integers(0, 200)))
        ours = [int(w) for w in bitpack.pack(codes, code_bits, word_bits).words]
        if ours != reference.oracle_pack(codes.tolist(), code_bits, word_bits):
            raise AssertionError(f"pack disagrees with the bit-string oracle for N={code_bits}, M={word_bits}")


def suite_quantization_bound(inject_fault: bool = False) -> None:
    grid = np.linspace(-3.0, 5.0, 4001, dtype=np.float32)[:, None]
    for bits in (1, 2, 4, 8):
        stats = compute_stats(grid)
        deq = np.asarray(dequantize(quantize(grid, stats, bits)), dtype=np.float64)
        half = (float(stats.beta[0]) - float(stats.alpha[0])) / (2 * (2**bits - 1))
        err = np.abs(deq - grid).max()
        if err > half + 8 * np.finfo(np.float32).eps * 5.0:
            raise AssertionError(f"b={bits}: roundtrip error {err} exceeds half step {half}")


def _random_heads(rng, h, n, d, bits):
    keys = rng.normal(size=(h, n, d)).astype(np.float32)
    segs = [quantize_matrix(keys[i], QuantizationConfig(bits=bits)) for i in range(h)]
    deq = np.stack([np.asarray(dequantize(s)) for s in segs]).astype(np.float64)
    return segs, deq


def _rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


def suite_post_scale_qk(inject_fault: bool = False) -> None:
    rng = np.random.default_rng(2)
    for seed in range(10):
        bits = (1, 2, 4, 8)[seed % 4]
        segs, deq = _random_heads(rng, 4, 96, 16, bits)
        q = rng.normal(size=(4, 1, 16))
        got = qk_scores(q, segs, KernelConfig(head_block=2, token_block=32, workers=2))
        want = naive_qk(q, deq)[:, 0]
        if _rel_err(got, want) > 1e-5:
            raise AssertionError(f"fused qk differs from dequantize-then-dense at b={bits}")


def suite_post_scale_wv(inject_fault: bool = False) -> None:
    rng = np.random.default_rng(3)
    for seed in range(10):
        bits = (1, 2, 4, 8)[seed % 4]
        segs, deq = _random_heads(rng, 4, 96, 16, bits)
        w = rng.random(size=(4, 1, 96))
        got = wv_output(w, segs, KernelConfig(col_block=1, workers=3))
        want = naive_wv(w, deq)[:, 0]
        if _rel_err(got, want) > 1e-5:
            raise AssertionError(f"fused wV differs from dequantize-then-dense at b={bits}")


def suite_calibration(inject_fault: bool = False) -> None:
    rng = np.random.default_rng(4)
    for _ in range(50):
        row = rng.normal(size=33) * rng.uniform(0.1, 20)
        p = CalibrationParams(*rng.integers(0, 4, size=2))
        r = ScoreRange.of(row)
        out = g_transform(np.array([r.gamma, r.delta]), p, r)
        if not math.isclose(out[0], r.gamma - p.tau1, rel_tol=0, abs_tol=np.spacing(abs(r.gamma) + p.tau1)) or \
           not math.isclose(out[1], r.delta - p.tau2, rel_tol=0, abs_tol=np.spacing(abs(r.delta) + p.tau2)):
            raise AssertionError("g does not map the range endpoints onto (gamma - tau1, delta - tau2)")
        if not np.array_equal(g_transform(row, CalibrationParams()), row):
            raise AssertionError("g with (0, 0) is not the identity")


def suite_grid_search(inject_fault: bool = False) -> None:
    rng = np.random.default_rng(5)
    cal_set, oracle_set = [], []
    for _ in range(3):
        keys = rng.standard_t(3, size=(2, 64, 16)).astype(np.float32)
        q = rng.normal(size=(2, 16)).astype(np.float32)
        segs = [quantize_matrix(keys[i], QuantizationConfig(bits=1)) for i in range(2)]
        cal_set.append(CalibrationSample(q, keys, PackedHeads.from_segments(segs), 16))
        oracle_set.append((q, keys, segs, 16))
    best = grid_search(cal_set)
    table = reference.oracle_grid_mse(oracle_set, [p.as_tuple() for p, _ in grid_table(cal_set)])
    if best.as_tuple() != reference.oracle_argmin(table):
        raise AssertionError(f"grid search picked {best.as_tuple()}, exhaustive table says {reference.oracle_argmin(table)}")


def suite_hybrid_cache(inject_fault: bool = False) -> None:
    rng = np.random.default_rng(6)
    h, n, d = 2, 48, 8
    keys = rng.uniform(-1, 1, size=(h, n, d)).astype(np.float32)
    values = rng.uniform(-1, 1, size=(h, n, d)).astype(np.float32)
    cache = HybridKVCache.build(keys, values, QuantizationConfig(bits=8), CalibrationParams(1, 2))
    k_deq, v_deq = cache.dequantized()
    for _ in range(4):
        cache.append(rng.normal(size=(h, d)), rng.normal(size=(h, d)))
        q = rng.normal(size=(h, d)).astype(np.float32)
        got = cache.decode_step(q)
        for i in range(h):
            want = reference.oracle_hybrid_attention(q[i], k_deq[i], v_deq[i], cache.k_tail[i], cache.v_tail[i], 1, 2)
            if _rel_err(got[i], want) > 1e-5:
                raise AssertionError("hybrid decode differs from the from-scratch oracle")


SUITES: dict[str, Callable[..., None]] = {
    "pack_roundtrip_exhaustive": suite_pack_roundtrip,
    "pack_matches_oracle": suite_pack_oracle,
    "quantization_half_step_bound": suite_quantization_bound,
    "post_scale_qk": suite_post_scale_qk,
    "post_scale_wv": suite_post_scale_wv,
    "calibration_endpoints": suite_calibration,
    "grid_search_optimal": suite_grid_search,
    "hybrid_cache_oracle": suite_hybrid_cache,
}


def run_selftest(inject_fault: str | None = None) -> list[SuiteResult]:
    results = []
    for name, suite in SUITES.items():
        try:
            suite(inject_fault=inject_fault == "bitflip")
            results.append(SuiteResult(name, True))
        except AssertionError as exc:
            results.append(SuiteResult(name, False, str(exc)))
        except Exception:  # noqa: BLE001 - a crash is a failed property, not a CLI error
            results.append(SuiteResult(name, False, traceback.format_exc(limit=3).strip().splitlines()[-1]))
    return results

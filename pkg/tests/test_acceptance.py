"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected in ``RESULTS`` and repeated in the pytest terminal
summary.  Running this file directly (``python tests/test_acceptance.py``)
executes every criterion and prints the same lines.
"""

import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import dot_scale  # noqa: E402

from kvquant import bitpack  # noqa: E402
from kvquant.bench import FP32_BITS, decode_throughput  # noqa: E402
from kvquant.calibration import (  # noqa: E402
    IDENTITY,
    CalibrationParams,
    CalibrationWarning,
    ScoreRange,
    calibrate_rows,
    g_transform,
    grid_search,
    mse_report,
    sample_from_workload,
    softmax,
)
from kvquant.kernels import KernelConfig, naive_qk, naive_wv, qk_scores, warmup, wv_output  # noqa: E402
from kvquant.kvcache import build_cache, expected_quantized_bytes  # noqa: E402
from kvquant.quantizer import (  # noqa: E402
    Mode,
    QuantizationConfig,
    dequantize,
    frobenius_error,
    quantize_matrix,
)
from kvquant.reference import oracle_attention, oracle_hybrid_attention  # noqa: E402
from kvquant.tensor_core import HeavyTailed, OutlierChannels, WorkloadSpec, generate  # noqa: E402

RESULTS: dict[int, str] = {}


def _report(number, title, checks, elapsed, limit):
    """Record and print the verdict; ``checks`` maps a description to a bool."""
    checks = dict(checks)
    checks[f"runtime {elapsed:.2f}s < {limit}s"] = elapsed < limit
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    detail = "; ".join(failed) if failed else "; ".join(checks)
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    RESULTS[number] = line
    print(line)
    assert ok, line


class _Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


# 1 -------------------------------------------------------------------------

PACK_WIDTHS = [(1, 8), (2, 8), (4, 8), (8, 8), (1, 16), (2, 16)]


def test_criterion_1_packing_exactness():
    checks = {}
    with _Clock() as clock:
        for n, m in PACK_WIDTHS:
            per = m // n
            words = np.arange(2**m, dtype=np.uint64)
            shifts = np.array([m - n * (i + 1) for i in range(per)], dtype=np.uint64)
            groups = (words[:, None] >> shifts) & np.uint64(2**n - 1)
            buf = bitpack.pack(groups, n, m)
            same = np.array_equal(bitpack.unpack(buf).reshape(groups.shape), groups)
            checks[f"roundtrip on all {2**m} groups N={n} M={m}"] = same and np.array_equal(buf.words, words)
        # sum_i v_i 2^(M - N(i+1)) for v = [3, 1, 0, 2]
        by_formula = sum(v * 2 ** (8 - 2 * (i + 1)) for i, v in enumerate([3, 1, 0, 2]))
        checks["[3,1,0,2] -> 210"] = int(bitpack.pack([3, 1, 0, 2], 2, 8).words[0]) == by_formula == 210
    _report(1, "packing exactness", checks, clock.elapsed, 1.0)


# 2 -------------------------------------------------------------------------

def _within(got, want, scale, rtol):
    return bool((np.abs(np.asarray(got, np.float64) - want) <= rtol * scale).all())


def test_criterion_2_post_scale_identity():
    failures = []
    seeds = 120
    with _Clock() as clock:
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            bits = (1, 2, 4, 8)[seed % 4]
            h, n, d = int(rng.integers(1, 9)), int(rng.integers(1, 513)), int(rng.integers(1, 65))
            keys = (rng.normal(size=(h, n, d)) * rng.uniform(0.01, 100)).astype(np.float32)
            vals = (rng.normal(size=(h, n, d)) * rng.uniform(0.01, 100)).astype(np.float32)
            cfg = QuantizationConfig(bits=bits, word_bits=(8, 16, 32)[seed % 3])
            k_segs = [quantize_matrix(keys[i], cfg) for i in range(h)]
            v_segs = [quantize_matrix(vals[i], cfg) for i in range(h)]
            k_deq = np.stack([np.asarray(dequantize(s), np.float64) for s in k_segs])
            v_deq = np.stack([np.asarray(dequantize(s), np.float64) for s in v_segs])
            q = rng.normal(size=(h, 1, d))
            w = rng.dirichlet(np.ones(n), size=(h, 1))
            kcfg = KernelConfig(int(rng.integers(1, 5)), int(rng.integers(1, 300)), int(rng.integers(1, 5)))
            ok_qk = _within(qk_scores(q, k_segs, kcfg), naive_qk(q, k_deq)[:, 0],
                            dot_scale(q, np.swapaxes(k_deq, 1, 2))[:, 0], 1e-5)
            ok_wv = _within(wv_output(w, v_segs, kcfg), naive_wv(w, v_deq)[:, 0], dot_scale(w, v_deq)[:, 0], 1e-5)
            if not (ok_qk and ok_wv):
                failures.append(seed)
    _report(2, "post-scale identity", {f"{seeds} seeds, b in 1/2/4/8, h<=8, n<=512, d<=64 within 1e-5 rel":
                                       not failures}, clock.elapsed, 30.0)


# 3 -------------------------------------------------------------------------

def test_criterion_3_quantization_bound():
    checks = {}
    with _Clock() as clock:
        rng = np.random.default_rng(0)
        # every column is a dense grid over its own range
        lo = rng.uniform(-50, 0, size=8)
        hi = lo + rng.uniform(0.01, 100, size=8)
        grid = np.linspace(lo, hi, 20001).astype(np.float32)
        for bits in (1, 2, 4, 8):
            seg = quantize_matrix(grid, QuantizationConfig(bits=bits))
            deq = np.asarray(dequantize(seg), np.float64)
            a = seg.stats.alpha.astype(np.float64)
            b = seg.stats.beta.astype(np.float64)
            half = (b - a) / (2 * (2**bits - 1))
            ulp = np.spacing(np.maximum(np.abs(a), np.abs(b)).astype(np.float32)).astype(np.float64)
            checks[f"b={bits} |x - deq| <= step/2"] = bool((np.abs(deq - grid) <= half + ulp).all())
    _report(3, "quantization bound", checks, clock.elapsed, 5.0)


# 4 -------------------------------------------------------------------------

def _ulps(a, b):
    return abs(a - b) / np.spacing(max(abs(a), abs(b), np.finfo(float).tiny))


def test_criterion_4_calibration_invariances():
    rng = np.random.default_rng(4)
    worst_ulp, identity_ok, shift_err = 0.0, True, 0.0
    with _Clock() as clock:
        for _ in range(2000):
            row = rng.normal(size=int(rng.integers(2, 100))) * rng.uniform(1e-3, 1e3) + rng.uniform(-1e3, 1e3)
            p = CalibrationParams(*rng.uniform(0, 3, size=2))
            r = ScoreRange.of(row)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", CalibrationWarning)
                g_lo, g_hi = g_transform([r.gamma, r.delta], p, r)
                worst_ulp = max(worst_ulp, _ulps(g_lo, r.gamma - p.tau1), _ulps(g_hi, r.delta - p.tau2))
                identity_ok &= np.array_equal(g_transform(row, IDENTITY), row)
                identity_ok &= np.array_equal(calibrate_rows(row[None], IDENTITY)[0], row)
                c = rng.uniform(-100, 100)
                a = softmax(calibrate_rows(row[None], p))
                b = softmax(calibrate_rows(row[None] + c, p))
            shift_err = max(shift_err, float(np.abs(a - b).max()))
    _report(4, "calibration endpoints and invariances", {
        f"endpoints within 1 ulp (worst {worst_ulp:.0f})": worst_ulp <= 1,
        "(0,0) is the identity": bool(identity_ok),
        f"softmax rows shift invariant (max diff {shift_err:.1e})": shift_err <= 1e-9,
    }, clock.elapsed, 5.0)


# 5 -------------------------------------------------------------------------

def test_criterion_5_mse_reduction():
    checks = {}
    h, n, d, seeds, cal_seeds = 8, 2048, 64, 20, 4
    with _Clock() as clock:
        for dist in (OutlierChannels(), HeavyTailed(3)):
            name = type(dist).__name__
            config = QuantizationConfig(bits=1)
            # calibration uses workloads disjoint from the evaluated ones
            cal = [sample_from_workload(generate(WorkloadSpec(h, n, d, dist, 10_000 + s)), config)
                   for s in range(cal_seeds)]
            params = grid_search(cal)
            quant, quant_c, violations = [], [], 0
            outer = {"exact": 0, "quant": 0, "quant_c": 0}
            for seed in range(seeds):
                rep = mse_report(generate(WorkloadSpec(h, n, d, dist, seed)), 1, params)
                quant.append(rep.mean_mse("quant"))
                quant_c.append(rep.mean_mse("quant_c"))
                violations += quant_c[-1] > quant[-1]
                for v in outer:
                    outer[v] += rep.outer_mass(v)
            q, qc = float(np.mean(quant)), float(np.mean(quant_c))
            checks[f"{name} tau={params.as_tuple()} mse quant_c {qc:.3e} < quant {q:.3e}"] = qc < q
            checks[f"{name} per-seed violations {violations}/{seeds} <= 20%"] = violations <= 0.2 * seeds
            checks[f"{name} outer-bin mass exact {outer['exact']} < quant {outer['quant']}"] = \
                outer["quant"] > outer["exact"]
            checks[f"{name} outer-bin mass quant_c {outer['quant_c']} < quant {outer['quant']}"] = \
                outer["quant_c"] < outer["quant"]
    _report(5, "MSE reduction", checks, clock.elapsed, 120.0)


# 6 -------------------------------------------------------------------------

def test_criterion_6_channel_wise_vs_global():
    wins, seeds = 0, 100
    with _Clock() as clock:
        for seed in range(seeds):
            keys = generate(WorkloadSpec(2, 256, 64, OutlierChannels(), seed)).keys
            cw = gl = 0.0
            for m in keys:
                cw += frobenius_error(m, quantize_matrix(m, QuantizationConfig(bits=1))) ** 2
                gl += frobenius_error(m, quantize_matrix(m, QuantizationConfig(bits=1, mode=Mode.GLOBAL))) ** 2
            wins += cw <= gl
    _report(6, "channel-wise vs global", {f"channel-wise <= global in {wins}/{seeds} seeds (need 95)": wins >= 95},
            clock.elapsed, 30.0)


# 7 -------------------------------------------------------------------------

def _resolved(rng, h, n, d):
    sign = rng.choice([-1.0, 1.0], size=(h, 1, d))
    return (sign * rng.uniform(1, 2, size=(h, n, d))).astype(np.float32)


def test_criterion_7_hybrid_cache():
    worst_rel, worst_inc = 0.0, 0.0
    with _Clock() as clock:
        for seed in range(40):
            rng = np.random.default_rng(seed)
            h, n_vis, n_txt, d = (int(rng.integers(1, 5)), int(rng.integers(1, 257)),
                                  int(rng.integers(0, 33)), int(rng.integers(1, 33)))
            # one sequence: decode tokens share the prefill's channel signs
            k_all, v_all = _resolved(rng, h, n_vis + n_txt, d), _resolved(rng, h, n_vis + n_txt, d)
            k, k_txt = k_all[:, :n_vis], k_all[:, n_vis:]
            v, v_txt = v_all[:, :n_vis], v_all[:, n_vis:]
            cache = build_cache(k, v, QuantizationConfig(bits=8), IDENTITY, KernelConfig(workers=2))
            for t in range(n_txt):
                cache.append(k_txt[:, t], v_txt[:, t])
            q = rng.normal(size=(h, d)).astype(np.float32)
            out = cache.decode_step(q)
            for i in range(h):
                want = np.array(oracle_attention(q[i], np.concatenate([k[i], k_txt[i]]),
                                                 np.concatenate([v[i], v_txt[i]])))
                worst_rel = max(worst_rel, float((np.abs(out[i] - want) / np.abs(want)).max()))

            # incremental decode against a from-scratch recompute at every step
            p = CalibrationParams(*rng.integers(0, 4, size=2))
            cache = build_cache(rng.normal(size=(h, n_vis, d)), rng.normal(size=(h, n_vis, d)),
                                QuantizationConfig(bits=(1, 2, 4, 8)[seed % 4]), p)
            k_deq, v_deq = cache.dequantized()
            for _ in range(8):
                cache.append(rng.normal(size=(h, d)), rng.normal(size=(h, d)))
                q = rng.normal(size=(h, d)).astype(np.float32)
                out = cache.decode_step(q)
                for i in range(h):
                    want = oracle_hybrid_attention(q[i], k_deq[i], v_deq[i], cache.k_tail[i], cache.v_tail[i],
                                                   p.tau1, p.tau2)
                    worst_inc = max(worst_inc, float((np.abs(out[i] - want) / np.maximum(1.0, np.abs(want))).max()))
    _report(7, "hybrid cache", {
        f"b=8 decode within 1e-3 relative (worst {worst_rel:.1e})": worst_rel <= 1e-3,
        f"incremental == recompute within 1e-6 (worst {worst_inc:.1e})": worst_inc <= 1e-6,
    }, clock.elapsed, 30.0)


# 8 -------------------------------------------------------------------------

def test_criterion_8_memory_law():
    checks = {}
    with _Clock() as clock:
        exact = True
        rng = np.random.default_rng(8)
        for _ in range(30):
            h, n, d = int(rng.integers(1, 5)), int(rng.integers(1, 300)), int(rng.integers(1, 70))
            bits = int(rng.choice([1, 2, 4, 8]))
            cache = build_cache(rng.normal(size=(h, n, d)), rng.normal(size=(h, n, d)), QuantizationConfig(bits=bits))
            exact &= cache.memory().quantized_bytes == expected_quantized_bytes(h, n, d, bits)
        checks["footprint equals the accounting formula on 30 random shapes"] = bool(exact)
        h, n, d = 8, 8192, 128
        keys = np.zeros((h, n, d), np.float32)
        mem = build_cache(keys, keys, QuantizationConfig(bits=1)).memory()
        checks[f"code payload {mem.code_bytes} B = fp32 payload {mem.fp32_vis_payload} B / 32"] = \
            mem.code_bytes * 32 == mem.fp32_vis_payload
        checks[f"stats itemized {mem.stats_bytes} B = h*2*2*d*4"] = mem.stats_bytes == h * 2 * 2 * d * 4
        checks["total = codes + stats"] = mem.quantized_bytes == mem.code_bytes + mem.stats_bytes == \
            expected_quantized_bytes(h, n, d, 1)
    _report(8, "memory law", checks, clock.elapsed, 5.0)


# 9 -------------------------------------------------------------------------

def test_criterion_9_throughput():
    h, n, d, steps, workers = 8, 8192, 128, 16, 2
    with _Clock() as clock:
        warmup()
        quant = max(decode_throughput(1, h, n, d, steps, workers) for _ in range(2))
        dense = max(decode_throughput(FP32_BITS, h, n, d, steps, workers) for _ in range(2))
    _report(9, "throughput direction", {
        f"1-bit {quant:.1f} tok/s > fp32 {dense:.1f} tok/s ({quant / dense:.2f}x, {workers} workers)": quant > dense,
    }, clock.elapsed, 120.0)


if __name__ == "__main__":
    warmup()
    status = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                fn()
            except AssertionError:
                status = 1
    sys.exit(status)

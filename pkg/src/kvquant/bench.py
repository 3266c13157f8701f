"""Decode benchmark: fp32 baseline against quantized caches with and without calibration."""

from __future__ import annotations

import datetime as _dt
import math
import os
import platform
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .calibration import DEFAULT_GRID, IDENTITY, CalibrationParams, exact_probs, grid_search, sample_from_workload
from .kernels import KernelConfig, warmup
from .kvcache import HybridKVCache, dense_decode
from .quantizer import Mode, QuantizationConfig
from .tensor_core import DISTRIBUTIONS, Distribution, Gaussian, WorkloadSpec, generate

FP32_BITS = 16
VARIANTS = ("fp32", "quant", "quant_c")
DIST_NAMES = {cls: name for name, cls in DISTRIBUTIONS.items()}
TIMING_FIELDS = ("timestamp", "prefill_seconds", "decode_seconds", "decode_tokens_per_sec")


@dataclass
class BenchConfig:
    bits: list[int]
    heads: int = 8
    tokens: list[int] = field(default_factory=lambda: [1024])
    head_dim: int = 128
    steps: int = 16
    seed: int = 0
    distribution: Distribution = field(default_factory=Gaussian)
    calibrated: bool = True
    mode: Mode = Mode.CHANNEL_WISE
    workers: int = 1
    params: CalibrationParams | None = None
    grid: list[CalibrationParams] = field(default_factory=lambda: list(DEFAULT_GRID))

    def as_dict(self) -> dict:
        return {
            "bits": list(self.bits),
            "heads": self.heads,
            "n": list(self.tokens),
            "d": self.head_dim,
            "steps": self.steps,
            "seed": self.seed,
            "dist": DIST_NAMES[type(self.distribution)],
            "dist_params": dict(vars(self.distribution)),
            "calibrated": self.calibrated,
            "mode": Mode(self.mode).value,
            "workers": self.workers,
        }


def environment(workers: int) -> dict:
    return {
        "workers": workers,
        "cpu_count": os.cpu_count(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "platform": platform.platform(),
    }


def _step_tokens(cfg: BenchConfig, n: int):
    rng = np.random.Generator(np.random.PCG64([cfg.seed, n, 1]))
    shape = (cfg.steps, cfg.heads, cfg.head_dim)
    return (rng.standard_normal(shape).astype(np.float32),
            rng.standard_normal(shape).astype(np.float32),
            rng.standard_normal(shape).astype(np.float32))


def _time_quant(cache: HybridKVCache, tokens) -> float:
    ks, vs, qs = tokens
    start = time.perf_counter()
    for k, v, q in zip(ks, vs, qs):
        cache.append(k, v)
        cache.decode_step(q)
    return time.perf_counter() - start


def _time_dense(keys: np.ndarray, values: np.ndarray, tokens) -> float:
    ks, vs, qs = tokens
    h, n, d = keys.shape
    k_all = np.empty((h, n + len(ks), d), dtype=np.float32)
    v_all = np.empty_like(k_all)
    k_all[:, :n] = keys
    v_all[:, :n] = values
    start = time.perf_counter()
    for t, (k, v, q) in enumerate(zip(ks, vs, qs)):
        k_all[:, n + t] = k
        v_all[:, n + t] = v
        dense_decode(q, k_all[:, : n + t + 1], v_all[:, : n + t + 1])
    return time.perf_counter() - start


def calibrate_for(cfg: BenchConfig, bits: int) -> CalibrationParams:
    """Grid search on a workload drawn with a seed disjoint from the benchmark's."""
    spec = WorkloadSpec(cfg.heads, cfg.tokens[0], cfg.head_dim, cfg.distribution, cfg.seed + 1)
    sample = sample_from_workload(generate(spec), QuantizationConfig(bits=bits, mode=cfg.mode))
    return grid_search([sample], cfg.grid)


def run_bench(cfg: BenchConfig) -> dict:
    kernel = KernelConfig(workers=cfg.workers)
    warmup()
    rows, throughput = [], []
    params_used = {}
    dist = cfg.distribution
    for n in cfg.tokens:
        wl = generate(WorkloadSpec(cfg.heads, n, cfg.head_dim, dist, cfg.seed))
        tokens = _step_tokens(cfg, n)
        target = exact_probs(wl.queries, wl.keys)
        fp32_bytes = 2 * cfg.heads * n * cfg.head_dim * 4
        rows.append({
            "variant": "fp32", "bitwidth": FP32_BITS, "calibrated": False, "mode": None, "n": n,
            "tau1": None, "tau2": None, "code_bytes": fp32_bytes, "stats_bytes": 0,
            "peak_bytes": 2 * cfg.heads * (n + cfg.steps) * cfg.head_dim * 4, "mse": 0.0,
            "prefill_seconds": 0.0,
        })
        if cfg.steps:
            secs = _time_dense(wl.keys, wl.values, tokens)
            throughput.append(_throughput_row("fp32", FP32_BITS, False, n, cfg.steps, secs))
        for bits in cfg.bits:
            if bits == FP32_BITS:
                continue
            variants = [("quant", IDENTITY)]
            if cfg.calibrated:
                if bits not in params_used:
                    params_used[bits] = cfg.params or calibrate_for(cfg, bits)
                variants.append(("quant_c", params_used[bits]))
            qcfg = QuantizationConfig(bits=bits, mode=cfg.mode)
            for variant, params in variants:
                start = time.perf_counter()
                cache = HybridKVCache.build(wl.keys, wl.values, qcfg, params, kernel)
                prefill = time.perf_counter() - start
                w_vis, _ = cache.attention_weights(wl.queries)
                mse = float(np.mean((w_vis - target) ** 2))
                mem = cache.memory()
                if cfg.steps:
                    secs = _time_quant(cache, tokens)
                    throughput.append(_throughput_row(variant, bits, variant == "quant_c", n, cfg.steps, secs))
                rows.append({
                    "variant": variant, "bitwidth": bits, "calibrated": variant == "quant_c",
                    "mode": Mode(cfg.mode).value, "n": n, "tau1": params.tau1, "tau2": params.tau2,
                    "code_bytes": mem.code_bytes, "stats_bytes": mem.stats_bytes,
                    "peak_bytes": cache.memory().total_bytes, "mse": mse, "prefill_seconds": prefill,
                })
    return {
        "config": cfg.as_dict(),
        "environment": environment(cfg.workers),
        "rows": rows,
        "throughput": throughput,
    }


def _throughput_row(variant: str, bits: int, calibrated: bool, n: int, steps: int, secs: float) -> dict:
    return {
        "variant": variant, "bitwidth": bits, "calibrated": calibrated, "n": n, "steps": steps,
        "decode_seconds": secs,
        "decode_tokens_per_sec": steps / secs if secs > 0 else math.inf,
    }


def strip_timing(report: dict) -> dict:
    """Copy of a report without wall-clock dependent fields."""
    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items() if k not in TIMING_FIELDS}
        if isinstance(obj, list):
            return [clean(v) for v in obj]
        return obj

    return clean(report)


def decode_throughput(bits: int, heads: int, n: int, d: int, steps: int, workers: int, seed: int = 0) -> float:
    """Tokens/sec of ``steps`` decode steps; ``bits == 16`` times the dense fp32 path."""
    warmup()
    wl = generate(WorkloadSpec(heads, n, d, seed=seed))
    cfg = BenchConfig(bits=[bits], heads=heads, tokens=[n], head_dim=d, steps=steps, seed=seed, workers=workers)
    tokens = _step_tokens(cfg, n)
    if bits == FP32_BITS:
        secs = _time_dense(wl.keys, wl.values, tokens)
    else:
        cache = HybridKVCache.build(wl.keys, wl.values, QuantizationConfig(bits=bits), IDENTITY,
                                    KernelConfig(workers=workers))
        secs = _time_quant(cache, tokens)
    return steps / secs


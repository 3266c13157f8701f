"""Slow, independent oracles for the optimized paths.

Nothing here shares code with the production modules: packing goes through
bit strings, quantization through scalar Python arithmetic, attention through
plain loops.  Every oracle is single-threaded.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError


def oracle_pack(codes: Sequence[int], code_bits: int, word_bits: int) -> list[int]:
    if code_bits < 1 or word_bits % code_bits:
        raise ConfigurationError(f"{code_bits} does not divide {word_bits}")
    per_word = word_bits // code_bits
    codes = [int(c) for c in codes]
    for c in codes:
        if not 0 <= c < 2**code_bits:
            raise DomainError(f"code {c} does not fit in {code_bits} bits")
    words = []
    for start in range(0, len(codes), per_word):
        group = codes[start:start + per_word]
        group += [0] * (per_word - len(group))
        bits = "".join(format(c, f"0{code_bits}b") for c in group)
        words.append(int(bits, 2))
    return words


def oracle_unpack(words: Iterable[int], code_bits: int, word_bits: int, count: int) -> list[int]:
    codes = []
    for w in words:
        bits = format(int(w), f"0{word_bits}b")
        codes.extend(int(bits[i:i + code_bits], 2) for i in range(0, word_bits, code_bits))
    return codes[:count]


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def oracle_quantize(m, alpha: Sequence[float], beta: Sequence[float], bits: int) -> list[list[int]]:
    levels = 2**bits - 1
    out = []
    for row in np.asarray(m, dtype=np.float32).tolist():
        codes = []
        for x, a, b in zip(row, alpha, beta):
            a, b = float(a), float(b)
            if b == a:
                codes.append(0)
                continue
            c = _round_half_away((x - a) * levels / (b - a))
            codes.append(min(max(c, 0), levels))
        out.append(codes)
    return out


def oracle_dequantize(codes, alpha: Sequence[float], beta: Sequence[float], bits: int) -> np.ndarray:
    levels = 2**bits - 1
    rows = []
    for row in np.asarray(codes).tolist():
        rows.append([c * (float(b) - float(a)) / levels + float(a) for c, a, b in zip(row, alpha, beta)])
    return np.array(rows, dtype=np.float64).reshape(np.shape(codes))


def oracle_softmax(scores: Sequence[float]) -> list[float]:
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    total = math.fsum(exps)
    return [e / total for e in exps]


def oracle_g(x: float, gamma: float, delta: float, tau1: float, tau2: float) -> float:
    if delta == gamma:
        return x - tau1
    return (delta - gamma + tau1 - tau2) / (delta - gamma) * (x - gamma) + gamma - tau1


def oracle_attention(q, keys, values, d: int | None = None) -> list[float]:
    """softmax(q K^T / sqrt(d)) V for one head, token loop outside, channel loop inside."""
    q = [float(x) for x in np.asarray(q, dtype=np.float64).ravel()]
    keys = np.asarray(keys, dtype=np.float64).tolist()
    values = np.asarray(values, dtype=np.float64).tolist()
    if not keys or len(keys[0]) != len(q) or len(values) != len(keys):
        raise DomainError("q, K and V dimensions disagree")
    d = len(q) if d is None else d
    scores = [math.fsum(qi * ki for qi, ki in zip(q, k)) / math.sqrt(d) for k in keys]
    weights = oracle_softmax(scores)
    width = len(values[0])
    return [math.fsum(weights[j] * values[j][i] for j in range(len(values))) for i in range(width)]


def oracle_hybrid_attention(q, k_vis, v_vis, k_tail, v_tail, tau1: float, tau2: float,
                            d: int | None = None) -> list[float]:
    """One head of the hybrid rule: calibrate the quantized-token scores only, then one softmax."""
    q = [float(x) for x in np.asarray(q, dtype=np.float64).ravel()]
    d = len(q) if d is None else d
    k_vis = np.asarray(k_vis, dtype=np.float64).tolist()
    k_tail = np.asarray(k_tail, dtype=np.float64).tolist()
    vis = [math.fsum(a * b for a, b in zip(q, k)) / math.sqrt(d) for k in k_vis]
    if vis:
        gamma, delta = min(vis), max(vis)
        vis = [oracle_g(s, gamma, delta, tau1, tau2) for s in vis]
    tail = [math.fsum(a * b for a, b in zip(q, k)) / math.sqrt(d) for k in k_tail]
    weights = oracle_softmax(vis + tail)
    values = np.asarray(v_vis, dtype=np.float64).tolist() + np.asarray(v_tail, dtype=np.float64).tolist()
    return [math.fsum(weights[j] * values[j][i] for j in range(len(values))) for i in range(len(q))]


def oracle_grid_mse(cal_set, grid) -> list[tuple[float, float, float]]:
    """Mean softmax MSE of every ``(tau1, tau2)`` cell, computed by dequantize-then-dense.

    ``cal_set`` items are ``(q, keys_exact, key_segments, d)`` with ``q`` of
    shape ``(h, d)`` and one quantized segment per head.
    """
    cal_set = list(cal_set)
    if not cal_set:
        raise DomainError("calibration set is empty")
    prepared = []
    for q, keys_exact, segments, d in cal_set:
        q = np.asarray(q, dtype=np.float64).reshape(len(segments), -1)
        quant_rows, exact_rows = [], []
        for h, seg in enumerate(segments):
            words = [int(w) for w in seg.codes.words]
            codes = np.array(oracle_unpack(words, seg.bits, seg.codes.word_bits, seg.n * seg.d)).reshape(seg.n, seg.d)
            k_deq = oracle_dequantize(codes, seg.stats.alpha, seg.stats.beta, seg.bits)
            quant_rows.append(k_deq @ q[h] / math.sqrt(d))
            exact = np.asarray(keys_exact[h], dtype=np.float64) @ q[h] / math.sqrt(d)
            z = np.exp(exact - exact.max())
            exact_rows.append(z / z.sum())
        prepared.append((quant_rows, exact_rows))
    table = []
    for tau1, tau2 in grid:
        per_sample = []
        for quant_rows, exact_rows in prepared:
            errs = []
            for s, target in zip(quant_rows, exact_rows):
                gamma, delta = s.min(), s.max()
                if delta == gamma:
                    cal = s - tau1
                else:
                    cal = (delta - gamma + tau1 - tau2) / (delta - gamma) * (s - gamma) + gamma - tau1
                z = np.exp(cal - cal.max())
                errs.append(np.mean((z / z.sum() - target) ** 2))
            per_sample.append(np.mean(errs))
        table.append((float(tau1), float(tau2), float(np.mean(per_sample))))
    return table


def oracle_argmin(table: Sequence[tuple[float, float, float]], rtol: float = 1e-9) -> tuple[float, float]:
    lowest = min(row[2] for row in table)
    best = None
    for tau1, tau2, mse in table:
        if mse <= lowest * (1 + rtol) and (best is None or (tau1, tau2) < best):
            best = (tau1, tau2)
    return best

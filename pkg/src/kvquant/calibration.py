"""Calibration of pre-softmax scores computed from a quantized key cache.

Quantized scores overshoot at both ends because the codebook always contains
the channel extremes.  ``g`` maps each score row affinely from its own range
``[gamma, delta]`` onto ``[gamma - tau1, delta - tau2]`` before the softmax.
One ``(tau1, tau2)`` pair is chosen by grid search and reused everywhere.
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError
from .kernels import KernelConfig, PackedHeads, _as_packed, naive_qk, qk_scores
from .quantizer import Mode, QuantizationConfig, quantize_matrix
from .tensor_core import Workload

DEFAULT_TAUS = (0.0, 1.0, 2.0, 3.0)
HIST_BINS = 50
OUTER_BINS = 5


class CalibrationWarning(UserWarning):
    """``g`` is not increasing for the given range and parameters."""


@dataclass(frozen=True)
class CalibrationParams:
    tau1: float = 0.0
    tau2: float = 0.0

    def __post_init__(self):
        for name in ("tau1", "tau2"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be a finite real >= 0, got {value}")
            object.__setattr__(self, name, value)

    @property
    def is_identity(self) -> bool:
        return self.tau1 == 0.0 and self.tau2 == 0.0

    def as_tuple(self) -> tuple[float, float]:
        return (self.tau1, self.tau2)


IDENTITY = CalibrationParams()


@dataclass(frozen=True)
class ScoreRange:
    gamma: float
    delta: float

    def __post_init__(self):
        if self.gamma > self.delta:
            raise DomainError(f"empty score range [{self.gamma}, {self.delta}]")

    @classmethod
    def of(cls, row) -> "ScoreRange":
        row = np.asarray(row)
        if row.size == 0:
            raise DomainError("score range of an empty row")
        return cls(float(row.min()), float(row.max()))


def grid_from_values(values: Iterable[float]) -> list[CalibrationParams]:
    values = sorted({float(v) for v in values})
    if not values:
        raise ConfigurationError("calibration grid is empty")
    return [CalibrationParams(t1, t2) for t1, t2 in itertools.product(values, values)]


DEFAULT_GRID = grid_from_values(DEFAULT_TAUS)


def g_transform(scores, p: CalibrationParams, score_range: ScoreRange | None = None) -> np.ndarray:
    """Apply ``g`` to one score row; the range defaults to the row's own min/max."""
    x = np.asarray(scores, dtype=np.float64)
    if p.is_identity:
        return x.copy()
    r = score_range or ScoreRange.of(x)
    width = r.delta - r.gamma
    if width == 0.0:
        return x - p.tau1
    slope_num = width + p.tau1 - p.tau2
    if slope_num <= 0:
        warnings.warn(
            f"calibration slope is not positive on range width {width:g} "
            f"with tau=({p.tau1:g}, {p.tau2:g}); score order is not preserved",
            CalibrationWarning,
            stacklevel=2,
        )
    return _affine(x, r.gamma, r.delta, p)


def _affine(x, gamma, delta, p: CalibrationParams):
    # two-point form of g: equal to the slope/intercept form, exact at both endpoints
    width = delta - gamma
    lo = gamma - p.tau1
    hi = delta - p.tau2
    return lo * ((delta - x) / width) + hi * ((x - gamma) / width)


def calibrate_rows(scores, p: CalibrationParams) -> np.ndarray:
    """Row-wise ``g`` where every row uses its own ``[gamma, delta]``."""
    x = np.asarray(scores, dtype=np.float64)
    if p.is_identity or x.shape[-1] == 0:
        return x.copy()
    gamma = x.min(axis=-1, keepdims=True)
    delta = x.max(axis=-1, keepdims=True)
    width = delta - gamma
    slope_num = width + p.tau1 - p.tau2
    if np.any((width > 0) & (slope_num <= 0)):
        warnings.warn(
            f"calibration slope is not positive for some rows with tau=({p.tau1:g}, {p.tau2:g})",
            CalibrationWarning,
            stacklevel=2,
        )
    flat = width == 0
    if np.any(flat):
        delta = np.where(flat, gamma + 1.0, delta)
        out = _affine(x, gamma, delta, p)
        return np.where(flat, x - p.tau1, out)
    return _affine(x, gamma, delta, p)


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def calibrated_scores(q, segments, p: CalibrationParams, d: int | None = None,
                      cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """``softmax(g(q K_deq^T / sqrt(d)))`` per head, ``(h, n)`` float64 rows."""
    packed = _as_packed(segments)
    d = packed.d if d is None else d
    raw = qk_scores(q, packed, cfg).astype(np.float64) / math.sqrt(d)
    return softmax(calibrate_rows(raw, p))


def exact_probs(q, keys, d: int | None = None) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.float32)
    q = np.asarray(q, dtype=np.float32).reshape(keys.shape[0], 1, keys.shape[-1])
    d = keys.shape[-1] if d is None else d
    return softmax(naive_qk(q.astype(np.float64), keys.astype(np.float64))[:, 0, :] / math.sqrt(d))


@dataclass(eq=False)
class CalibrationSample:
    """One attention instance: queries ``(h, d)``, exact keys ``(h, n, d)`` and their packed codes."""

    q: np.ndarray
    keys_exact: np.ndarray
    keys_quant: PackedHeads | Sequence
    d: int
    _scores: np.ndarray | None = field(default=None, repr=False)
    _target: np.ndarray | None = field(default=None, repr=False)

    def quant_scores(self) -> np.ndarray:
        if self._scores is None:
            packed = _as_packed(self.keys_quant)
            self._scores = qk_scores(self.q, packed).astype(np.float64) / math.sqrt(self.d)
        return self._scores

    def target(self) -> np.ndarray:
        if self._target is None:
            self._target = exact_probs(self.q, self.keys_exact, self.d)
        return self._target

    def mse(self, p: CalibrationParams) -> float:
        probs = softmax(calibrate_rows(self.quant_scores(), p))
        return float(np.mean((probs - self.target()) ** 2))


def sample_from_workload(wl: Workload, config: QuantizationConfig) -> CalibrationSample:
    segs = [quantize_matrix(wl.keys[i], config) for i in range(wl.spec.heads)]
    return CalibrationSample(wl.queries[:, 0, :], wl.keys, PackedHeads.from_segments(segs), wl.spec.head_dim)


def grid_table(cal_set: Sequence[CalibrationSample],
               grid: Iterable[CalibrationParams] = DEFAULT_GRID) -> list[tuple[CalibrationParams, float]]:
    """Mean softmax MSE over the calibration set for every grid cell, in grid order."""
    if not cal_set:
        raise DomainError("calibration set is empty")
    grid = list(grid)
    if not grid:
        raise ConfigurationError("calibration grid is empty")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CalibrationWarning)
        return [(p, float(np.mean([s.mse(p) for s in cal_set]))) for p in grid]


TIE_RTOL = 1e-9


def select_best(table: Sequence[tuple[CalibrationParams, float]]) -> CalibrationParams:
    """Lowest MSE; ties go to the smaller tau1, then the smaller tau2.

    Cells whose MSE is within ``TIE_RTOL`` of the minimum count as tied: shifting
    both taus by the same constant only shifts the scores, so such cells are
    equal up to rounding.
    """
    best = min(mse for _, mse in table)
    tied = [p for p, mse in table if mse <= best * (1 + TIE_RTOL)]
    return min(tied, key=lambda p: (p.tau1, p.tau2))


def grid_search(cal_set: Sequence[CalibrationSample],
                grid: Iterable[CalibrationParams] = DEFAULT_GRID) -> CalibrationParams:
    return select_best(grid_table(cal_set, grid))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

VARIANTS = ("exact", "quant", "quant_c")


@dataclass
class MSEReport:
    bits: int
    params: CalibrationParams
    mse_rows: list[tuple[str, int, float]]
    hist_rows: list[tuple[str, int, float, float, int]]

    def mean_mse(self, variant: str) -> float:
        return float(np.mean([m for v, _, m in self.mse_rows if v == variant]))

    def counts(self, variant: str, head: int) -> np.ndarray:
        return np.array([c for v, h, _, _, c in self.hist_rows if v == variant and h == head])

    def outer_mass(self, variant: str, outer: int = OUTER_BINS) -> int:
        """Entries in the ``outer`` lowest and highest bins, summed over heads."""
        heads = sorted({h for _, h, _, _, _ in self.hist_rows})
        total = 0
        for h in heads:
            c = self.counts(variant, h)
            total += int(c[:outer].sum() + c[-outer:].sum())
        return total

    def write_csv(self, mse_path: Path | str, hist_path: Path | str) -> None:
        with open(mse_path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["variant", "head", "mse"])
            out.writerows((v, h, repr(m)) for v, h, m in self.mse_rows)
        with open(hist_path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["variant", "head", "bin_left", "bin_right", "count"])
            out.writerows((v, h, repr(lo), repr(hi), c) for v, h, lo, hi, c in self.hist_rows)


def mse_report(workload: Workload, bits: int, p: CalibrationParams,
               mode: Mode | str = Mode.CHANNEL_WISE, bins: int = HIST_BINS) -> MSEReport:
    """Per-head softmax MSE of Quant and Quant-C against Exact, plus score histograms.

    Each head's histogram shares one set of edges spanning all three variants.
    """
    sample = sample_from_workload(workload, QuantizationConfig(bits=bits, mode=mode))
    exact = naive_qk(workload.queries.astype(np.float64), workload.keys.astype(np.float64))[:, 0, :]
    exact /= math.sqrt(workload.spec.head_dim)
    quant = sample.quant_scores()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CalibrationWarning)
        quant_c = calibrate_rows(quant, p)
    target = softmax(exact)
    mse_rows, hist_rows = [], []
    for variant, scores in zip(VARIANTS, (exact, quant, quant_c)):
        err = np.mean((softmax(scores) - target) ** 2, axis=-1)
        mse_rows.extend((variant, h, float(err[h])) for h in range(workload.spec.heads))
    for h in range(workload.spec.heads):
        pooled = np.concatenate([exact[h], quant[h], quant_c[h]])
        lo, hi = float(pooled.min()), float(pooled.max())
        if hi == lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins + 1)
        for variant, scores in zip(VARIANTS, (exact, quant, quant_c)):
            counts, _ = np.histogram(scores[h], edges)
            hist_rows.extend(
                (variant, h, float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)
            )
    return MSEReport(bits, p, mse_rows, hist_rows)

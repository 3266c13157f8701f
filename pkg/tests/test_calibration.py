import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvquant.calibration import (
    DEFAULT_GRID,
    IDENTITY,
    CalibrationParams,
    CalibrationWarning,
    ScoreRange,
    calibrate_rows,
    calibrated_scores,
    exact_probs,
    g_transform,
    grid_from_values,
    grid_search,
    grid_table,
    mse_report,
    sample_from_workload,
    select_best,
    softmax,
)
from kvquant.errors import ConfigurationError, DomainError
from kvquant.quantizer import QuantizationConfig, quantize_matrix
from kvquant.tensor_core import HeavyTailed, OutlierChannels, WorkloadSpec, generate


def test_g_worked_example():
    out = g_transform([0.0, 10.0, 5.0], CalibrationParams(2, 1), ScoreRange(0.0, 10.0))
    assert out.tolist() == [-2.0, 9.0, 3.5]


@given(
    row=st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=40),
    tau1=st.floats(0, 3),
    tau2=st.floats(0, 3),
)
def test_g_endpoints(row, tau1, tau2):
    row = np.array(row)
    r = ScoreRange.of(row)
    p = CalibrationParams(tau1, tau2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CalibrationWarning)
        lo, hi = g_transform([r.gamma, r.delta], p, r)
    if r.delta == r.gamma:
        assert lo == hi == r.gamma - tau1
    else:
        assert abs(lo - (r.gamma - tau1)) <= 4 * np.spacing(abs(r.gamma) + tau1)
        assert abs(hi - (r.delta - tau2)) <= 4 * np.spacing(abs(r.delta) + tau2)


@given(row=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
def test_zero_taus_are_identity(row):
    row = np.array(row)
    assert np.array_equal(g_transform(row, IDENTITY), row)
    assert np.array_equal(calibrate_rows(row[None], IDENTITY)[0], row)


def test_g_is_affine(rng):
    x = rng.normal(size=100) * 3
    y = g_transform(x, CalibrationParams(1, 3))
    slope = np.diff(y) / np.diff(x)
    assert np.allclose(slope, slope[0], rtol=1e-9)
    assert slope[0] > 0


def test_non_increasing_g_warns():
    with pytest.warns(CalibrationWarning):
        g_transform([0.0, 1.0], CalibrationParams(0, 3))
    with pytest.warns(CalibrationWarning):
        calibrate_rows(np.array([[0.0, 1.0], [0.0, 10.0]]), CalibrationParams(0, 3))


def test_flat_row_shifts_by_tau1():
    assert calibrate_rows(np.array([[2.0, 2.0, 2.0]]), CalibrationParams(1.5, 0.5)).tolist() == [[0.5] * 3]
    assert g_transform([4.0], CalibrationParams(1, 2)).tolist() == [3.0]


def test_rows_are_independent(rng):
    rows = rng.normal(size=(4, 30)) * np.array([[1], [5], [0.1], [20]])
    p = CalibrationParams(2, 1)
    together = calibrate_rows(rows, p)
    for i in range(4):
        assert np.allclose(together[i], g_transform(rows[i], p), rtol=0, atol=1e-12)


def test_params_validation():
    with pytest.raises(ConfigurationError):
        CalibrationParams(-1, 0)
    with pytest.raises(ConfigurationError):
        CalibrationParams(0, math.nan)
    with pytest.raises(ConfigurationError):
        grid_from_values([])
    with pytest.raises(DomainError):
        ScoreRange(2.0, 1.0)


def test_default_grid_is_four_by_four():
    assert len(DEFAULT_GRID) == 16
    assert {p.tau1 for p in DEFAULT_GRID} == {0.0, 1.0, 2.0, 3.0}


def _heads(rng, h=4, n=128, d=32, bits=1, dist="t"):
    keys = rng.standard_t(3, size=(h, n, d)).astype(np.float32) if dist == "t" else \
        rng.normal(size=(h, n, d)).astype(np.float32)
    q = rng.normal(size=(h, d)).astype(np.float32)
    segs = [quantize_matrix(keys[i], QuantizationConfig(bits=bits)) for i in range(h)]
    return q, keys, segs


@pytest.mark.parametrize("p", [IDENTITY, CalibrationParams(1, 2), CalibrationParams(3, 0)])
def test_calibrated_rows_are_distributions(rng, p):
    q, _, segs = _heads(rng)
    probs = calibrated_scores(q, segs, p)
    assert (probs >= 0).all()
    assert np.allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_eight_bit_identity_tracks_exact(rng):
    q, keys, segs = _heads(rng, bits=8, dist="normal")
    got = calibrated_scores(q, segs, IDENTITY)
    want = exact_probs(q, keys)
    assert np.abs(got - want).max() <= 1e-3


@given(shift=st.floats(-50, 50), tau1=st.floats(0, 3), tau2=st.floats(0, 3))
def test_softmax_of_g_ignores_score_shift(shift, tau1, tau2):
    row = np.random.default_rng(3).normal(size=64) * 4
    p = CalibrationParams(tau1, tau2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CalibrationWarning)
        a = softmax(g_transform(row, p))
        b = softmax(g_transform(row + shift, p))
    assert np.abs(a - b).max() <= 1e-9


def test_equal_tau_shift_gives_equal_probabilities(rng):
    row = rng.normal(size=50)
    a = softmax(g_transform(row, CalibrationParams(0, 2)))
    b = softmax(g_transform(row, CalibrationParams(1, 3)))
    assert np.abs(a - b).max() <= 1e-12


def _sample(seed, bits, h=4, n=256, d=32, dist=None):
    spec = WorkloadSpec(h, n, d, dist or HeavyTailed(3), seed)
    return sample_from_workload(generate(spec), QuantizationConfig(bits=bits))


def test_eight_bit_grid_search_picks_identity():
    assert grid_search([_sample(s, 8) for s in range(2)]) == IDENTITY


def test_singleton_grid_returns_its_cell():
    only = CalibrationParams(2, 3)
    assert grid_search([_sample(0, 1)], [only]) == only


def test_one_bit_search_never_worse_than_identity():
    cal = [_sample(s, 1) for s in range(3)]
    table = dict(grid_table(cal))
    best = grid_search(cal)
    assert table[best] <= table[IDENTITY]


def test_tie_break_prefers_smaller_taus():
    table = [(CalibrationParams(1, 3), 0.5), (CalibrationParams(0, 2), 0.5 * (1 + 1e-12)),
             (CalibrationParams(2, 0), 0.7)]
    assert select_best(table) == CalibrationParams(0, 2)


def test_empty_calibration_set():
    with pytest.raises(DomainError):
        grid_table([])


def test_eight_bit_report_is_near_exact():
    wl = generate(WorkloadSpec(2, 512, 32, HeavyTailed(3), 0))
    rep = mse_report(wl, 8, IDENTITY)
    assert max(m for v, _, m in rep.mse_rows if v == "quant") < 1e-6
    assert all(m == 0.0 for v, _, m in rep.mse_rows if v == "exact")


def test_histogram_counts_every_token():
    wl = generate(WorkloadSpec(3, 300, 16, OutlierChannels(), 1))
    rep = mse_report(wl, 1, CalibrationParams(0, 3), bins=20)
    for v in ("exact", "quant", "quant_c"):
        for h in range(3):
            c = rep.counts(v, h)
            assert len(c) == 20 and c.sum() == 300


def test_csv_layout(tmp_path):
    wl = generate(WorkloadSpec(2, 64, 16, HeavyTailed(3), 2))
    rep = mse_report(wl, 2, CalibrationParams(1, 2), bins=10)
    rep.write_csv(tmp_path / "mse.csv", tmp_path / "hist.csv")
    with open(tmp_path / "mse.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["variant", "head", "mse"]
    assert sorted((r["variant"], r["head"]) for r in rows) == sorted(
        (v, str(h)) for v in ("exact", "quant", "quant_c") for h in range(2))
    with open(tmp_path / "hist.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["variant", "head", "bin_left", "bin_right", "count"]
    assert len(rows) == 3 * 2 * 10
    assert all(float(r["bin_left"]) < float(r["bin_right"]) for r in rows)

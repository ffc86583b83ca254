"""Cutoff recursion, reflected averages, and the dense cross-check route."""

import json
from fractions import Fraction

import numpy as np
import pytest
from numpy.testing import assert_allclose

from oscavg import construction
from oscavg.construction import (Cutoffs, build_report, compare_with_oracle,
                                 cross_gram, cross_inner, dense_oracle,
                                 peak_rows, reflected_inner, reflected_series,
                                 running_averages, select_cutoffs)
from oscavg.errors import HorizonExhaustedFault, NumericalFault
from oscavg.krylov import GramLadder
from oscavg.spectral import (Arc, ConvolutionTruncated, CorrelationSequence,
                             Lebesgue)


def lebesgue_recursion_oracle(depth):
    """Exact cutoffs and averages for the flat spectrum, by hand.

    Orbit vectors are orthonormal, so the projection of vector i onto the
    first n_k of them has norm 1 for i < n_k and 0 after.  The running
    average of norms is then n_k / n, and the least n driving it strictly
    below 1/(k+1) is (k+1) * n_k + 1.  Block masses make a(i) = +1 on odd
    slabs and -1 on even ones, so A(n) telescopes to an exact rational.
    """
    ns = [1]
    alphas = [Fraction(0)]
    for k in range(1, depth):
        nxt = (k + 1) * ns[-1] + 1
        alphas.append(Fraction(ns[-1], nxt))
        ns.append(nxt)
    signs = []
    for k in range(depth):
        lo = 0 if k == 0 else ns[k - 1]
        signs.extend([(-1) ** k] * (ns[k] - lo))
    averages = [Fraction(0)]
    total = 0
    for n, s in enumerate(signs, start=1):
        total += s
        averages.append(Fraction(total, n))
    return ns, alphas, averages


def test_lebesgue_cutoffs_match_recursion_oracle():
    seq = CorrelationSequence(Lebesgue())
    got = select_cutoffs(seq, 7)
    ns, alphas, _ = lebesgue_recursion_oracle(7)
    assert got.ns == tuple(ns) == (1, 3, 10, 41, 206, 1237, 8660)
    assert_allclose(got.alphas, [float(a) for a in alphas], rtol=0, atol=1e-15)
    assert got.time_label == "identity"


def test_lebesgue_averages_are_exact():
    report = build_report(CorrelationSequence(Lebesgue()), 7)
    ns, _, averages = lebesgue_recursion_oracle(7)
    assert report.jitter_used == 0.0
    for k, n in enumerate(ns, start=1):
        assert report.averages[n - 1] == pytest.approx(
            float(averages[n]), abs=1e-15)
        # the peak alternates sign and closes in on +-1 like 1/k
        assert averages[n] * (-1) ** (k - 1) > 0


def test_arc_cutoffs_frozen():
    # regression pins: these move only if the jitter policy moves
    half = select_cutoffs(CorrelationSequence(Arc(0.5)), 4)
    assert half.ns == (1, 9, 120, 857)
    assert_allclose(half.alphas, (0.0, 0.499536, 0.332289, 0.249795),
                    rtol=0, atol=5e-7)
    full = select_cutoffs(CorrelationSequence(Arc(1.0)), 4)
    assert full.ns == (1, 6, 56, 401)
    assert_allclose(full.alphas, (0.0, 0.454024, 0.328928, 0.249667),
                    rtol=0, atol=5e-7)
    for cuts in (half, full):
        for k in range(2, 5):
            assert cuts.alphas[k - 1] < 1.0 / k


def test_selected_cutoff_is_minimal():
    seq = CorrelationSequence(Arc(0.5))
    ladder = GramLadder(seq, cutoffs=(1, 9))
    norms = np.sqrt([ladder.projection_norm_sq(1, i) for i in range(9)])
    averages = np.cumsum(norms) / np.arange(1, 10)
    assert np.all(averages[1:-1] >= 0.5)
    assert averages[-1] < 0.5


def test_cutoffs_reject_weak_projection_average():
    with pytest.raises(NumericalFault):
        Cutoffs(ns=(1, 5), alphas=(0.0, 0.5), horizon=100)
    Cutoffs(ns=(1, 5), alphas=(0.0, 0.499), horizon=100)


def test_reflected_series_matches_pointwise():
    ladder = GramLadder(CorrelationSequence(Arc(0.5)), cutoffs=(1, 9, 120))
    series = reflected_series(ladder)
    assert series.shape == (120,)
    for i in (0, 1, 8, 9, 63, 119):
        assert series[i] == pytest.approx(reflected_inner(ladder, i),
                                          abs=1e-14)
    assert np.all(np.abs(series) <= 1.0)
    for bad in (-1, 120):
        with pytest.raises(ValueError):
            reflected_inner(ladder, bad)
        with pytest.raises(ValueError):
            cross_inner(ladder, bad, 0)


def test_cross_base_column_is_correlation():
    # vector 0 lives in the first slab, which the reflection leaves alone
    seq = CorrelationSequence(Arc(0.5))
    ladder = GramLadder(seq, cutoffs=(1, 9, 120))
    col = np.array([cross_inner(ladder, i, 0) for i in range(120)])
    assert_allclose(col, seq.correlations(np.arange(120)), rtol=0, atol=1e-15)


def test_cross_gram_consistency():
    ladder = GramLadder(CorrelationSequence(Arc(1.0)), cutoffs=(1, 6, 56))
    cross = cross_gram(ladder)
    assert cross.shape == (56, 56)
    assert_allclose(cross, cross.T, rtol=0, atol=1e-12)
    assert_allclose(np.diagonal(cross), reflected_series(ladder),
                    rtol=0, atol=1e-12)
    for i, j in ((0, 5), (17, 3), (55, 20)):
        assert cross[i, j] == pytest.approx(cross_inner(ladder, i, j),
                                            abs=1e-12)


def test_running_averages_prefix_sums():
    assert_allclose(running_averages(np.array([1.0, -1.0, 1.0])),
                    [1.0, 0.0, 1.0 / 3.0])
    with pytest.raises(ValueError):
        running_averages(np.array([]))
    with pytest.raises(ValueError):
        running_averages(np.ones((2, 2)))


def test_peak_rows_track_bound():
    report = build_report(CorrelationSequence(Arc(0.5)), 4)
    assert [row.n for row in report.peaks] == [1, 9, 120, 857]
    for row in report.peaks:
        assert row.target == (1.0 if row.level % 2 == 1 else -1.0)
        assert row.error == pytest.approx(
            abs(report.averages[row.n - 1] - row.target), abs=0)
        if row.level >= 2:
            assert row.bound == 2.0 / row.level
            assert row.within and row.error < row.bound
    assert report.averages[0] == 1.0


def test_build_report_on_truncated_convolution():
    report = build_report(CorrelationSequence(ConvolutionTruncated(4, 3)), 2)
    assert report.cutoffs.ns == (1, 4)
    assert report.cutoffs.horizon == 16
    assert all(row.within for row in report.peaks)


def test_dense_oracle_lebesgue_exact():
    oracle = dense_oracle(CorrelationSequence(Lebesgue()), (1, 3, 10))
    assert oracle["jitter"] == 0.0
    want_a = np.array([1.0] + [-1.0] * 2 + [1.0] * 7)
    assert_allclose(oracle["a"], want_a, rtol=0, atol=1e-14)
    assert_allclose(oracle["cross"], np.diag(want_a), rtol=0, atol=1e-14)
    for key in ("w_symmetry_error", "w_involution_error",
                "w_commutation_error", "v_isometry_error"):
        assert oracle[key] < 1e-12


def test_compare_with_oracle_lebesgue_zero():
    seq = CorrelationSequence(Lebesgue())
    delta = compare_with_oracle(seq, (1, 3, 10, 41))
    assert delta["jitter_engine"] == delta["jitter_oracle"] == 0.0
    assert delta["max_a_delta"] <= 1e-12
    assert delta["max_cross_delta"] <= 1e-12
    assert delta["max_block_sum_error"] <= 1e-12


def test_compare_with_oracle_arc_jittered():
    seq = CorrelationSequence(Arc(0.5))
    delta = compare_with_oracle(seq, (1, 9, 120))
    # the bare 120-window is numerically singular, so both routes must have
    # settled on the same regularization before any values can agree
    assert delta["jitter_engine"] == delta["jitter_oracle"] > 0.0
    assert delta["max_a_delta"] <= 1e-8
    assert delta["max_cross_delta"] <= 1e-8
    assert delta["max_block_sum_error"] <= 1e-8
    assert delta["v_isometry_error"] <= 1e-8
    assert delta["w_involution_error"] <= 1e-12


def test_dense_oracle_input_validation():
    seq = CorrelationSequence(Lebesgue())
    with pytest.raises(ValueError):
        dense_oracle(seq, (3, 3, 10))
    with pytest.raises(ValueError):
        dense_oracle(seq, ())
    with pytest.raises(ValueError):
        dense_oracle(seq, (1, 600), cap=512)


def test_horizon_exhaustion_carries_context():
    seq = CorrelationSequence(ConvolutionTruncated(4, 3))
    with pytest.raises(HorizonExhaustedFault) as info:
        select_cutoffs(seq, 7)
    fault = info.value
    assert fault.exit_code == 3
    assert fault.level == 3
    assert fault.horizon == 16
    assert fault.best_average is not None and fault.best_average >= 1.0 / 3.0


def test_dense_budget_refusal(monkeypatch):
    seq = CorrelationSequence(Arc(0.5))
    monkeypatch.setattr(construction, "DENSE_SEARCH_CAP", 8)
    with pytest.raises(HorizonExhaustedFault) as info:
        select_cutoffs(seq, 4)
    assert info.value.level == 3
    monkeypatch.setattr(construction, "DENSE_SEARCH_CAP", 4096)
    monkeypatch.setattr(construction, "DENSE_WINDOW_CAP", 100)
    with pytest.raises(HorizonExhaustedFault) as info:
        select_cutoffs(seq, 4)
    assert info.value.level == 3
    # the refused cutoff had already met its target average
    assert 0.3 < info.value.best_average < 1.0 / 3.0


def test_subsequence_times():
    seq = CorrelationSequence(Lebesgue())
    cuts = select_cutoffs(seq, 3, times=np.arange(0, 100, 2))
    # along any strictly increasing times the flat spectrum looks the same
    assert cuts.ns == (1, 3, 10)
    assert cuts.time_label == "subsequence"
    ladder = GramLadder(seq, cutoffs=(1, 3, 10), times=lambda i: 3 * i)
    assert_allclose(reflected_series(ladder),
                    [1.0] + [-1.0] * 2 + [1.0] * 7, rtol=0, atol=1e-14)


def test_report_json_round_trip():
    report = build_report(CorrelationSequence(Arc(1.0)), 3, oracle=True)
    doc = report.to_json_dict()
    parsed = json.loads(json.dumps(doc))
    assert parsed["cutoffs"] == [1, 6, 56]
    assert parsed["depth"] == 3
    assert parsed["oracle"]["levels_compared"] == 3
    assert parsed["oracle"]["max_a_delta"] <= 1e-8
    assert len(parsed["peaks"]) == 3
    assert parsed["wiener_average_at_horizon"] < 0.05

"""Incremental window factorization against dense numpy recomputation."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from oscavg.errors import NonPsdFault
from oscavg.krylov import (GramLadder, JITTER_LADDER, PIVOT_FLOOR,
                           stability_floor)
from oscavg.spectral import (Arc, ConvolutionTruncated, CorrelationSequence,
                             Lebesgue, RawTable, toeplitz_window)


def arc_seq():
    return CorrelationSequence(Arc(0.5))


def banded_seq():
    # finite support keeps the ladder on its banded storage path
    return CorrelationSequence(RawTable((1.0, 0.55, 0.2)))


def dense_masses(seq, size, jitter, index):
    """Slab masses of orbit vector `index` from a one-shot dense solve."""
    gram = toeplitz_window(seq, size) + jitter * np.eye(size)
    rhs = seq.correlations(np.abs(np.arange(size) - index))
    coords = np.linalg.solve(np.linalg.cholesky(gram),
                             rhs)
    return coords ** 2


def test_factor_reproduces_window():
    seq = arc_seq()
    ladder = GramLadder(seq, cutoffs=(1, 9, 120))
    lower = ladder.factor_matrix()
    gram = toeplitz_window(seq, 120) + ladder.jitter_used * np.eye(120)
    assert_allclose(lower @ lower.T, gram, atol=1e-13)
    assert ladder.factor_residual(120) < 1e-13


def test_banded_factor_matches_dense_factor():
    seq = banded_seq()
    banded = GramLadder(seq, cutoffs=(1, 3, 12))
    lower = banded.factor_matrix()
    gram = toeplitz_window(seq, 12)
    assert_allclose(lower @ lower.T, gram + banded.jitter_used * np.eye(12),
                    atol=1e-14)
    # every row's slab masses agree with a one-shot dense solve
    cuts = np.array([1, 3, 12])
    for i in (0, 2, 5, 11):
        masses = dense_masses(seq, 12, banded.jitter_used, i)
        want_p = np.array([masses[:n].sum() for n in cuts])
        profile = banded.block_profile(i)
        assert_allclose(profile.p, np.minimum(want_p, 1.0), atol=1e-10)
        assert_allclose(profile.q, np.diff(np.concatenate([[0.0], profile.p])),
                        atol=1e-12)


def test_projection_norms_match_dense_solve():
    # tolerances track conditioning: the banded table is benign, the arc
    # window 5 has eig_min ~ 3e-7, and the (1,9,120) ladder runs jittered
    # because the bare 120-window goes numerically singular
    cases = [
        (banded_seq(), (1, 3, 12), 1e-14),
        (arc_seq(), (1, 5), 5e-9),
        (arc_seq(), (1, 9, 120), 1e-8),
    ]
    for seq, cuts, tol in cases:
        ladder = GramLadder(seq, cutoffs=cuts)
        jit = ladder.jitter_used
        for level, window in enumerate(cuts, start=1):
            gram = toeplitz_window(seq, window) + jit * np.eye(window)
            for i in (0, 3, window - 1, window + 20, 3 * window):
                rhs = seq.correlations(np.abs(np.arange(window) - i))
                want = float(rhs @ np.linalg.solve(gram, rhs))
                got = ladder.projection_norm_sq(level, i)
                assert got == pytest.approx(min(want, 1.0), abs=tol)


def test_in_window_projection_is_complete():
    ladder = GramLadder(arc_seq(), cutoffs=(1, 9, 120))
    for i in (0, 5, 40, 119):
        profile = ladder.block_profile(i)
        assert profile.p[-1] == pytest.approx(1.0, abs=1e-8)
        assert profile.q.sum() == pytest.approx(1.0, abs=1e-8)
        assert np.all(profile.q >= 0.0)
        assert np.all(np.diff(profile.p) >= -1e-12)


def test_block_profile_beyond_window():
    ladder = GramLadder(arc_seq(), cutoffs=(1, 9, 120))
    profile = ladder.block_profile(500)
    assert profile.p[-1] < 1.0
    assert np.all(np.diff(profile.p) >= -1e-12)
    assert profile.q.sum() <= 1.0 + 1e-12


def test_even_mass_series_matches_profiles():
    ladder = GramLadder(arc_seq(), cutoffs=(1, 9, 120))
    series = ladder.even_mass_series(120)
    for i in (0, 1, 8, 9, 60, 119):
        q = ladder.block_profile(i).q
        assert series[i] == pytest.approx(float(q[1]), abs=1e-12)
    with pytest.raises(ValueError):
        ladder.even_mass_series(121)


def test_even_block_dot_symmetry():
    ladder = GramLadder(arc_seq(), cutoffs=(1, 9, 120))
    assert ladder.even_block_dot(3, 17) == pytest.approx(
        ladder.even_block_dot(17, 3), abs=1e-14)
    # row 0 spans the first (odd) slab only
    assert ladder.even_block_dot(40, 0) == 0.0


def test_lebesgue_band_is_identity():
    ladder = GramLadder(CorrelationSequence(Lebesgue()), cutoffs=(1, 3, 10))
    assert ladder.jitter_used == 0.0
    series = ladder.even_mass_series(10)
    # slab 2 covers indices 1 and 2; each orbit vector is its own slab axis
    assert_allclose(series, [0, 1, 1, 0, 0, 0, 0, 0, 0, 0])


def test_jitter_escalates_on_rank_deficiency():
    seq = CorrelationSequence(ConvolutionTruncated(4, 2))
    ladder = GramLadder(seq)
    ladder.extend(9)  # only 4 atoms, so rank <= 4 and pivots collapse
    assert ladder.jitter_used > 0.0
    assert ladder.jitter_used >= stability_floor(seq, 9)
    assert ladder.jitter_generation >= 1
    assert ladder.diagnostics["jitter_events"]
    assert ladder.factor_residual(9) < 1e-12


def test_jitter_floor_grows_with_window():
    seq = arc_seq()
    small = stability_floor(seq, 10)
    large = stability_floor(seq, 1000)
    assert PIVOT_FLOOR <= small < large
    assert large < JITTER_LADDER[-1]


def test_non_psd_table_raises_after_schedule():
    seq = CorrelationSequence.from_values([1.0, 1.2])
    ladder = GramLadder(seq)
    with pytest.raises(NonPsdFault) as info:
        ladder.extend(2)
    assert info.value.exit_code == 4


def test_cutoff_bookkeeping():
    ladder = GramLadder(arc_seq())
    ladder.set_cutoffs((1, 9))
    assert ladder.cutoffs == (1, 9)
    assert ladder.depth == 2
    ladder.append_cutoff(120)
    assert ladder.cutoffs == (1, 9, 120)
    with pytest.raises(ValueError):
        ladder.append_cutoff(50)
    with pytest.raises(ValueError):
        ladder.set_cutoffs((3, 2))
    stats = ladder.diagnostics["cutoff_stats"]
    assert [s["n"] for s in stats] == [1, 9, 120]


def test_time_sequence_windows():
    seq = arc_seq()
    times = np.arange(0, 40, 2)
    ladder = GramLadder(seq, times=times)
    ladder.extend(5)
    want = seq.correlations(np.abs(np.subtract.outer(times[:5], times[:5])))
    lower = ladder.factor_matrix()
    assert_allclose(lower @ lower.T,
                    want + ladder.jitter_used * np.eye(5), atol=1e-14)
    # bad time sequences surface on first use, not at construction
    with pytest.raises(ValueError):
        GramLadder(seq, times=np.array([0, 0, 1])).extend(3)
    with pytest.raises(ValueError):
        GramLadder(seq, times=np.array([-1, 2])).extend(2)
    with pytest.raises(ValueError):
        GramLadder(seq, times=times).extend(len(times) + 1)

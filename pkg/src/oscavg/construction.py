"""Cutoff selection, reflected inner products, and oscillating averages.

Pipeline: pick cutoffs n_1 < ... < n_K so that the average of the projection
norms onto each window dies below 1/(k+1); split the final window into the
blocks between consecutive cutoffs; flip the sign of every even block.  The
flipped form a(i) of each orbit vector then spends block k close to
(-1)^{k-1}, so the running averages A(n) swing between +1 and -1 with peak
error below 2/k at n_k.

All inner products come from coordinate rows of the triangular Gram factor:
the blocks are exact coordinate slabs there, so a(i) and the cross products
reduce to signed partial sums of factor rows.  An explicit dense oracle
(materialized projectors, reflection matrix, full matrix products) recomputes
everything independently for moderate window sizes.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cholesky as dense_cholesky

from .errors import HorizonExhaustedFault, NumericalFault
from .krylov import JITTER_LADDER, GramLadder, stability_floor
from .spectral import CorrelationSequence, wiener_average

DEFAULT_HORIZON = 100_000
ORACLE_CAP = 512

# a(i) may leave [-1, 1] by rounding; past this margin the window is too
# ill-conditioned to clip silently and the run aborts instead.
CLIP_ABORT = 1e-6

# Budgets for families without finite correlation support (dense factor).
# A level-k search costs O(horizon * n_k^2) and the factor O(n^2) memory,
# so past these sizes a deeper ladder stops being a few-second operation
# and the search refuses instead of grinding or exhausting memory.
DENSE_SEARCH_CAP = 4096
DENSE_WINDOW_CAP = 12288

_SCAN_BATCH = 512


@dataclass(frozen=True)
class Cutoffs:
    """Selected cutoffs with the achieved projection averages.

    alphas[k-1] is (1/n_k) * sum_{i<n_k} ||proj. of orbit vector i onto
    window k-1||, the quantity the selection drives strictly below 1/k
    (level 1 has no previous window, so alphas[0] = 0).
    """

    ns: Tuple[int, ...]
    alphas: Tuple[float, ...]
    horizon: int
    time_label: str = "identity"

    @property
    def depth(self) -> int:
        return len(self.ns)

    def __post_init__(self):
        for k, alpha in enumerate(self.alphas[1:], start=2):
            if not alpha < 1.0 / k:
                raise NumericalFault(
                    f"selected cutoff {self.ns[k - 1]} has projection average "
                    f"{alpha} >= 1/{k}"
                )


def _first_orthogonal_index(ladder: GramLadder, window: int) -> Optional[int]:
    """Smallest i with orbit vector i orthogonal to the window, if known.

    Finite correlation support w makes every i with t(i) > t(window-1) + w
    orthogonal to span{orbit vectors < window}; from there on the running
    sum of projection norms is frozen and the minimal admissible n has a
    closed form.
    """
    support = ladder.seq.support
    if support is None:
        return None
    if ladder.has_identity_times:
        return window + support
    limit = int(ladder.times_upto(window)[window - 1]) + support
    i = window
    while True:
        times = ladder.times_upto(2 * i)
        beyond = np.searchsorted(times, limit, side="right")
        if beyond < len(times):
            return int(beyond)
        i = 2 * i


def _search_next_cutoff(ladder: GramLadder, level: int, horizon: int):
    """Minimal n > n_level with (1/n) sum_{i<n} sqrt(p_level(i)) < 1/(level+1).

    Returns (n, achieved_average) or raises HorizonExhaustedFault carrying
    the best (smallest) average seen before the horizon cut the search off.
    """
    window = ladder.cutoffs[level - 1]
    target = 1.0 / (level + 1)
    frozen_at = _first_orthogonal_index(ladder, window)
    running = 0.0
    best = math.inf
    i = 0
    scan_top = horizon if frozen_at is None else min(frozen_at, horizon)
    while i < scan_top:
        hi = min(i + _SCAN_BATCH, scan_top)
        norms = ladder.sqrt_norm_batch(window, np.arange(i, hi))
        sums = running + np.cumsum(norms)
        ns = np.arange(i + 1, hi + 1)
        averages = sums / ns
        live = ns > window
        hits = np.flatnonzero(live & (averages < target))
        if live.any():
            best = min(best, float(averages[live].min()))
        if hits.size:
            n = int(ns[hits[0]])
            return n, float(averages[hits[0]])
        running = float(sums[-1])
        i = hi
    if frozen_at is not None and i == frozen_at and frozen_at <= horizon:
        # Sum frozen from here on: minimal n is the first integer with
        # running/n < target, i.e. floor(running/target) + 1.
        n = math.floor(running / target) + 1
        n = max(n, window + 1, frozen_at)
        while running / n >= target:  # guard the floating floor
            n += 1
        if n <= horizon:
            return n, running / n
        best = min(best, running / horizon)
    raise HorizonExhaustedFault(
        f"level {level + 1} cutoff search passed horizon {horizon} "
        f"(best projection average {best:.6g}, target < {target:.6g})",
        level=level + 1,
        horizon=horizon,
        best_average=best,
    )


def select_cutoffs(seq: CorrelationSequence, depth: int,
                   max_horizon: int = DEFAULT_HORIZON,
                   times=None, ladder: Optional[GramLadder] = None) -> Cutoffs:
    """Run the cutoff recursion to the requested depth.

    n_1 = 1; each next cutoff is the minimal strictly admissible n.  When a
    pivot failure escalates the jitter mid-selection the factor changes under
    every previously computed projection norm, so the whole selection restarts
    at the new jitter level; the schedule is finite, hence so are restarts.

    Passing a ladder reuses its factor and leaves the cutoffs registered on
    it.  Families with a validity horizon cap the search there regardless of
    max_horizon.
    """
    depth = int(depth)
    if depth < 1:
        raise ValueError("depth must be >= 1")
    horizon = int(max_horizon)
    if horizon < 1:
        raise ValueError("max_horizon must be >= 1")
    label = "identity"
    if times is not None or (ladder is not None and not ladder.has_identity_times):
        label = "subsequence"
    if seq.validity_horizon is not None:
        horizon = min(horizon, seq.validity_horizon)
    if ladder is None:
        ladder = GramLadder(seq, times=times)
    while True:
        generation = ladder.jitter_generation
        ladder.reset_cutoffs()
        ladder.append_cutoff(1)
        alphas = [0.0]
        restarted = ladder.jitter_generation != generation
        dense = seq.support is None
        while not restarted and ladder.depth < depth:
            level = ladder.depth
            window = ladder.cutoffs[-1]
            if dense and window > DENSE_SEARCH_CAP:
                raise HorizonExhaustedFault(
                    f"level {level + 1} search against window {window} exceeds "
                    f"the dense factor budget {DENSE_SEARCH_CAP}",
                    level=level + 1, horizon=horizon, best_average=None,
                )
            n, alpha = _search_next_cutoff(ladder, level, horizon)
            if dense and n > DENSE_WINDOW_CAP:
                raise HorizonExhaustedFault(
                    f"level {level + 1} cutoff {n} exceeds the dense factor "
                    f"budget {DENSE_WINDOW_CAP}",
                    level=level + 1, horizon=horizon, best_average=alpha,
                )
            ladder.append_cutoff(n)
            alphas.append(alpha)
            restarted = ladder.jitter_generation != generation
        if not restarted:
            return Cutoffs(ns=ladder.cutoffs, alphas=tuple(alphas),
                           horizon=horizon, time_label=label)


# -- reflected inner products -------------------------------------------------


def reflected_inner(ladder: GramLadder, i: int) -> float:
    """a(i): inner product of orbit vector i with its even-blocks-flipped image."""
    i = int(i)
    top = ladder.cutoffs[-1] if ladder.cutoffs else 0
    if not 0 <= i < top:
        raise ValueError(
            f"a({i}) undefined: block decomposition covers only 0 <= i < {top}"
        )
    raw = 1.0 - 2.0 * ladder.even_block_mass(i)
    return float(np.clip(raw, -1.0, 1.0))


def cross_inner(ladder: GramLadder, i: int, j: int) -> float:
    """Inner product of orbit vector i with the flipped image of orbit vector j."""
    i, j = int(i), int(j)
    top = ladder.cutoffs[-1] if ladder.cutoffs else 0
    if not (0 <= i < top and 0 <= j < top):
        raise ValueError(
            f"cross({i},{j}) undefined: block decomposition covers only "
            f"0 <= i, j < {top}"
        )
    times = ladder.times_upto(max(i, j) + 1)
    raw = ladder.seq.correlation(int(times[i] - times[j]))
    raw -= 2.0 * ladder.even_block_dot(i, j)
    return float(np.clip(raw, -1.0, 1.0))


def reflected_series(ladder: GramLadder, upto: Optional[int] = None) -> np.ndarray:
    """Vector of a(i) for i < upto (default: the final cutoff).

    Values outside [-1, 1] by more than the clip margin abort: that level of
    overshoot means the factor lost the geometry and clipping would hide it.
    """
    if not ladder.cutoffs:
        raise ValueError("ladder has no cutoffs")
    top = ladder.cutoffs[-1]
    upto = top if upto is None else int(upto)
    if not 1 <= upto <= top:
        raise ValueError(f"series horizon must lie in [1, {top}]")
    raw = 1.0 - 2.0 * ladder.even_mass_series(upto)
    overshoot = float(np.max(np.abs(raw))) - 1.0
    if overshoot > CLIP_ABORT:
        raise NumericalFault(
            f"reflected inner products leave [-1, 1] by {overshoot:.3e} "
            f"(> {CLIP_ABORT:.0e}); Gram window too ill-conditioned"
        )
    return np.clip(raw, -1.0, 1.0)


def running_averages(a: np.ndarray) -> np.ndarray:
    """A(n) = (1/n) * sum_{i<n} a(i) for n = 1 .. len(a), by prefix sums."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("need a nonempty 1-d series")
    return np.cumsum(a) / np.arange(1, a.size + 1)


def cross_gram(ladder: GramLadder, upto: Optional[int] = None) -> np.ndarray:
    """Matrix of cross_inner(i, j) for i, j < upto, in one shot.

    Signed row products of the factor give the unclipped values; the jitter
    inflation sits only on the diagonal and is removed there.
    """
    if not ladder.cutoffs:
        raise ValueError("ladder has no cutoffs")
    top = ladder.cutoffs[-1]
    upto = top if upto is None else int(upto)
    if not 1 <= upto <= top:
        raise ValueError(f"cross window must lie in [1, {top}]")
    rows = ladder.rows_block(upto)
    signs = ladder._col_sign[:upto].astype(float)
    cross = (rows * signs[None, :]) @ rows.T
    cross[np.diag_indices_from(cross)] -= ladder.jitter_used
    return np.clip(cross, -1.0, 1.0)


# -- peak table and report -----------------------------------------------------


@dataclass(frozen=True)
class PeakRow:
    """One row of the peak table: the average at a cutoff vs its target sign."""

    level: int
    n: int
    average: float
    target: float
    error: float
    bound: float
    within: bool


def peak_rows(cutoffs: Cutoffs, averages: np.ndarray) -> list[PeakRow]:
    rows = []
    for k, n in enumerate(cutoffs.ns, start=1):
        target = 1.0 if k % 2 == 1 else -1.0
        value = float(averages[n - 1])
        error = abs(value - target)
        bound = 2.0 / k if k >= 2 else 2.0
        rows.append(PeakRow(level=k, n=n, average=value, target=target,
                            error=error, bound=bound, within=error < bound))
    return rows


@dataclass
class CounterexampleReport:
    """Everything one construction run produces."""

    label: str
    cutoffs: Cutoffs
    a: np.ndarray
    averages: np.ndarray
    peaks: list[PeakRow]
    jitter_used: float
    wiener_at_horizon: float
    diagnostics: dict
    oracle: Optional[dict] = None
    elapsed_seconds: float = 0.0

    @property
    def depth(self) -> int:
        return self.cutoffs.depth

    def peak_table_text(self) -> str:
        lines = [
            f"{'k':>3} {'n_k':>8} {'A(n_k)':>14} {'target':>7} "
            f"{'error':>12} {'bound 2/k':>10} {'ok':>3}"
        ]
        for row in self.peaks:
            lines.append(
                f"{row.level:>3} {row.n:>8} {row.average:>14.9f} "
                f"{row.target:>7.0f} {row.error:>12.3e} {row.bound:>10.4f} "
                f"{'yes' if row.within else 'NO':>3}"
            )
        return "\n".join(lines)

    def to_json_dict(self) -> dict:
        return {
            "family": self.label,
            "depth": self.depth,
            "cutoffs": list(self.cutoffs.ns),
            "projection_averages": list(self.cutoffs.alphas),
            "horizon": self.cutoffs.horizon,
            "time_sequence": self.cutoffs.time_label,
            "peaks": [
                {
                    "level": r.level,
                    "n": r.n,
                    "average": r.average,
                    "target": r.target,
                    "error": r.error,
                    "bound": r.bound,
                    "within_bound": r.within,
                }
                for r in self.peaks
            ],
            "jitter": self.jitter_used,
            "wiener_average_at_horizon": self.wiener_at_horizon,
            "diagnostics": self.diagnostics,
            "oracle": self.oracle,
            "elapsed_seconds": self.elapsed_seconds,
        }


def build_report(seq: CorrelationSequence, depth: int,
                 max_horizon: int = DEFAULT_HORIZON, times=None,
                 oracle: bool = False, oracle_cap: int = ORACLE_CAP,
                 ladder: Optional[GramLadder] = None) -> CounterexampleReport:
    """Select cutoffs, evaluate the reflected series, assemble the report.

    With oracle=True the deepest cutoff prefix fitting under oracle_cap is
    re-run through the dense route and the maximal deviations are recorded;
    the comparison rebuilds the engine values on that prefix so both sides
    use the same block structure.
    """
    start = time.perf_counter()
    if ladder is None:
        ladder = GramLadder(seq, times=times)
    cutoffs = select_cutoffs(seq, depth, max_horizon=max_horizon,
                             times=times, ladder=ladder)
    a = reflected_series(ladder)
    averages = running_averages(a)
    peaks = peak_rows(cutoffs, averages)
    diagnostics = ladder.diagnostics
    oracle_block = None
    if oracle:
        prefix = tuple(n for n in cutoffs.ns if n <= oracle_cap)
        if prefix:
            oracle_block = compare_with_oracle(
                seq, prefix, times=times, cap=oracle_cap
            )
            oracle_block["levels_compared"] = len(prefix)
    return CounterexampleReport(
        label=seq.label(),
        cutoffs=cutoffs,
        a=a,
        averages=averages,
        peaks=peaks,
        jitter_used=ladder.jitter_used,
        wiener_at_horizon=wiener_average(seq, cutoffs.ns[-1]),
        diagnostics=diagnostics,
        oracle=oracle_block,
        elapsed_seconds=time.perf_counter() - start,
    )


# -- dense oracle ---------------------------------------------------------------


def dense_oracle(seq: CorrelationSequence, cutoffs: Sequence[int],
                 times=None, cap: int = ORACLE_CAP) -> dict:
    """Recompute a(i) and the cross products by explicit matrix algebra.

    Independent route: dense correlation window, one-shot Cholesky (jitter
    chosen by scanning the same schedule, not taken from any ladder), window
    projectors from QR factorizations, reflection matrix W assembled as
    I - 2 * (even block projectors), every output a literal matrix product.
    Returns the values plus the self-consistency residuals of W.
    """
    ns = [int(n) for n in cutoffs]
    if not ns or any(b <= a for a, b in zip(ns, ns[1:])) or ns[0] < 1:
        raise ValueError("cutoffs must be strictly increasing positive integers")
    size = ns[-1]
    if size > cap:
        raise ValueError(f"oracle window {size} exceeds cap {cap}")
    if times is None:
        t = np.arange(size, dtype=np.int64)
    else:
        from .krylov import _as_times

        t = _as_times(times, size)
    lags = np.abs(t[:, None] - t[None, :])
    gram = seq.correlations(lags.ravel()).reshape(lags.shape)

    jitter = None
    lower = None
    floor = stability_floor(seq, size)
    for lam in JITTER_LADDER:
        if 0.0 < lam < floor:
            # the incremental engine never settles below the stability floor
            # once a window proves singular, so neither may the oracle
            continue
        try:
            candidate = dense_cholesky(
                gram + lam * np.eye(size), lower=True, check_finite=False
            )
        except np.linalg.LinAlgError:
            continue
        if float(np.min(np.diagonal(candidate)) ** 2) >= floor:
            jitter, lower = lam, candidate
            break
    if lower is None:
        raise NumericalFault(
            f"oracle window of size {size} admits no factorization on the "
            "jitter schedule"
        )

    eye = np.eye(size)
    projectors = []
    for n in ns:
        q, _ = np.linalg.qr(lower[:n].T)
        projectors.append(q @ q.T)
    reflection = eye.copy()
    previous = np.zeros_like(eye)
    for level, projector in enumerate(projectors, start=1):
        if level % 2 == 0:
            reflection -= 2.0 * (projector - previous)
        previous = projector
    w_symmetry = float(np.max(np.abs(reflection - reflection.T)))
    w_involution = float(np.max(np.abs(reflection @ reflection - eye)))
    w_commutation = max(
        float(np.max(np.abs(reflection @ p - p @ reflection)))
        for p in projectors
    )

    cross = lower @ reflection @ lower.T
    reflected_rows = lower @ reflection
    v_gram = reflected_rows @ reflected_rows.T
    v_isometry = float(np.max(np.abs(v_gram - gram)))

    a_vals = np.clip(np.diagonal(cross) - jitter, -1.0, 1.0)
    cross = cross.copy()
    cross[np.diag_indices_from(cross)] -= jitter
    cross = np.clip(cross, -1.0, 1.0)
    return {
        "jitter": jitter,
        "a": a_vals,
        "cross": cross,
        "w_symmetry_error": w_symmetry,
        "w_involution_error": w_involution,
        "w_commutation_error": w_commutation,
        "v_isometry_error": v_isometry,
    }


def compare_with_oracle(seq: CorrelationSequence, cutoffs: Sequence[int],
                        times=None, cap: int = ORACLE_CAP) -> dict:
    """Max engine-vs-oracle deviations on one cutoff ladder (n_K <= cap)."""
    ns = tuple(int(n) for n in cutoffs)
    ladder = GramLadder(seq, cutoffs=ns, times=times)
    size = ns[-1]
    oracle = dense_oracle(seq, ns, times=times, cap=cap)
    engine_a = reflected_series(ladder)
    engine_cross = cross_gram(ladder)
    profiles = np.array(
        [ladder.block_profile(i).q.sum() for i in range(size)]
    )
    return {
        "size": size,
        "cutoffs": list(ns),
        "jitter_engine": ladder.jitter_used,
        "jitter_oracle": oracle["jitter"],
        "max_a_delta": float(np.max(np.abs(engine_a - oracle["a"]))),
        "max_cross_delta": float(np.max(np.abs(engine_cross - oracle["cross"]))),
        "max_block_sum_error": float(np.max(np.abs(profiles - 1.0))),
        "w_symmetry_error": oracle["w_symmetry_error"],
        "w_involution_error": oracle["w_involution_error"],
        "w_commutation_error": oracle["w_commutation_error"],
        "v_isometry_error": oracle["v_isometry_error"],
    }

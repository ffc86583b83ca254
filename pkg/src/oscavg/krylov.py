"""Incremental factorization of orbit correlation windows.

The Gram matrix of the orbit vectors at times t(0) < t(1) < ... has entries
G[i, j] = r(t(i) - t(j)) (plain Toeplitz when t is the identity).  A growing
lower triangular factor L with L L^T = G + jitter * I answers every
projection query downstream:

* coordinates of the projection onto the leading window of size N solve
  L_N y = c with c_j = r(t(i) - t(j)), and the squared projection norm is
  |y|^2;
* row i of L lists the coordinates of orbit vector i in the orthonormal
  basis that the factorization carries along, so the nested windows are
  exactly the leading coordinate slabs and block masses are plain row
  partial sums.

Extension appends rows without touching existing ones, one triangular solve
plus one Cholesky of the trailing block per call, O(new^2 * growth) work.
Most correlation windows of atomless measures are positive definite in
theory but numerically singular for slowly decaying r, so failed pivots
escalate a uniform diagonal jitter through a fixed schedule and refactor;
all quantities are then consistently those of G + jitter * I.

Families with finitely supported correlations make the factor banded; the
implementation stores only the band then, which is what keeps very wide
Lebesgue-like ladders cheap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_banded, solve_triangular

from .errors import NonPsdFault
from .spectral import CorrelationSequence

# Uniform diagonal jitter schedule; each escalation refactors from scratch so
# every stored row reflects one single jitter value.
JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)
JITTER_CAP = 1e-8

# Pivots below this count as failed even if positive; solving against them
# would amplify noise past every tolerance used downstream.
PIVOT_FLOOR = 1e-14

# Safety multiple on the factorization's backward error in the stability
# floor.  Projection masses are quadratic forms in the inverse window; two
# independent factorizations of the same window reproduce them only to about
# (backward error)/(smallest eigenvalue), so once a window proves singular
# (any pivot failure) the jitter is pushed to at least
# SAFETY * eps * sqrt(n) * ||G||_1, which pins the smallest eigenvalue at
# the jitter and makes every reported mass reproducible across algorithms
# to a few times eps * sqrt(n) * ||G||_1 / jitter, i.e. well under 1e-8.
# sqrt(n) tracks the realized rounding accumulation (the worst case grows
# like n but never shows up for Toeplitz windows); the multiple was sized
# against measured cross-algorithm disagreement on arc windows up to 10^3.
# Healthy windows never fail a pivot and keep jitter 0.
STABILITY_SAFETY = 5000.0

_BATCH = 512


def stability_floor(seq: CorrelationSequence, size: int) -> float:
    """Minimal jitter (and pivot) making a singular window route-stable."""
    size = int(size)
    reach = size if seq.support is None else min(size, seq.support + 1)
    norm_bound = 1.0
    if reach > 1:
        norm_bound += 2.0 * float(
            np.sum(np.abs(seq.correlations(np.arange(1, reach))))
        )
    eps = float(np.finfo(float).eps)
    return max(PIVOT_FLOOR, STABILITY_SAFETY * eps * math.sqrt(size) * norm_bound)


class _PivotFailure(Exception):
    def __init__(self, minor, pivot):
        self.minor = int(minor)
        self.pivot = float(pivot)


@dataclass
class ProjectionProfile:
    """Per-level projection masses of one orbit vector.

    p[k] is the squared projection norm onto window k (1-based levels),
    q[k] the increment between consecutive windows clipped into [0, 1].
    """

    index: int
    p: np.ndarray
    q: np.ndarray


def _as_times(times, upto: int) -> np.ndarray:
    if times is None:
        return np.arange(upto, dtype=np.int64)
    if callable(times):
        vals = np.asarray([int(times(i)) for i in range(upto)], dtype=np.int64)
    else:
        seq = np.asarray(times, dtype=np.int64)
        if len(seq) < upto:
            raise ValueError(
                f"time sequence of length {len(seq)} too short for index {upto - 1}"
            )
        vals = seq[:upto].copy()
    if upto and vals[0] < 0:
        raise ValueError("time sequence must be nonnegative")
    if np.any(np.diff(vals) <= 0):
        raise ValueError("time sequence must be strictly increasing")
    return vals


class GramLadder:
    """Triangular factor of the orbit Gram, grown alongside a cutoff ladder.

    Single writer: extension and cutoff registration mutate the ladder.
    Queries only read frozen rows, so once a window is built any number of
    threads may interrogate it.
    """

    def __init__(self, seq: CorrelationSequence, cutoffs: Sequence[int] = (),
                 times=None, jitter_cap: float = JITTER_CAP):
        self.seq = seq
        self._times_spec = times
        self._times = np.empty(0, dtype=np.int64)
        support = seq.support
        self._band = None if support is None else int(support)
        self._size = 0
        self._jitter_idx = 0
        self._jitter_cap = float(jitter_cap)
        self._generation = 0
        self._cutoffs: list[int] = []
        self._col_sign = np.empty(0, dtype=np.int8)
        self._dense: Optional[np.ndarray] = None
        self._banded: Optional[np.ndarray] = None
        self._events: list[dict] = []
        self._negative_q_clipped = 0
        self._cutoff_stats: list[dict] = []
        if cutoffs:
            self.set_cutoffs(cutoffs)

    # -- bookkeeping ------------------------------------------------------

    @property
    def size(self) -> int:
        return self._size

    @property
    def cutoffs(self) -> Tuple[int, ...]:
        return tuple(self._cutoffs)

    @property
    def depth(self) -> int:
        return len(self._cutoffs)

    @property
    def jitter_used(self) -> float:
        return JITTER_LADDER[self._jitter_idx]

    @property
    def jitter_generation(self) -> int:
        return self._generation

    @property
    def diagnostics(self) -> dict:
        return {
            "jitter_used": self.jitter_used,
            "jitter_events": list(self._events),
            "negative_q_clipped": self._negative_q_clipped,
            "cutoff_stats": list(self._cutoff_stats),
        }

    def times_upto(self, upto: int) -> np.ndarray:
        if upto > len(self._times):
            self._times = _as_times(self._times_spec, max(upto, 2 * len(self._times)))
        return self._times[:upto]

    @property
    def has_identity_times(self) -> bool:
        return self._times_spec is None

    # -- factorization ----------------------------------------------------

    def _diag(self, upto: int) -> np.ndarray:
        if self._band is not None:
            return self._banded[:upto, self._band]
        return np.einsum("ii->i", self._dense[:upto, :upto])

    def _gram_block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        lags = np.abs(rows[:, None] - cols[None, :])
        return self.seq.correlations(lags.ravel()).reshape(lags.shape)

    def _ensure_dense_capacity(self, size: int) -> None:
        cap = 0 if self._dense is None else self._dense.shape[0]
        if size <= cap:
            return
        new_cap = max(size, 2 * cap, 64)
        grown = np.zeros((new_cap, new_cap))
        if cap:
            grown[: self._size, : self._size] = self._dense[: self._size, : self._size]
        self._dense = grown

    def _ensure_band_capacity(self, size: int) -> None:
        cap = 0 if self._banded is None else self._banded.shape[0]
        if size <= cap:
            return
        new_cap = max(size, 2 * cap, 64)
        grown = np.zeros((new_cap, self._band + 1))
        if cap:
            grown[: self._size] = self._banded[: self._size]
        self._banded = grown

    def _append_rows_dense(self, upto: int, jitter: float) -> None:
        self._ensure_dense_capacity(upto)
        floor = stability_floor(self.seq, upto)
        lo = self._size
        times = self.times_upto(upto)
        new = times[lo:upto]
        gram_tail = self._gram_block(new, new)
        gram_tail[np.diag_indices_from(gram_tail)] += jitter
        if lo:
            coupling = self._gram_block(new, times[:lo])
            left = solve_triangular(
                self._dense[:lo, :lo], coupling.T, lower=True, check_finite=False
            ).T
            schur = gram_tail - left @ left.T
        else:
            left = None
            schur = gram_tail
        try:
            tail = np.linalg.cholesky(schur)
        except np.linalg.LinAlgError:
            raise self._locate_bad_pivot(schur, lo, floor)
        diag = np.einsum("ii->i", tail)
        worst = int(np.argmin(diag))
        if diag[worst] ** 2 < floor:
            raise _PivotFailure(lo + worst + 1, diag[worst] ** 2)
        if left is not None:
            self._dense[lo:upto, :lo] = left
        self._dense[lo:upto, lo:upto] = tail
        self._size = upto

    @staticmethod
    def _locate_bad_pivot(schur: np.ndarray, offset: int,
                          floor: float) -> _PivotFailure:
        # Only reached on failure; a plain scan is fine here.
        n = schur.shape[0]
        lower = np.zeros_like(schur)
        for j in range(n):
            pivot = schur[j, j] - lower[j, :j] @ lower[j, :j]
            if pivot < floor:
                return _PivotFailure(offset + j + 1, pivot)
            lower[j, j] = math.sqrt(pivot)
            if j + 1 < n:
                lower[j + 1:, j] = (schur[j + 1:, j] - lower[j + 1:, :j] @ lower[j, :j]) / lower[j, j]
        return _PivotFailure(offset + n, floor)

    def _append_rows_banded(self, upto: int, jitter: float) -> None:
        self._ensure_band_capacity(upto)
        floor = stability_floor(self.seq, upto)
        lo = self._size
        times = self.times_upto(upto)
        width = self._band
        band = self._banded
        if width == 0:
            pivot = 1.0 + jitter
            band[lo:upto, 0] = math.sqrt(pivot)
            self._size = upto
            return
        r0 = 1.0 + jitter
        for i in range(lo, upto):
            start = max(0, i - width)
            row = self.seq.correlations(times[i] - times[start:i])
            vals = np.zeros(i - start)
            for j in range(start, i):
                shared = max(start, j - width)
                acc = 0.0
                if j > shared:
                    a = vals[shared - start: j - start]
                    b = band[j, shared - j + width: width]
                    acc = float(a @ b)
                vals[j - start] = (row[j - start] - acc) / band[j, width]
            pivot = r0 - float(vals @ vals)
            if pivot < floor:
                raise _PivotFailure(i + 1, pivot)
            band[i, width - (i - start): width] = vals
            band[i, width] = math.sqrt(pivot)
            self._size = i + 1

    def _append_rows(self, upto: int, jitter: float) -> None:
        if self._band is None:
            self._append_rows_dense(upto, jitter)
        else:
            self._append_rows_banded(upto, jitter)

    def _raise_jitter(self, target_idx: int, minor: int, pivot: float) -> bool:
        """Move to a higher jitter rung and rebuild what was already factored.

        Returns False when the schedule (or the cap) runs out.
        """
        while True:
            if target_idx >= len(JITTER_LADDER):
                return False
            if JITTER_LADDER[target_idx] > self._jitter_cap:
                return False
            self._jitter_idx = target_idx
            self._generation += 1
            self._events.append({
                "jitter": self.jitter_used,
                "minor": minor,
                "pivot": pivot,
            })
            rebuilt = self._size
            self._size = 0
            try:
                if rebuilt:
                    self._append_rows(rebuilt, self.jitter_used)
                return True
            except _PivotFailure as again:
                minor, pivot = again.minor, again.pivot
                target_idx += 1

    def _floor_rung(self, size: int) -> int:
        """First schedule index whose jitter meets the stability floor."""
        floor = stability_floor(self.seq, size)
        for idx in range(1, len(JITTER_LADDER)):
            if JITTER_LADDER[idx] >= floor:
                return idx
        return len(JITTER_LADDER)

    def extend(self, new_size: int) -> "GramLadder":
        """Grow the factor to cover the leading window of the given size."""
        new_size = int(new_size)
        if new_size <= self._size:
            return self
        while True:
            # A past pivot failure marks the window as effectively singular,
            # so the jitter itself (not just the pivots) has to stay above
            # the stability floor as the window keeps growing.
            if self._jitter_idx > 0:
                rung = self._floor_rung(new_size)
                if rung > self._jitter_idx:
                    if not self._raise_jitter(rung, self._size, self.jitter_used):
                        raise NonPsdFault(
                            f"stability floor for window {new_size} exceeds the "
                            f"jitter cap {self._jitter_cap:.1e}",
                            minor=new_size,
                            pivot=self.jitter_used,
                        )
                    continue
            try:
                self._append_rows(new_size, self.jitter_used)
                return self
            except _PivotFailure as failure:
                target = max(self._jitter_idx + 1, self._floor_rung(new_size))
                if not self._raise_jitter(target, failure.minor, failure.pivot):
                    raise NonPsdFault(
                        f"leading minor {failure.minor} has pivot {failure.pivot:.3e} "
                        f"after jitter {self.jitter_used:.1e}; window is not positive "
                        "semidefinite",
                        minor=failure.minor,
                        pivot=failure.pivot,
                    )

    # -- cutoff bookkeeping -------------------------------------------------

    def set_cutoffs(self, ns: Sequence[int]) -> None:
        ns = [int(n) for n in ns]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError("cutoffs must be strictly increasing")
        if ns and ns[0] < 1:
            raise ValueError("cutoffs must be positive")
        self._cutoffs = []
        self._cutoff_stats = []
        for n in ns:
            self.append_cutoff(n)

    def reset_cutoffs(self) -> None:
        self._cutoffs = []
        self._cutoff_stats = []
        self._col_sign = np.empty(0, dtype=np.int8)

    def append_cutoff(self, n: int) -> None:
        n = int(n)
        if self._cutoffs and n <= self._cutoffs[-1]:
            raise ValueError("cutoffs must be strictly increasing")
        if n < 1:
            raise ValueError("cutoffs must be positive")
        self.extend(n)
        self._cutoffs.append(n)
        diag = self._diag(n)
        self._cutoff_stats.append({
            "n": n,
            "min_pivot": float(np.min(diag) ** 2),
            "max_pivot": float(np.max(diag) ** 2),
        })
        self._rebuild_col_signs()

    def _rebuild_col_signs(self) -> None:
        top = self._cutoffs[-1]
        signs = np.empty(top, dtype=np.int8)
        lo = 0
        for level, hi in enumerate(self._cutoffs, start=1):
            signs[lo:hi] = -1 if level % 2 == 0 else 1
            lo = hi
        self._col_sign = signs

    # -- projection queries -------------------------------------------------

    def _coords_batch(self, window: int, indices: np.ndarray) -> np.ndarray:
        """Solve L_N Y = C for a batch of orbit indices; columns are coords."""
        if window < 1 or window > self._size:
            raise ValueError(
                f"window {window} outside factored size {self._size}"
            )
        times = self.times_upto(max(int(indices.max()) + 1, window))
        rhs = self._gram_block(times[:window], times[indices])
        if self._band is None:
            return solve_triangular(
                self._dense[:window, :window], rhs, lower=True, check_finite=False
            )
        width = self._band
        if width == 0:
            return rhs / self._banded[:window, 0][:, None]
        bands = np.zeros((width + 1, window))
        for d in range(width + 1):
            if d < window:
                bands[d, : window - d] = self._banded[d:window, width - d]
        return solve_banded((width, 0), bands, rhs, check_finite=False)

    def projection_coords(self, window: int, index: int) -> np.ndarray:
        """Coordinates of the window projection of orbit vector ``index``."""
        return self._coords_batch(window, np.asarray([int(index)]))[:, 0]

    def projection_norm_sq(self, level: int, index: int) -> float:
        """Squared norm of the projection onto cutoff window ``level`` (1-based)."""
        if not 1 <= level <= len(self._cutoffs):
            raise ValueError(f"level {level} outside ladder depth {self.depth}")
        coords = self.projection_coords(self._cutoffs[level - 1], index)
        return float(np.clip(coords @ coords, 0.0, 1.0))

    def sqrt_norm_batch(self, window: int, indices: np.ndarray) -> np.ndarray:
        coords = self._coords_batch(window, indices)
        norms = np.einsum("ij,ij->j", coords, coords)
        return np.sqrt(np.clip(norms, 0.0, 1.0))

    # -- factor row access ---------------------------------------------------

    def rows_block(self, upto: int) -> np.ndarray:
        """Dense copy of the leading (upto x upto) block of the factor."""
        if upto > self._size:
            raise ValueError(f"{upto} rows requested, factored size {self._size}")
        if self._band is None:
            return self._dense[:upto, :upto].copy()
        width = self._band
        out = np.zeros((upto, upto))
        for d in range(width + 1):
            if d < upto:
                idx = np.arange(d, upto)
                out[idx, idx - d] = self._banded[d:upto, width - d]
        return out

    def factor_matrix(self, upto: Optional[int] = None) -> np.ndarray:
        return self.rows_block(self._size if upto is None else upto)

    def _slab_masses_row(self, index: int) -> np.ndarray:
        """Row mass of orbit vector ``index`` in each cutoff slab (x route)."""
        boundaries = np.asarray(self._cutoffs)
        if self._band is None:
            row = self._dense[index, : min(index + 1, boundaries[-1])]
            cols = np.arange(row.size)
        else:
            width = self._band
            start = max(0, index - width)
            row = self._banded[index, width - (index - start):]
            cols = np.arange(start, index + 1)
            keep = cols < boundaries[-1]
            row, cols = row[keep], cols[keep]
        levels = np.searchsorted(boundaries, cols, side="right")
        masses = np.zeros(len(boundaries))
        np.add.at(masses, levels, row * row)
        return masses

    def block_profile(self, index: int) -> ProjectionProfile:
        """Projection profile of one orbit vector across all cutoff windows.

        Inside the factored range the masses are exact row partial sums; past
        it they fall back to projection solves per level.  Increment clipping
        below zero is counted in the diagnostics.
        """
        if not self._cutoffs:
            raise ValueError("ladder has no cutoffs")
        index = int(index)
        if index < self._size:
            p = np.cumsum(self._slab_masses_row(index))
        else:
            p = np.array([
                float(np.clip(
                    (y := self.projection_coords(n, index)) @ y, 0.0, None
                ))
                for n in self._cutoffs
            ])
        q = np.diff(np.concatenate(([0.0], p)))
        negative = q < 0.0
        if np.any(negative):
            self._negative_q_clipped += int(np.count_nonzero(negative))
        q = np.clip(q, 0.0, 1.0)
        return ProjectionProfile(index=index, p=p, q=q)

    # -- reflected slab kernels ----------------------------------------------

    def even_block_mass(self, index: int) -> float:
        """Row mass of orbit vector ``index`` carried by even cutoff slabs."""
        # slab k sits at position k-1, so the even slabs are 1::2
        masses = self._slab_masses_row(index)
        return float(masses[1::2].sum())

    def even_mass_series(self, upto: int) -> np.ndarray:
        """Vector of even-slab row masses for all orbit indices below ``upto``."""
        if not self._cutoffs:
            raise ValueError("ladder has no cutoffs")
        top = self._cutoffs[-1]
        if upto > top:
            raise ValueError(f"series horizon {upto} exceeds final cutoff {top}")
        even = self._col_sign < 0
        if self._band is None:
            block = self._dense[:upto, :upto]
            cols = even[:upto]
            sub = block[:, cols]
            return np.einsum("ij,ij->i", sub, sub)
        width = self._band
        rows = np.arange(upto)[:, None]
        cols = rows - width + np.arange(width + 1)[None, :]
        valid = (cols >= 0) & (cols < top)
        sign_neg = np.zeros_like(valid)
        sign_neg[valid] = even[cols[valid]]
        vals = self._banded[:upto]
        return np.einsum("ij,ij->i", vals * vals, sign_neg.astype(float))

    def even_block_dot(self, i: int, j: int) -> float:
        """Even-slab part of the coordinate dot product of rows i and j."""
        lo, hi = (i, j) if i <= j else (j, i)
        even = self._col_sign < 0
        if self._band is None:
            upto = min(lo + 1, self._cutoffs[-1])
            mask = even[:upto]
            return float(self._dense[i, :upto][mask] @ self._dense[j, :upto][mask])
        width = self._band
        start = max(hi - width, 0)
        if start > lo:
            return 0.0
        cols = np.arange(start, min(lo, self._cutoffs[-1] - 1) + 1)
        if cols.size == 0:
            return 0.0
        vi = self._banded[i, cols - i + width]
        vj = self._banded[j, cols - j + width]
        mask = even[cols]
        return float((vi * vj)[mask].sum())

    def factor_residual(self, upto: int) -> float:
        """Max entry of |L L^T - (G + jitter I)| over the leading window."""
        block = self.rows_block(upto)
        times = self.times_upto(upto)
        gram = self._gram_block(times, times)
        gram[np.diag_indices_from(gram)] += self.jitter_used
        return float(np.max(np.abs(block @ block.T - gram)))

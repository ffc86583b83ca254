"""Spectral measure families on the circle and their correlation sequences.

Every family here stands for a symmetric probability measure on [-pi, pi],
described through its cosine moments r(i).  After normalization r(0) = 1,
r(-i) = r(i), |r(i)| <= 1, and every window (r(i-j))_{i,j<N} is positive
semidefinite.  Those windows are the only thing the projection machinery
downstream ever touches, so this module is the single source of truth for
correlation values.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import toeplitz

from .errors import ValidationFault

TWO_PI = 2.0 * math.pi

# Lag range computed in one vectorized pass; keeps quadrature memory bounded.
_LAG_CHUNK = 1 << 15


def _lag_array(lags) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(lags, dtype=np.int64))
    return np.abs(arr)


@dataclass(frozen=True)
class Lebesgue:
    """Normalized Lebesgue measure; correlations vanish off lag zero."""

    @property
    def support(self) -> Optional[int]:
        return 0

    @property
    def validity_horizon(self) -> Optional[int]:
        return None

    @property
    def atomless(self) -> bool:
        return True

    def raw_correlations(self, lags) -> np.ndarray:
        return (_lag_array(lags) == 0).astype(float)

    def label(self) -> str:
        return "lebesgue"


@dataclass(frozen=True)
class Arc:
    """Uniform density on the symmetric arc [-epsilon, epsilon].

    r(i) = sin(i * epsilon) / (i * epsilon), the cardinal sine at the arc
    half-width.  Requires 0 < epsilon <= pi.
    """

    epsilon: float

    def __post_init__(self):
        if not (0.0 < float(self.epsilon) <= math.pi):
            raise ValidationFault(
                f"arc half-width must lie in (0, pi], got {self.epsilon}"
            )

    @property
    def support(self) -> Optional[int]:
        return None

    @property
    def validity_horizon(self) -> Optional[int]:
        return None

    @property
    def atomless(self) -> bool:
        return True

    def raw_correlations(self, lags) -> np.ndarray:
        # np.sinc(x) = sin(pi x) / (pi x)
        return np.sinc(_lag_array(lags) * (self.epsilon / math.pi))

    def label(self) -> str:
        return f"arc(epsilon={self.epsilon})"


@dataclass(frozen=True)
class ConvolutionTruncated:
    """J-fold convolution of two-point measures at angles 2*pi / base**j.

    r(i) = prod_{j=1..factors} cos(2*pi * i / base**j).  The truncation has
    2**factors atoms, so windows wider than that are exactly rank deficient;
    the validity horizon base**factors // 4 is where cutoff searches stop
    trusting the family.
    """

    base: int
    factors: int

    def __post_init__(self):
        if int(self.base) < 2:
            raise ValidationFault(f"convolution base must be >= 2, got {self.base}")
        if int(self.factors) < 1:
            raise ValidationFault(
                f"convolution factor count must be >= 1, got {self.factors}"
            )
        if self.base ** self.factors >= 2 ** 62:
            raise ValidationFault("convolution period overflows 64-bit lags")

    @property
    def support(self) -> Optional[int]:
        return None

    @property
    def validity_horizon(self) -> Optional[int]:
        return max(1, self.base ** self.factors // 4)

    @property
    def atomless(self) -> bool:
        return False

    def raw_correlations(self, lags) -> np.ndarray:
        lags = _lag_array(lags)
        out = np.ones(lags.shape, dtype=float)
        for j in range(1, self.factors + 1):
            period = self.base ** j
            # Reduce the phase with integer arithmetic so exact periods give
            # exactly cos(0) = 1; this is what makes rigidity returns exact.
            out *= np.cos(TWO_PI * ((lags % period) / period))
        return out

    def label(self) -> str:
        return f"convolution(base={self.base}, factors={self.factors})"


@dataclass(frozen=True)
class Mixture:
    """Convex combination of spectrum families (weighted measure sum)."""

    components: Tuple[Tuple[float, "SpectrumFamily"], ...]

    def __post_init__(self):
        if not self.components:
            raise ValidationFault("mixture needs at least one component")
        weights = [float(w) for w, _ in self.components]
        if min(weights) < 0.0:
            raise ValidationFault("mixture weights must be nonnegative")
        total = sum(weights)
        if abs(total - 1.0) > 1e-9:
            raise ValidationFault(f"mixture weights must sum to 1, got {total}")

    @property
    def support(self) -> Optional[int]:
        sups = [fam.support for _, fam in self.components]
        if any(s is None for s in sups):
            return None
        return max(sups)

    @property
    def validity_horizon(self) -> Optional[int]:
        hs = [fam.validity_horizon for _, fam in self.components]
        hs = [h for h in hs if h is not None]
        return min(hs) if hs else None

    @property
    def atomless(self) -> bool:
        return all(fam.atomless for _, fam in self.components)

    def raw_correlations(self, lags) -> np.ndarray:
        lags = _lag_array(lags)
        total = sum(float(w) for w, _ in self.components)
        out = np.zeros(lags.shape, dtype=float)
        for weight, fam in self.components:
            raw = fam.raw_correlations(lags)
            norm = float(fam.raw_correlations(np.array([0]))[0])
            out += (float(weight) / total) * (raw / norm)
        return out

    def label(self) -> str:
        parts = ", ".join(f"{w}*{fam.label()}" for w, fam in self.components)
        return f"mixture({parts})"


@dataclass(frozen=True)
class QuadratureDensity:
    """Even nonnegative density on [-pi, pi] given as a sampled table.

    Correlations are composite midpoint quadrature of cos(i*theta)*density
    over ``nodes`` uniform cells spanning [-pi, pi], normalized so r(0) = 1.
    The midpoint rule on uniform nodes integrates trigonometric polynomials
    of degree below ``nodes`` exactly, so smooth densities converge fast.
    Node values come from linear interpolation of the table (edge values
    clamp beyond the table range).  Midpoint nodes are symmetric about 0,
    so any odd part of the table cancels out of the cosine moments.
    """

    thetas: Tuple[float, ...]
    densities: Tuple[float, ...]
    nodes: int

    def __post_init__(self):
        if len(self.thetas) != len(self.densities) or len(self.thetas) < 2:
            raise ValidationFault("density table needs matching columns, >= 2 rows")
        th = np.asarray(self.thetas, dtype=float)
        if np.any(np.diff(th) <= 0):
            raise ValidationFault("density table thetas must be strictly increasing")
        if th[0] < -math.pi - 1e-9 or th[-1] > math.pi + 1e-9:
            raise ValidationFault("density table thetas must lie in [-pi, pi]")
        if min(self.densities) < -1e-12:
            raise ValidationFault("density table must be nonnegative")
        if int(self.nodes) < 2:
            raise ValidationFault("quadrature needs at least 2 nodes")

    @classmethod
    def from_csv(cls, path, nodes: int) -> "QuadratureDensity":
        """Load a two-column CSV (theta, density), with or without a header row."""
        try:
            data = np.loadtxt(path, delimiter=",")
        except ValueError:
            data = np.loadtxt(path, delimiter=",", skiprows=1)
        except OSError as exc:
            raise ValidationFault(f"cannot read density table: {exc}") from exc
        data = np.atleast_2d(data)
        if data.shape[1] != 2:
            raise ValidationFault("density CSV must have exactly two columns")
        return cls(tuple(data[:, 0]), tuple(data[:, 1]), int(nodes))

    @property
    def support(self) -> Optional[int]:
        return None

    @property
    def validity_horizon(self) -> Optional[int]:
        return None

    @property
    def atomless(self) -> bool:
        return True

    def _node_values(self):
        m = int(self.nodes)
        step = TWO_PI / m
        theta = -math.pi + (np.arange(m) + 0.5) * step
        rho = np.interp(theta, np.asarray(self.thetas), np.asarray(self.densities))
        return theta, rho, step

    def raw_correlations(self, lags) -> np.ndarray:
        lags = _lag_array(lags)
        theta, rho, step = self._node_values()
        weighted = rho * step
        out = np.empty(lags.shape, dtype=float)
        for start in range(0, lags.size, _LAG_CHUNK):
            block = lags[start:start + _LAG_CHUNK]
            out[start:start + _LAG_CHUNK] = np.cos(np.outer(block, theta)) @ weighted
        return out

    def label(self) -> str:
        return f"quadrature(rows={len(self.thetas)}, nodes={self.nodes})"


@dataclass(frozen=True)
class RawTable:
    """Correlations given directly as a finite table, zero beyond it.

    This is a testing escape hatch rather than a measure family: the table is
    not checked for positive definiteness, which is exactly what lets
    validate_psd demonstrate a rejection.
    """

    values: Tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise ValidationFault("correlation table must be nonempty")
        if self.values[0] == 0.0:
            raise ValidationFault("correlation table needs r(0) != 0")

    @property
    def support(self) -> Optional[int]:
        return len(self.values) - 1

    @property
    def validity_horizon(self) -> Optional[int]:
        return None

    @property
    def atomless(self) -> bool:
        return False

    def raw_correlations(self, lags) -> np.ndarray:
        lags = _lag_array(lags)
        table = np.asarray(self.values, dtype=float)
        clipped = np.minimum(lags, len(table) - 1)
        return np.where(lags < len(table), table[clipped], 0.0)

    def label(self) -> str:
        return f"table(len={len(self.values)})"


SpectrumFamily = Union[
    Lebesgue, Arc, ConvolutionTruncated, Mixture, QuadratureDensity, RawTable
]


class CorrelationSequence:
    """Lag-indexed correlations of a family, cached and normalized to r(0)=1.

    The cache is filled by whichever caller first needs a new lag range
    (single writer, guarded by a lock).  Filled entries are never mutated,
    so concurrent readers are safe once their lags are present.
    """

    def __init__(self, family: SpectrumFamily):
        self.family = family
        self._lock = threading.Lock()
        self._values = np.empty(0, dtype=float)
        self._filled = 0

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "CorrelationSequence":
        return cls(RawTable(tuple(float(v) for v in values)))

    @property
    def support(self) -> Optional[int]:
        return self.family.support

    @property
    def validity_horizon(self) -> Optional[int]:
        return self.family.validity_horizon

    @property
    def atomless(self) -> bool:
        return self.family.atomless

    def label(self) -> str:
        return self.family.label()

    def _ensure(self, upto: int) -> None:
        if upto <= self._filled:
            return
        with self._lock:
            if upto <= self._filled:
                return
            new_len = max(upto, 2 * self._filled, 64)
            raw = self.family.raw_correlations(np.arange(self._filled, new_len))
            if self._filled == 0:
                norm = float(raw[0])
                if not norm > 0.0:
                    raise ValidationFault(
                        f"family normalization r(0) = {norm} is not positive"
                    )
                self._norm = norm
            vals = raw / self._norm
            if isinstance(self.family, QuadratureDensity):
                overshoot = float(np.max(np.abs(vals))) - 1.0 if vals.size else 0.0
                if overshoot > 1e-6:
                    raise ValidationFault(
                        "quadrature correlations leave [-1, 1] by "
                        f"{overshoot:.3e}; density table is not a probability density"
                    )
                np.clip(vals, -1.0, 1.0, out=vals)
            grown = np.empty(new_len, dtype=float)
            grown[: self._filled] = self._values[: self._filled]
            grown[self._filled:] = vals
            if self._filled == 0:
                grown[0] = 1.0
            self._values = grown
            self._filled = new_len

    def correlation(self, lag: int) -> float:
        lag = abs(int(lag))
        self._ensure(lag + 1)
        return float(self._values[lag])

    def correlations(self, lags) -> np.ndarray:
        lags = _lag_array(lags)
        if lags.size == 0:
            return np.empty(0, dtype=float)
        self._ensure(int(lags.max()) + 1)
        return self._values[lags]


def toeplitz_window(seq: CorrelationSequence, size: int) -> np.ndarray:
    """Dense correlation window (r(i-j))_{i,j<size}."""
    if size < 1:
        raise ValueError("window size must be >= 1")
    col = seq.correlations(np.arange(size))
    return toeplitz(col)


@dataclass(frozen=True)
class PsdReport:
    """Outcome of a positive semidefiniteness probe of one window."""

    window: int
    min_eigenvalue_estimate: float
    ok: bool


def validate_psd(seq: CorrelationSequence, size: int, tol: Optional[float] = None) -> PsdReport:
    """Probe one correlation window for positive semidefiniteness.

    Correlation sequences of genuine measures give PSD Toeplitz windows whose
    computed spectra dip below zero only by rounding, so the smallest
    eigenvalue is compared against -tol with a default of 1e-8 * size.
    Exactly dependent directions (atomic measures) and near-dependent ones
    (smooth measures at machine precision) both sit at zero within that
    margin; a window from an invalid table lands far below it.  Failure is
    a report, not a fault.
    """
    tol = 1e-8 * size if tol is None else float(tol)
    window = toeplitz_window(seq, size)
    smallest = float(np.linalg.eigvalsh(window)[0])
    return PsdReport(window=size, min_eigenvalue_estimate=smallest,
                     ok=smallest >= -tol)


def wiener_average(seq: CorrelationSequence, length: int) -> float:
    """Cesaro average (1/n) * sum_{i<n} r(i)^2.

    Tends to the sum of squared atom masses of the measure, so it separates
    atomless spectra (decay to 0) from atomic ones (positive plateau).
    """
    if length < 1:
        raise ValueError("average length must be >= 1")
    vals = seq.correlations(np.arange(length))
    return float(np.mean(vals * vals))


def rigidity_defect(seq: CorrelationSequence, lag: int) -> float:
    """Squared return distance 2*(1 - r(q)) of the orbit at lag q."""
    if lag < 1:
        raise ValueError("rigidity lag must be >= 1")
    return 2.0 * (1.0 - seq.correlation(lag))


def system_rigidity_defect(seq: CorrelationSequence, lag: int) -> float:
    """Return defect after the exponential lift of the spectrum.

    The lifted spectral type is the normalized series sum_k sigma^{*k} / k!,
    whose correlation at lag q is (e^{r(q)} - 1) / (e - 1); the defect is
    2*(1 - that).  It vanishes exactly when r(q) = 1, so rigid returns of
    the base measure are rigid returns of the whole system.
    """
    if lag < 1:
        raise ValueError("rigidity lag must be >= 1")
    r = seq.correlation(lag)
    return 2.0 * (1.0 - math.expm1(r) / math.expm1(1.0))


def family_from_config(block: dict) -> SpectrumFamily:
    """Build a family from a flat configuration block (see README for keys)."""
    if not isinstance(block, dict):
        raise ValidationFault("spectrum block must be a mapping")
    known = dict(block)
    name = known.pop("name", None)
    if name == "lebesgue":
        extra = set(known)
    elif name == "arc":
        if "epsilon" not in known:
            raise ValidationFault("arc spectrum needs an epsilon key")
        fam = Arc(float(known.pop("epsilon")))
        extra = set(known)
        if extra:
            raise ValidationFault(f"unknown arc keys: {sorted(extra)}")
        return fam
    elif name == "convolution":
        try:
            fam = ConvolutionTruncated(int(known.pop("base")), int(known.pop("factors")))
        except KeyError as exc:
            raise ValidationFault("convolution spectrum needs base and factors") from exc
        extra = set(known)
        if extra:
            raise ValidationFault(f"unknown convolution keys: {sorted(extra)}")
        return fam
    elif name == "mixture":
        comps = known.pop("components", None)
        if not isinstance(comps, list) or not comps:
            raise ValidationFault("mixture spectrum needs a components list")
        parsed = []
        for comp in comps:
            if not isinstance(comp, dict) or "weight" not in comp or "spectrum" not in comp:
                raise ValidationFault("each mixture component needs weight and spectrum")
            parsed.append((float(comp["weight"]), family_from_config(comp["spectrum"])))
        extra = set(known)
        if extra:
            raise ValidationFault(f"unknown mixture keys: {sorted(extra)}")
        return Mixture(tuple(parsed))
    elif name == "quadrature":
        nodes = known.pop("nodes", 4096)
        if "csv" in known:
            fam = QuadratureDensity.from_csv(known.pop("csv"), int(nodes))
        elif "thetas" in known and "densities" in known:
            fam = QuadratureDensity(
                tuple(float(t) for t in known.pop("thetas")),
                tuple(float(d) for d in known.pop("densities")),
                int(nodes),
            )
        else:
            raise ValidationFault("quadrature spectrum needs csv or thetas/densities")
        extra = set(known)
        if extra:
            raise ValidationFault(f"unknown quadrature keys: {sorted(extra)}")
        return fam
    elif name == "table":
        values = known.pop("values", None)
        if not isinstance(values, list) or not values:
            raise ValidationFault("table spectrum needs a values list")
        fam = RawTable(tuple(float(v) for v in values))
        extra = set(known)
        if extra:
            raise ValidationFault(f"unknown table keys: {sorted(extra)}")
        return fam
    else:
        raise ValidationFault(f"unknown spectrum name: {name!r}")
    if extra:
        raise ValidationFault(f"unknown lebesgue keys: {sorted(extra)}")
    return Lebesgue()

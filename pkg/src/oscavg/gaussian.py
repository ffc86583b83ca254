"""Monte Carlo check of the construction through its Gaussian realization.

The orbit inner products double as covariances of a pair of jointly
stationary Gaussian paths (X_i) and (Y_i): both margins share the Toeplitz
covariance r(i-j), and the cross covariance is the reflected product
cross(i, j).  Sampling the joint law and averaging X_i * Y_i therefore
estimates the same A(n) the construction reports exactly, and the sampled
moments recheck stationarity and the cross identification r(i) = E[X_i Y_0]
with plain statistics.

Sampling is the triangular factor of the 2n x 2n covariance applied to
standard normal draws from PCG64 streams.  Each block of samples gets its
own stream spawned from the root seed by block index, and blocks are
reduced in index order, so results are bit-identical for a given seed no
matter how the blocks are scheduled.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericalFault
from .krylov import GramLadder
from .construction import cross_gram

# Diagonal repair schedule for the sampled covariance; wider than the Gram
# schedule because the assembled 2n x 2n matrix is exactly singular for
# perfectly correlated families, but capped low enough that a real
# inconsistency in the cross block still faults.
PSD_REPAIR = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

SAMPLE_BLOCK = 8192


@dataclass
class JointCovariance:
    """Joint covariance of the paired paths, with its sampling factor."""

    n: int
    matrix: np.ndarray
    psd_jitter: float
    factor: np.ndarray
    min_pivot: float

    @property
    def cross_block(self) -> np.ndarray:
        return self.matrix[: self.n, self.n:]

    @property
    def marginal_block(self) -> np.ndarray:
        return self.matrix[: self.n, : self.n]

    @property
    def exact_average(self) -> float:
        """A(n) implied by the cross diagonal; the target of the estimator."""
        return float(np.mean(np.diagonal(self.cross_block)))


@dataclass(frozen=True)
class SimulationConfig:
    n: int
    samples: int
    seed: int
    truncation: Optional[float] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("path length n must be >= 1")
        if self.samples < 2:
            raise ValueError("need at least 2 samples to estimate a variance")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")
        if self.truncation is not None and not self.truncation > 0:
            raise ValueError("truncation level must be positive")


@dataclass
class EstimateReport:
    n: int
    samples: int
    seed: int
    exact: float
    estimate: float
    std_error: float
    z: float
    psd_jitter: float
    truncation: Optional[float] = None
    estimate_truncated: Optional[float] = None
    truncation_bias: Optional[float] = None
    moments: Optional[list] = None
    elapsed_seconds: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "samples": self.samples,
            "seed": self.seed,
            "exact_average": self.exact,
            "estimate": self.estimate,
            "std_error": self.std_error,
            "z": self.z,
            "psd_jitter": self.psd_jitter,
            "truncation": self.truncation,
            "estimate_truncated": self.estimate_truncated,
            "truncation_bias": self.truncation_bias,
            "moments": self.moments,
            "elapsed_seconds": self.elapsed_seconds,
        }


def build_joint_covariance(ladder: GramLadder, n: int) -> JointCovariance:
    """Assemble [[T, C], [C^T, T]] with T[i,j] = r(t_i - t_j), C = cross matrix.

    The exact matrix is a Gram matrix (of the orbit vectors next to their
    reflected images), so it is positive semidefinite up to the rounding in
    C; a small diagonal repair makes it factorizable for sampling.  Repair
    beyond the cap means C is inconsistent with T, which is a bug, not data.
    """
    n = int(n)
    if not ladder.cutoffs:
        raise ValueError("ladder has no cutoffs")
    if not 1 <= n <= ladder.cutoffs[-1]:
        raise ValueError(
            f"path length {n} outside constructed window {ladder.cutoffs[-1]}"
        )
    times = ladder.times_upto(n)
    lags = np.abs(times[:, None] - times[None, :])
    toeplitz_block = ladder.seq.correlations(lags.ravel()).reshape(lags.shape)
    cross = cross_gram(ladder, n)
    cross = 0.5 * (cross + cross.T)
    sigma = np.block([[toeplitz_block, cross], [cross.T, toeplitz_block]])
    for jitter in PSD_REPAIR:
        try:
            factor = np.linalg.cholesky(sigma + jitter * np.eye(2 * n))
        except np.linalg.LinAlgError:
            continue
        min_pivot = float(np.min(np.diagonal(factor)) ** 2)
        return JointCovariance(
            n=n,
            matrix=sigma,
            psd_jitter=jitter,
            factor=factor,
            min_pivot=min_pivot,
        )
    raise NumericalFault(
        f"joint covariance of size {2 * n} admits no factorization with "
        f"diagonal repair up to {PSD_REPAIR[-1]:.0e}; cross block is "
        "inconsistent with the marginals"
    )


class _Welford:
    """Streaming mean and sum of squared deviations, merged in block order."""

    __slots__ = ("count", "mean", "m2")

    def __init__(self, width: int = 1):
        self.count = 0
        self.mean = np.zeros(width)
        self.m2 = np.zeros(width)

    def add_block(self, values: np.ndarray) -> None:
        values = np.atleast_2d(values)
        count = values.shape[1]
        mean = values.mean(axis=1)
        m2 = ((values - mean[:, None]) ** 2).sum(axis=1)
        merged = self.count + count
        delta = mean - self.mean
        self.mean = self.mean + delta * (count / merged)
        self.m2 = self.m2 + m2 + delta ** 2 * (self.count * count / merged)
        self.count = merged

    def std_error(self) -> np.ndarray:
        variance = self.m2 / (self.count - 1)
        return np.sqrt(np.maximum(variance, 0.0) / self.count)


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,)))
    )


def sample_and_estimate(cov: JointCovariance, cfg: SimulationConfig,
                        collect_moments: bool = True) -> EstimateReport:
    """Estimate A(n) = E[(1/n) sum X_i Y_i] from cfg.samples joint draws.

    Returns the estimate with its standard error and z-score against the
    exact value carried by the covariance.  With cfg.truncation = M every
    path coordinate is clamped to [-M, M] and the clamped estimate and its
    bias are reported alongside (same draws, so the comparison is paired).
    Moment collection adds the lag-1 and cross-identification statistics.
    """
    start = time.perf_counter()
    n = cov.n
    if cfg.n != n:
        raise ValueError(f"config path length {cfg.n} != covariance size {n}")
    main = _Welford()
    truncated = _Welford() if cfg.truncation is not None else None
    lag1 = _Welford(2) if collect_moments and n > 1 else None
    cross0 = _Welford(n) if collect_moments else None

    done = 0
    block = 0
    while done < cfg.samples:
        take = min(SAMPLE_BLOCK, cfg.samples - done)
        rng = _block_rng(cfg.seed, block)
        normals = rng.standard_normal((2 * n, take))
        paths = cov.factor @ normals
        x, y = paths[:n], paths[n:]
        main.add_block(np.mean(x * y, axis=0))
        if truncated is not None:
            m = cfg.truncation
            xc, yc = np.clip(x, -m, m), np.clip(y, -m, m)
            truncated.add_block(np.mean(xc * yc, axis=0))
        if lag1 is not None:
            lag1.add_block(np.stack([
                np.mean(x[1:] * x[:-1], axis=0),
                np.mean(y[1:] * y[:-1], axis=0),
            ]))
        if cross0 is not None:
            cross0.add_block(x * y[0][None, :])
        done += take
        block += 1

    estimate = float(main.mean[0])
    std_error = float(main.std_error()[0])
    exact = cov.exact_average
    z = (estimate - exact) / std_error if std_error > 0 else 0.0

    estimate_truncated = None
    bias = None
    if truncated is not None:
        estimate_truncated = float(truncated.mean[0])
        bias = estimate_truncated - estimate

    moments = None
    if collect_moments:
        moments = []
        if lag1 is not None:
            expected = float(cov.marginal_block[1, 0])
            ses = lag1.std_error()
            for name, mean, se in zip(("x", "y"), lag1.mean, ses):
                se = float(se)
                delta = float(mean) - expected
                moments.append({
                    "check": f"lag1_{name}",
                    "index": 1,
                    "expected": expected,
                    "estimate": float(mean),
                    "std_error": se,
                    "z": delta / se if se > 0 else 0.0,
                })
        ses = cross0.std_error()
        for i in range(n):
            expected = float(cov.cross_block[i, 0])
            se = float(ses[i])
            delta = float(cross0.mean[i]) - expected
            moments.append({
                "check": "cross_base",
                "index": i,
                "expected": expected,
                "estimate": float(cross0.mean[i]),
                "std_error": se,
                "z": delta / se if se > 0 else 0.0,
            })

    return EstimateReport(
        n=n,
        samples=cfg.samples,
        seed=cfg.seed,
        exact=exact,
        estimate=estimate,
        std_error=std_error,
        z=float(z),
        psd_jitter=cov.psd_jitter,
        truncation=cfg.truncation,
        estimate_truncated=estimate_truncated,
        truncation_bias=bias,
        moments=moments,
        elapsed_seconds=time.perf_counter() - start,
    )

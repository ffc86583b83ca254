"""Oscillating double averages from spectral measures.

Given a symmetric probability measure on the circle through its cosine
moments r(i), this package selects the cutoff ladder along which the
reflected averages A(n) swing between +1 and -1, evaluates the reflected
inner products exactly through Toeplitz Gram factorizations, and checks the
whole construction twice over: against an explicit dense-matrix oracle and
against Monte Carlo estimates on the associated stationary Gaussian pair.
"""

from .errors import (
    HorizonExhaustedFault,
    NonPsdFault,
    NumericalFault,
    ValidationFault,
)
from .spectral import (
    Arc,
    ConvolutionTruncated,
    CorrelationSequence,
    Lebesgue,
    Mixture,
    PsdReport,
    QuadratureDensity,
    RawTable,
    family_from_config,
    rigidity_defect,
    system_rigidity_defect,
    toeplitz_window,
    validate_psd,
    wiener_average,
)
from .krylov import GramLadder, ProjectionProfile
from .construction import (
    CounterexampleReport,
    Cutoffs,
    PeakRow,
    build_report,
    compare_with_oracle,
    cross_gram,
    cross_inner,
    dense_oracle,
    peak_rows,
    reflected_inner,
    reflected_series,
    running_averages,
    select_cutoffs,
)
from .gaussian import (
    EstimateReport,
    JointCovariance,
    SimulationConfig,
    build_joint_covariance,
    sample_and_estimate,
)

__version__ = "0.1.0"

__all__ = [
    "Arc",
    "ConvolutionTruncated",
    "CorrelationSequence",
    "CounterexampleReport",
    "Cutoffs",
    "EstimateReport",
    "GramLadder",
    "HorizonExhaustedFault",
    "JointCovariance",
    "Lebesgue",
    "Mixture",
    "NonPsdFault",
    "NumericalFault",
    "PeakRow",
    "ProjectionProfile",
    "PsdReport",
    "QuadratureDensity",
    "RawTable",
    "SimulationConfig",
    "ValidationFault",
    "build_joint_covariance",
    "build_report",
    "compare_with_oracle",
    "cross_gram",
    "cross_inner",
    "dense_oracle",
    "family_from_config",
    "peak_rows",
    "reflected_inner",
    "reflected_series",
    "rigidity_defect",
    "running_averages",
    "sample_and_estimate",
    "select_cutoffs",
    "system_rigidity_defect",
    "toeplitz_window",
    "validate_psd",
    "wiener_average",
]

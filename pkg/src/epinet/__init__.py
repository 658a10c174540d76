"""Simulation and likelihood-based inference for stochastic SEIR epidemics
co-evolving with a dynamic contact network."""

from .core import (
    CaseRecord,
    EstimationError,
    Event,
    EventKind,
    EventLog,
    EventLogError,
    ImputationError,
    ObservedData,
    Parameters,
    PhaseSchedule,
    Status,
    StepHazard,
    SufficientStats,
    rate_lookup,
)
from .estimators import (
    CompleteDataMLE,
    closed_form_mles,
    fit_complete,
    poisson_offset_fit,
    solve_beta_bS_eta,
    solve_external,
)
from .likelihood import hessian, log_likelihood, score, sufficient_statistics
from .simulate import SimConfig, SimResult, sample_initial_network, simulate
from .stem import (
    MissingnessSpec,
    StemConfig,
    StochasticEM,
    asymptotic_se,
    average_estimates,
    louis_information,
    observe,
    stem_run,
)

__version__ = "0.1.0"

__all__ = [
    "CaseRecord", "EstimationError", "Event", "EventKind", "EventLog",
    "EventLogError", "ImputationError", "ObservedData", "Parameters",
    "PhaseSchedule", "Status", "StepHazard", "SufficientStats", "rate_lookup",
    "CompleteDataMLE", "closed_form_mles", "fit_complete",
    "poisson_offset_fit", "solve_beta_bS_eta", "solve_external",
    "hessian", "log_likelihood", "score", "sufficient_statistics",
    "SimConfig", "SimResult", "sample_initial_network", "simulate",
    "MissingnessSpec", "StemConfig", "StochasticEM", "asymptotic_se",
    "average_estimates", "louis_information", "observe", "stem_run",
    "__version__",
]

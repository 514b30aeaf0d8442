"""Blind separation of delayed, nonnegative mixtures and localization of their sources.

Typical use::

    from shiftsep import ShiftNMFk, SourceLocator
    sel = ShiftNMFk(d_range=range(1, 6), n_runs=100).fit(V)
    loc = SourceLocator().fit(sel.report_.ensembles[sel.n_sources_], sensors)
"""

from .exceptions import (
    ConstructionFailedError,
    DegenerateInputError,
    EnsembleUnderfilledError,
    InsufficientSamplesError,
    InternalConsistencyError,
    InvalidArgumentError,
    LocalizationFailedError,
    NumericalFailure,
    SchemaError,
    SelectionDegenerateError,
    ShiftSepError,
)
from .localization import DelayStatistics, LocateConfig, SourceLocator, build_delay_stats, locate, objective_F
from .selection import EliminationConfig, RunEnsemble, ShiftNMFk, select_K
from .signal_model import (
    SensorArray,
    SolutionTuple,
    apply_delay,
    cosine_distance,
    forward_mix,
    parseval_cost,
    reconstruction_error,
)
from .solver import ShiftNMF, SolverConfig, center_delays, solve
from .synth import WaveformSpec, generate_correlated_pair, generate_physical, generate_random
from .uncertainty import McmcConfig, posterior, ram_sample

__version__ = "0.1.0"

__all__ = [
    "ConstructionFailedError", "DegenerateInputError", "EnsembleUnderfilledError", "InsufficientSamplesError",
    "InternalConsistencyError", "InvalidArgumentError", "LocalizationFailedError", "NumericalFailure",
    "SchemaError", "SelectionDegenerateError", "ShiftSepError",
    "DelayStatistics", "LocateConfig", "SourceLocator", "build_delay_stats", "locate", "objective_F",
    "EliminationConfig", "RunEnsemble", "ShiftNMFk", "select_K",
    "SensorArray", "SolutionTuple", "apply_delay", "cosine_distance", "forward_mix", "parseval_cost",
    "reconstruction_error",
    "ShiftNMF", "SolverConfig", "center_delays", "solve",
    "WaveformSpec", "generate_correlated_pair", "generate_physical", "generate_random",
    "McmcConfig", "posterior", "ram_sample",
]

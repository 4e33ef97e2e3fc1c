"""Trajectories of a continuously position-monitored spin-oscillator.

Subpackages cover the quantum stochastic trajectory integrator (:mod:`.sse`),
the classical reference dynamics (:mod:`.classical`), the Gaussian
moment-closure integrator (:mod:`.cumulant`), entanglement and classicality
diagnostics (:mod:`.diagnostics`), reproducible ensembles (:mod:`.ensemble`),
and the config/CSV/SVG/CLI layer (:mod:`.config`, :mod:`.output`, :mod:`.cli`).
"""

from .classical import ClassicalState, matched_classical_state, run_classical
from .config import ConfigError, RunConfig, load_config, parse_config
from .cumulant import MomentState, PsdViolationError, initial_moments, run_cumulant
from .diagnostics import (
    classicality_metrics,
    jz_histogram,
    normalized_max_entropy,
    spinor_components,
    von_neumann_entropy,
)
from .ensemble import EnsembleSpec, convergence_report, run_ensemble
from .hilbert import (
    BasisSpec,
    CutoffError,
    ModelParams,
    Operator,
    OperatorSet,
    QuantumState,
    build_operators,
    coherent_state,
    covariance,
    expectation,
    product_state,
    spin_coherent_state,
    suggest_n_max,
    variance,
)
from .sse import (
    NoiseStream,
    SseConfig,
    TrajectoryFailure,
    TrajectoryRecord,
    run_batch,
    run_trajectory,
    sse_step,
)

__version__ = "0.1.0"

__all__ = [
    "BasisSpec",
    "ClassicalState",
    "ConfigError",
    "CutoffError",
    "EnsembleSpec",
    "ModelParams",
    "MomentState",
    "NoiseStream",
    "Operator",
    "OperatorSet",
    "PsdViolationError",
    "QuantumState",
    "RunConfig",
    "SseConfig",
    "TrajectoryFailure",
    "TrajectoryRecord",
    "build_operators",
    "classicality_metrics",
    "coherent_state",
    "convergence_report",
    "covariance",
    "expectation",
    "initial_moments",
    "jz_histogram",
    "load_config",
    "matched_classical_state",
    "normalized_max_entropy",
    "parse_config",
    "product_state",
    "run_batch",
    "run_classical",
    "run_cumulant",
    "run_ensemble",
    "run_trajectory",
    "spin_coherent_state",
    "spinor_components",
    "sse_step",
    "suggest_n_max",
    "variance",
    "von_neumann_entropy",
    "__version__",
]

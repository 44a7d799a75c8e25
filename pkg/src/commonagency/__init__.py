"""Nash-equilibrium contracts for one Agent shared by several Principals.

Modules: ``model`` (primitives and the Agent's best response), ``lq``
(closed-form two-Principal solution), ``hjb`` (finite-difference solver for
risk-neutral Principals), ``sim`` (Monte Carlo checks) and ``cli``.
"""

from .errors import (
    BestResponseViolation,
    CommonAgencyError,
    ConfigError,
    Degenerate,
    NashViolation,
    NoConvergence,
    NonConcaveHamiltonian,
    NumericOverflow,
    SingularMatrix,
    SingularMBeta,
    SolverError,
    Unstable,
    VerificationError,
)
from .kernels import BACKEND
from .model import (
    DriftCostSpec,
    EffortPolicy,
    GenericSpec,
    LinearQuadratic,
    ModelParams,
    Payoff,
    best_response,
    generator_G,
    growth_sanity,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BestResponseViolation",
    "CommonAgencyError",
    "ConfigError",
    "Degenerate",
    "DriftCostSpec",
    "EffortPolicy",
    "GenericSpec",
    "LinearQuadratic",
    "ModelParams",
    "NashViolation",
    "NoConvergence",
    "NonConcaveHamiltonian",
    "NumericOverflow",
    "Payoff",
    "SingularMBeta",
    "SingularMatrix",
    "SolverError",
    "Unstable",
    "VerificationError",
    "best_response",
    "generator_G",
    "growth_sanity",
]

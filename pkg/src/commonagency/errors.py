"""Exception hierarchy. Every error carries a stable ``code`` string."""

from __future__ import annotations


class CommonAgencyError(Exception):
    code = "ERROR"


class ConfigError(CommonAgencyError, ValueError):
    code = "CONFIG_ERROR"

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class SolverError(CommonAgencyError):
    code = "SOLVER_ERROR"


class NonConcaveHamiltonian(SolverError):
    code = "NON_CONCAVE_HAMILTONIAN"


class SingularMatrix(SolverError):
    code = "SINGULAR_MATRIX"


class SingularMBeta(SolverError):
    code = "SINGULAR_M_BETA"


class NoConvergence(SolverError):
    code = "NO_CONVERGENCE"

    def __init__(self, message: str, residual: float | None = None):
        self.residual = residual
        super().__init__(message)


class Unstable(SolverError):
    code = "UNSTABLE"


class NumericOverflow(SolverError):
    code = "NUMERIC_OVERFLOW"


class Degenerate(SolverError):
    code = "DEGENERATE"


class VerificationError(CommonAgencyError):
    code = "VERIFICATION_FAILED"

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)


class BestResponseViolation(VerificationError):
    code = "BEST_RESPONSE_VIOLATION"


class NashViolation(VerificationError):
    code = "NASH_VIOLATION"

"""Exception taxonomy shared across the solver modules.

The command-line layer maps these onto its exit-code contract:
validation failures (bad configuration, bad inputs) exit with 2,
numerical aborts (instability, positivity loss, oracle disagreement)
exit with 3.
"""

from __future__ import annotations


class PenpiaError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(PenpiaError):
    """A configuration object, schedule, or argument violates its contract."""


class RegistryError(ValidationError):
    """An unknown problem or benchmark name was requested."""


class EvaluationError(PenpiaError):
    """A user-supplied coefficient returned a non-finite or out-of-bound value."""


class SimulationError(PenpiaError):
    """Path simulation produced an invalid state (carries path/step context)."""


class EmptyLevelSetError(PenpiaError):
    """No grid action matches the requested volatility level within tolerance."""


class BasisError(PenpiaError):
    """A regression design matrix is unusable (rank/conditioning), names the step."""


class InstabilityError(PenpiaError):
    """A backward solver exceeded its a-priori bound; numerical abort."""


class PositivityError(PenpiaError):
    """An exponential-transform grid solution lost positivity."""


class OracleUnstableError(PenpiaError):
    """A reference computation failed its refinement self-check."""


class InsufficientDataError(PenpiaError):
    """Too few usable points for a requested fit."""

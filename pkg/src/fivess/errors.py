"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FivessError(Exception):
    """Base class for all package errors."""


class ParameterError(FivessError, ValueError):
    """Invalid physical or numerical parameters."""


class TopologyError(FivessError, ValueError):
    """Operating point incompatible with the converter topology."""


class CCMViolation(FivessError, RuntimeError):
    """The converter left continuous conduction mode (v <= 0 or i_L <= 0)."""


class NonlinearityError(FivessError, RuntimeError):
    """A linear fit did not explain the data; the perturbation is too large."""


class DegenerateParameters(FivessError, ValueError):
    """A mapping that must be invertible is singular for these parameters."""


class InfeasibleDesign(FivessError, RuntimeError):
    """No controller on the search grid satisfied the design constraints."""

    def __init__(self, message: str, best: object | None = None):
        super().__init__(message)
        self.best = best


class UnboundedSector(FivessError, ValueError):
    """Interference is strong enough that the upper sector bound is infinite."""


class PlanningError(FivessError, ValueError):
    """A reference transition cannot be decomposed on the operating-point grid."""


class NegativeIncrementalResistance(FivessError, ValueError):
    """The load's incremental conductance is not positive."""


class ConfigError(FivessError, ValueError):
    """A scenario configuration file failed validation."""

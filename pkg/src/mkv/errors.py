"""Exception types shared across the package.

Validation problems (bad arguments, malformed configs, shape mismatches)
raise :class:`ValidationError`; runtime failures of a well-posed computation
(numerical blow-up, degenerate statistics, iteration caps) raise the
``RuntimeError`` subclasses. The CLI maps the former to exit code 2 and the
latter to exit code 3.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Inputs violate a documented precondition."""


class SimulationDiverged(RuntimeError):
    """A particle state left the finite range during integration."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class EstimatorDiverged(RuntimeError):
    """An online parameter iterate left the finite range."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class DegenerateStatistics(RuntimeError):
    """Closed-form estimator denominators are numerically singular."""


class OptimizerDidNotConverge(RuntimeError):
    """Gradient ascent hit its iteration cap before reaching tolerance."""

    def __init__(self, message: str, last_theta=None, grad_norm: float | None = None):
        super().__init__(message)
        self.last_theta = last_theta
        self.grad_norm = grad_norm


class ExclusionCapExceeded(RuntimeError):
    """More than the tolerated fraction of Monte-Carlo trials failed."""

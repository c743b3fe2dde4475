"""Exception taxonomy for imexode.

Every error raised on purpose by the package derives from ``ImexOdeError`` and
carries the process exit code the CLI maps it to, so benchmark scripts can
tabulate failed runs the same way successful ones are tabulated.
"""

from typing import List, Optional, Sequence

import numpy as np


class ImexOdeError(RuntimeError):
    """Base class for all imexode failures."""

    exit_code = 1


class ConfigError(ImexOdeError, ValueError):
    """Invalid or unknown configuration."""

    exit_code = 2


class UnknownSchemeError(ConfigError):
    """Scheme id that has no tableau or stepper."""


class DimensionMismatchError(ImexOdeError, ValueError):
    """Array shapes that do not fit together."""

    exit_code = 2


class SolverDivergenceError(ImexOdeError):
    """A linear or nonlinear solver failed to produce a solution."""

    exit_code = 3


class SingularShiftError(SolverDivergenceError):
    """(I - alpha*J) is singular to working precision."""

    def __init__(self, column: int, alpha: float):
        self.column = column
        self.alpha = alpha
        super().__init__(
            f"Shifted operator I - {alpha:.6g}*J is singular: zero pivot in column {column}"
        )


class KrylovConvergenceError(SolverDivergenceError):
    """GMRES did not reach the requested tolerance."""

    def __init__(
        self,
        best_residual: float,
        iterations: int,
        column: Optional[int] = None,
        solution: Optional[np.ndarray] = None,
    ):
        self.best_residual = best_residual
        self.iterations = iterations
        self.column = column
        self.solution = solution
        where = f" (column {column})" if column is not None else ""
        super().__init__(
            f"GMRES failed to converge after {iterations} iterations{where}; "
            f"best relative residual {best_residual:.3e}"
        )


class NewtonDivergenceError(SolverDivergenceError):
    """Newton iteration did not converge; keeps the residual history."""

    def __init__(self, residual_history: Sequence[float], reason: str = "iteration limit reached"):
        self.residual_history: List[float] = list(residual_history)
        last = self.residual_history[-1] if self.residual_history else float("nan")
        super().__init__(
            f"Newton solver diverged ({reason}) after {len(self.residual_history)} iterations; "
            f"last residual {last:.3e}"
        )


class StateBlowUpError(ImexOdeError):
    """Non-finite or unbounded state during integration."""

    exit_code = 4

    def __init__(self, step: int, stage: Optional[int] = None, max_abs: float = float("nan")):
        self.step = step
        self.stage = stage
        self.max_abs = max_abs
        where = f"step {step}" + (f", stage {stage}" if stage is not None else "")
        super().__init__(f"State blow-up at {where} (max |u| = {max_abs:.3e})")


class UnstableStepError(StateBlowUpError):
    """Step size outside the scheme's linear stability region for a decaying mode of J."""

    def __init__(self, scheme: str, dt: float, amplification: float, eigenvalue: complex):
        self.scheme = scheme
        self.dt = dt
        self.amplification = amplification
        self.eigenvalue = eigenvalue
        self.step = 0
        self.stage = None
        self.max_abs = float("inf")
        ImexOdeError.__init__(
            self,
            f"{scheme} is unstable at dt={dt:g}: decaying mode lambda={eigenvalue.real:.4g} "
            f"is amplified by {amplification:.3e} per step",
        )


class NonFiniteGradientError(ImexOdeError):
    """Gradient handed to the optimizer contains NaN or Inf."""

    exit_code = 4

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"Non-finite gradient entry at index {index}")


class DatasetFormatError(ImexOdeError):
    """Malformed dataset or model file."""

    exit_code = 5


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code taxonomy."""
    if isinstance(exc, ImexOdeError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 5
    return 1

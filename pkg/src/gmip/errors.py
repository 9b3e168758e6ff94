"""Exception types raised across the package."""

from __future__ import annotations


class UnboundedQuantileError(ValueError):
  """A quantile was requested at a probability where it is infinite."""


class InfeasibleTargetError(ValueError):
  """A calibration target cannot be met.

  Attributes:
    infimum: The smallest privacy level reachable with the given
      hyperparameters, when known.
  """

  def __init__(self, message: str, infimum: float | None = None):
    super().__init__(message)
    self.infimum = infimum


class SingularCovarianceError(ValueError):
  """An estimated covariance stayed numerically singular after regularization."""


class LeverageError(ValueError):
  """A query point has leverage ``h >= 1`` under the fitted design."""


class SingularDesignError(ValueError):
  """A least-squares design matrix is not invertible."""


class DivergenceError(RuntimeError):
  """Training produced non-finite parameters.

  Attributes:
    iteration: Zero-based index of the offending iteration.
  """

  def __init__(self, iteration: int):
    super().__init__(f"parameters became non-finite at iteration {iteration}")
    self.iteration = iteration


class TraceFormatError(ValueError):
  """A gradient trace file could not be parsed.

  Attributes:
    offset: Byte offset (binary traces) or line number (CSV traces) where the
      problem was detected.
  """

  def __init__(self, message: str, offset: int):
    super().__init__(f"{message} (at byte offset {offset})")
    self.offset = offset

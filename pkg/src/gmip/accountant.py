"""Closed-form privacy accounting for noisy SGD.

Per-step Gaussian membership-inference levels, their composition over many
steps (plain and with subsampling), and the translation between Gaussian
differential privacy and Gaussian membership-inference privacy.
"""

from __future__ import annotations

import dataclasses
import enum
import math

from scipy import special

from gmip.tradeoff import OneStepParams

__all__ = [
    "MU_STEP_OVERFLOW",
    "Notion",
    "PrivacyLevel",
    "SubsamplingPlan",
    "compose_k_steps",
    "compose_subsampled",
    "dp_to_mip",
    "gdp_mu_step",
    "mip_to_dp",
    "mu_step",
    "mu_step_no_noise",
    "n_effective",
    "subsampling_ratio",
]

MU_STEP_OVERFLOW = 40.0


class Notion(enum.Enum):
  GMIP = "gmip"
  GDP = "gdp"


@dataclasses.dataclass(frozen=True)
class PrivacyLevel:
  notion: Notion
  mu: float

  def __post_init__(self):
    if not self.mu >= 0:
      raise ValueError(f"mu must be >= 0, got {self.mu!r}")


@dataclasses.dataclass(frozen=True)
class SubsamplingPlan:
  """How many steps of which batch size run over a dataset.

  Attributes:
    dataset_size: Number of training examples ``N``.
    batch_size: Examples per step ``n``.
    epochs: Passes over the data ``E`` (may be fractional).
  """

  dataset_size: int
  batch_size: int
  epochs: float

  def __post_init__(self):
    if int(self.dataset_size) != self.dataset_size or self.dataset_size < 1:
      raise ValueError(f"dataset_size must be a positive integer, got {self.dataset_size!r}")
    if (int(self.batch_size) != self.batch_size or self.batch_size < 1
        or self.batch_size > self.dataset_size):
      raise ValueError(
          f"batch_size must be an integer in [1, {self.dataset_size}], got {self.batch_size!r}")
    if not self.epochs > 0 or math.isinf(self.epochs):
      raise ValueError(f"epochs must be positive and finite, got {self.epochs!r}")

  def iterations(self, strict: bool = False) -> float:
    """Number of steps ``E N / n``; floored to an integer when ``strict``."""
    t = self.epochs * self.dataset_size / self.batch_size
    return float(math.floor(t)) if strict else t


def n_effective(n: int, tau2: float, clip: float) -> float:
  """Batch size inflated by noise: ``n + tau2 n^2 / C^2``."""
  if n < 2:
    raise ValueError(f"n must be >= 2, got {n!r}")
  if not tau2 >= 0:
    raise ValueError(f"tau2 must be >= 0, got {tau2!r}")
  if not clip > 0:
    raise ValueError(f"clip must be > 0, got {clip!r}")
  if tau2 == 0:
    return float(n)
  if math.isinf(clip):
    raise ValueError("n_effective is undefined for tau2 > 0 without clipping")
  return n + tau2 * n * n / (clip * clip)


def mu_step(params: OneStepParams) -> float:
  """Gaussian approximation level of one step.

  ``(d + (2 n_eff - 1) K) / (n_eff sqrt(2 d + 4 n_eff K))``.
  """
  ne = params.n_effective
  d, k = params.d, params.K
  return (d + (2.0 * ne - 1.0) * k) / (ne * math.sqrt(2.0 * d + 4.0 * ne * k))


def mu_step_no_noise(n: float, d: int) -> float:
  """``mu_step`` for ``K = d`` written in closed form: ``sqrt(2d / (2n + 1))``."""
  return math.sqrt(2.0 * d / (2.0 * n + 1.0))


def gdp_mu_step(n: int, tau: float, clip: float) -> float:
  """Per-step GDP level of the clipped, noised mean gradient: ``2C / (n tau)``."""
  if tau <= 0:
    return math.inf
  return 2.0 * clip / (n * tau)


def compose_subsampled(mu_step_value: float, c: float) -> float:
  """Asymptotic level after subsampled composition.

  ``sqrt(2) c sqrt(exp(mu^2) Phi(1.5 mu) + 3 Phi(-0.5 mu) - 2)``. The bracket
  is rearranged as ``expm1(mu^2) Phi(1.5 mu) + erf(1.5 mu / sqrt2) / 2
  - 3 erf(0.5 mu / sqrt2) / 2`` so small levels keep full relative precision.

  Large steps are evaluated in log space; the result is ``inf`` once it
  leaves the double range (``mu_step`` above about 37.6).

  Raises:
    ValueError: If ``mu_step_value`` exceeds 40, where the asymptotic regime
      is meaningless.
  """
  mu = float(mu_step_value)
  if not mu >= 0:
    raise ValueError(f"mu_step must be >= 0, got {mu_step_value!r}")
  if not c > 0:
    raise ValueError(f"c must be > 0, got {c!r}")
  if mu > MU_STEP_OVERFLOW:
    raise ValueError(f"mu_step={mu} exceeds {MU_STEP_OVERFLOW}; composition overflows")
  r2 = math.sqrt(0.5)
  if mu * mu > 600.0:
    # exp(mu^2) would overflow: factor it out and work with logarithms.
    rest = special.ndtr(1.5 * mu) + (3.0 * special.ndtr(-0.5 * mu) - 2.0) * math.exp(-mu * mu)
    log_value = 0.5 * math.log(2.0) + math.log(c) + 0.5 * mu * mu + 0.5 * math.log(rest)
    return math.exp(log_value) if log_value < 709.0 else math.inf
  bracket = (math.expm1(mu * mu) * special.ndtr(1.5 * mu)
             + 0.5 * math.erf(1.5 * mu * r2) - 1.5 * math.erf(0.5 * mu * r2))
  return math.sqrt(2.0) * c * math.sqrt(max(bracket, 0.0))


def compose_k_steps(mu_step_value: float, k: int) -> float:
  """Level after ``k`` identical Gaussian steps: ``sqrt(k) mu_step``."""
  if int(k) != k or k < 1:
    raise ValueError(f"k must be a positive integer, got {k!r}")
  if not mu_step_value >= 0:
    raise ValueError(f"mu_step must be >= 0, got {mu_step_value!r}")
  return math.sqrt(k) * mu_step_value


def subsampling_ratio(plan: SubsamplingPlan, strict: bool = False) -> float:
  """Composition constant ``c = n sqrt(T) / N``, i.e. ``sqrt(E n / N)``."""
  if strict:
    t = plan.iterations(strict=True)
    return plan.batch_size * math.sqrt(t) / plan.dataset_size
  return math.sqrt(plan.epochs * plan.batch_size / plan.dataset_size)


def dp_to_mip(mu_dp: float, n: int, d: int, clip: float) -> float:
  """GMIP level implied by a per-step GDP level.

  ``min(sqrt(d / (n + 4 C^2 / mu_dp^2 + 1/2)), mu_dp)``, assuming ``K = d``.
  """
  if not mu_dp > 0:
    raise ValueError(f"mu_dp must be > 0, got {mu_dp!r}")
  if math.isinf(mu_dp):
    return math.sqrt(d / (n + 0.5))
  return min(math.sqrt(d / (n + 4.0 * clip * clip / (mu_dp * mu_dp) + 0.5)), mu_dp)


def mip_to_dp(mu_mip: float, n: int, d: int, clip: float = 1.0) -> float:
  """Per-step GDP level matching a GMIP level (``inf`` when no noise is needed).

  ``2 / sqrt(d / mu_mip^2 - n - 1/2)`` below ``sqrt(2d / (2n + 1))``. This
  branch carries no clipping norm, so it inverts :func:`dp_to_mip` exactly
  only for ``clip = 1``; ``clip`` is accepted for symmetry and otherwise
  ignored.
  """
  del clip
  if not mu_mip > 0:
    raise ValueError(f"mu_mip must be > 0, got {mu_mip!r}")
  if mu_mip >= mu_step_no_noise(n, d):
    return math.inf
  return 2.0 / math.sqrt(d / (mu_mip * mu_mip) - n - 0.5)

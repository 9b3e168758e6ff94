"""The gradient likelihood-ratio (GLiR) membership attack and its Monte Carlo audit.

The attacker sees the published mean gradient ``m`` of a batch of ``n`` and the
gradient ``theta`` of a query point. In coordinates whitened by the gradient
covariance, ``n ||m - theta||^2`` of a nonmember follows a noncentral
chi-squared law with noncentrality ``n K``, where ``K`` is the query's
susceptibility. Members pull ``m`` towards ``theta``, so small values are
evidence of membership and the left-tail probability is the p-value.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from collections.abc import Sequence

import numpy as np

from gmip.errors import SingularCovarianceError
from gmip.roc import RocEstimate, binomial_se
from gmip.specfun import NoncentralChiSq
from gmip.trace import GradientTrace

__all__ = [
    "AuditResult",
    "Estimated",
    "ExactParams",
    "Family",
    "GradientEstimate",
    "GradientModel",
    "LOG_FLOOR",
    "clip_rows",
    "estimate_distribution",
    "glir_log_pvalue",
    "glir_statistic",
    "random_model",
    "run_audit",
    "score_trace",
    "susceptibility",
]

LOG_FLOOR = -745.0
DEFAULT_RIDGE = 1e-6
_BLOCK = 256


class Family(enum.Enum):
  GAUSSIAN = "gaussian"
  UNIFORM = "uniform"


def _sym_sqrt(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
  """Symmetric square root and inverse square root of an SPD matrix."""
  vals, vecs = np.linalg.eigh(cov)
  if vals[0] <= 0:
    raise ValueError("covariance is not positive definite")
  root = (vecs * np.sqrt(vals)) @ vecs.T
  inv_root = (vecs / np.sqrt(vals)) @ vecs.T
  return root, inv_root


@dataclasses.dataclass(frozen=True, eq=False)
class GradientModel:
  """Distribution of per-example gradients used to simulate training steps.

  Attributes:
    mean: Mean vector of length ``d``.
    covariance: Symmetric positive definite ``d x d`` matrix.
    family: ``gaussian``, or ``uniform`` (independent uniform coordinates
      with unit variance, mapped through the covariance square root).
  """

  mean: np.ndarray
  covariance: np.ndarray
  family: Family = Family.GAUSSIAN

  def __post_init__(self):
    mean = np.asarray(self.mean, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
    d = mean.size
    if cov.shape != (d, d):
      raise ValueError(f"covariance must be {d}x{d}, got {cov.shape}")
    if np.max(np.abs(cov - cov.T)) > 1e-10 * max(1.0, np.max(np.abs(cov))):
      raise ValueError("covariance is not symmetric")
    cov = 0.5 * (cov + cov.T)
    root, inv_root = _sym_sqrt(cov)
    object.__setattr__(self, "mean", mean)
    object.__setattr__(self, "covariance", cov)
    object.__setattr__(self, "family", Family(self.family))
    object.__setattr__(self, "_root", root)
    object.__setattr__(self, "_inv_root", inv_root)

  @property
  def d(self) -> int:
    return self.mean.size

  def _standard(self, rng: np.random.Generator, shape) -> np.ndarray:
    if self.family is Family.GAUSSIAN:
      return rng.standard_normal(shape)
    r3 = math.sqrt(3.0)
    return rng.uniform(-r3, r3, size=shape)

  def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draws ``size`` gradients, shape ``(size, d)``."""
    return self.mean + self._standard(rng, (size, self.d)) @ self._root

  def sample_sums(self, rng: np.random.Generator, size: int, count: int,
                  clip: float = math.inf) -> np.ndarray:
    """Sums of ``count`` independent (clipped) gradients, shape ``(size, d)``.

    Without clipping, sums of Gaussian draws are drawn directly from
    ``N(count mu, count Sigma)``, which has exactly the same law.
    """
    if count == 0:
      return np.zeros((size, self.d))
    if self.family is Family.GAUSSIAN and math.isinf(clip):
      z = rng.standard_normal((size, self.d))
      return count * self.mean + math.sqrt(count) * (z @ self._root)
    out = np.zeros((size, self.d))
    per = max(1, (1 << 20) // max(1, count * self.d))
    for start in range(0, size, per):
      stop = min(size, start + per)
      draws = self.sample(rng, (stop - start) * count).reshape(stop - start, count, self.d)
      out[start:stop] = clip_rows(draws, clip).sum(axis=1)
    return out


def random_model(d: int, rng: np.random.Generator, *, eig_range=(0.5, 2.0),
                 mean_scale: float = 1.0,
                 family: Family = Family.GAUSSIAN) -> GradientModel:
  """A model with a random mean and a randomly rotated covariance."""
  q, _ = np.linalg.qr(rng.standard_normal((d, d)))
  eig = rng.uniform(*eig_range, size=d)
  cov = (q * eig) @ q.T
  return GradientModel(mean_scale * rng.standard_normal(d), 0.5 * (cov + cov.T), family)


def clip_rows(g: np.ndarray, clip: float) -> np.ndarray:
  """Scales each vector along the last axis to norm at most ``clip``."""
  if math.isinf(clip):
    return g
  norms = np.linalg.norm(g, axis=-1, keepdims=True)
  with np.errstate(divide="ignore"):
    scale = np.minimum(1.0, clip / norms)
  return g * scale


@dataclasses.dataclass(frozen=True, eq=False)
class GradientEstimate:
  """The attacker's view of the gradient distribution.

  Attributes:
    mean_hat: Estimated mean.
    cov_hat: Estimated (regularized) covariance.
    whitener: Symmetric ``cov_hat^(-1/2)``.
    sample_count: Number of background gradients used; 0 for exact parameters.
  """

  mean_hat: np.ndarray
  cov_hat: np.ndarray
  whitener: np.ndarray
  sample_count: int

  @classmethod
  def from_moments(cls, mean, cov, sample_count: int = 0) -> GradientEstimate:
    mean = np.asarray(mean, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] <= 0 or vals[0] <= 1e-14 * vals[-1]:
      raise SingularCovarianceError(
          f"covariance is numerically singular (eigenvalues in [{vals[0]:.3g}, "
          f"{vals[-1]:.3g}]); use a larger ridge or more background samples")
    whitener = (vecs / np.sqrt(vals)) @ vecs.T
    return cls(mean, cov, whitener, sample_count)

  @classmethod
  def from_model(cls, model: GradientModel) -> GradientEstimate:
    return cls.from_moments(model.mean, model.covariance, 0)

  @property
  def d(self) -> int:
    return self.mean_hat.size

  def with_noise(self, n: int, tau2: float) -> GradientEstimate:
    """Accounts for isotropic noise ``tau2`` added to the mean of ``n`` gradients.

    The published mean then has covariance ``(Sigma + n tau2 I) / n``, so the
    attack proceeds as if the per-example covariance were ``Sigma + n tau2 I``.
    """
    if tau2 == 0:
      return self
    cov = self.cov_hat + n * tau2 * np.eye(self.d)
    return GradientEstimate.from_moments(self.mean_hat, cov, self.sample_count)


def estimate_distribution(background_gradients, ridge: float = DEFAULT_RIDGE) -> GradientEstimate:
  """Sample mean and covariance of background gradients.

  Args:
    background_gradients: Array ``(m, d)`` with ``m >= 2``; ``m > d`` is
      needed for a well-conditioned estimate without a large ridge.
    ridge: Relative regularization; ``ridge * trace / d`` is added to the
      diagonal.

  Raises:
    SingularCovarianceError: If the regularized covariance is still
      numerically singular.
  """
  g = np.asarray(background_gradients, dtype=float)
  if g.ndim == 1:
    g = g[:, None]
  m, d = g.shape
  if m < 2:
    raise ValueError("need at least two background gradients")
  if ridge < 0:
    raise ValueError("ridge must be >= 0")
  mean = g.mean(axis=0)
  centered = g - mean
  cov = centered.T @ centered / (m - 1)
  cov += ridge * np.trace(cov) / d * np.eye(d)
  return GradientEstimate.from_moments(mean, cov, m)


def glir_statistic(published_mean, query_gradient, estimate: GradientEstimate, n: int):
  """``S = (n - 1) (m - theta)^T Sigma^-1 (m - theta)``; vectorised over rows."""
  if n < 2:
    raise ValueError("n must be >= 2")
  diff = np.asarray(published_mean, dtype=float) - np.asarray(query_gradient, dtype=float)
  w = diff @ estimate.whitener
  out = (n - 1) * np.sum(w * w, axis=-1)
  return float(out) if np.ndim(out) == 0 else out


def susceptibility(query_gradient, estimate: GradientEstimate):
  """``K = ||Sigma^(-1/2) (theta - mu)||^2``; vectorised over rows."""
  w = (np.asarray(query_gradient, dtype=float) - estimate.mean_hat) @ estimate.whitener
  out = np.sum(w * w, axis=-1)
  return float(out) if np.ndim(out) == 0 else out


def glir_log_pvalue(statistic, d: int, n: int, K_hat):
  """Log left-tail probability of the scaled statistic under the nonmember law.

  ``log F_{chi'^2_d(n K)}(n S / (n - 1))``; small values point to membership.
  Results are clamped below at -745 (the log of the smallest double).
  """
  s = np.atleast_1d(np.asarray(statistic, dtype=float))
  k = np.broadcast_to(np.atleast_1d(np.asarray(K_hat, dtype=float)), s.shape)
  out = np.full(s.shape, LOG_FLOOR)
  pos = s > 0
  # One law per distinct susceptibility, evaluated at all of its statistics.
  keys, groups = np.unique(k[pos], return_inverse=True)
  idx = np.flatnonzero(pos)
  for g, ki in enumerate(keys):
    sel = idx[groups.reshape(-1) == g]
    p = np.atleast_1d(NoncentralChiSq(d, n * ki).cdf(n * s[sel] / (n - 1)))
    with np.errstate(divide="ignore"):
      out[sel] = np.log(p)
  out = np.maximum(out, LOG_FLOOR)
  return float(out[0]) if np.ndim(statistic) == 0 else out


def score_trace(trace: GradientTrace, estimates: GradientEstimate | Sequence[GradientEstimate],
                tau2: float = 0.0, clip: float = math.inf) -> float:
  """Aggregated log p-value of a trace (sum over steps).

  Args:
    trace: Published means and query gradients.
    estimates: One estimate for all steps, or one per step.
    tau2: Noise variance added to the published means.
    clip: Clipping norm applied to the query gradients before testing.
  """
  if isinstance(estimates, GradientEstimate):
    estimates = [estimates] * trace.steps
  if len(estimates) != trace.steps:
    raise ValueError("need one estimate per step")
  total = 0.0
  for t in range(trace.steps):
    est = estimates[t].with_noise(trace.n, tau2)
    q = clip_rows(trace.queries[t], clip)
    s = glir_statistic(trace.means[t], q, est, trace.n)
    k = susceptibility(q, est)
    total += glir_log_pvalue(s, trace.d, trace.n, k)
  return total


# -- Monte Carlo audit --------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ExactParams:
  """The attacker knows the gradient distribution's mean and covariance."""


@dataclasses.dataclass(frozen=True)
class Estimated:
  """The attacker estimates the distribution from ``m`` fresh gradients per step."""

  m: int
  ridge: float = DEFAULT_RIDGE


@dataclasses.dataclass(frozen=True, eq=False)
class AuditResult:
  """Scores of a simulated audit; lower scores claim membership."""

  member_scores: np.ndarray
  nonmember_scores: np.ndarray
  steps: int

  @property
  def roc(self) -> RocEstimate:
    return RocEstimate.from_scores(self.member_scores, self.nonmember_scores)

  def fnr_at_threshold(self, eta: float) -> float:
    return float(np.mean(self.member_scores > eta))

  def fpr_at_threshold(self, eta: float) -> float:
    return float(np.mean(self.nonmember_scores <= eta))

  def level_test(self, curve, alphas, z: float = 3.0):
    """Two-sided check of FNR at the calibrated threshold ``log alpha``.

    Only meaningful for one step with exact parameters, where nonmember
    p-values are exactly uniform.

    Returns:
      Rows ``(alpha, empirical_fnr, analytical_fnr, se, passed)``.
    """
    rows = []
    trials = self.member_scores.size
    for a in alphas:
      emp = self.fnr_at_threshold(math.log(a))
      ref = float(curve(a))
      se = binomial_se(ref, trials)
      rows.append((float(a), emp, ref, se, abs(emp - ref) <= z * se))
    return rows


def _block_rng(seed: int, block: int) -> np.random.Generator:
  return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def run_audit(model: GradientModel, n: int, steps: int, trials: int, *,
              tau2: float = 0.0, clip: float = math.inf,
              estimation: ExactParams | Estimated = ExactParams(),
              seed: int = 0) -> AuditResult:
  """Simulates the membership game against noisy SGD steps and scores it with GLiR.

  Every trial produces one member and one nonmember score. In a member trial
  the query gradient is one of the ``n`` batch gradients (its position does
  not matter since only the mean is published) and the other ``n - 1`` are
  fresh draws; in a nonmember trial all ``n`` batch gradients and the query
  are independent. Each of ``steps`` steps uses a fresh batch and query
  draw, clips per sample, averages, and adds ``N(0, tau2 I)``. Scores are the
  sums of per-step log p-values.

  Trials are simulated in blocks of 256, each with its own counter-based
  generator keyed by ``(seed, block)``, so results do not depend on how the
  blocks are scheduled.

  Args:
    model: Per-example gradient distribution.
    n: Batch size.
    steps: Number of steps ``T``.
    trials: Trials per class (at least 100).
    tau2: Noise variance.
    clip: Clipping norm.
    estimation: :class:`ExactParams` or :class:`Estimated`; estimated moments
      come from ``m`` fresh gradients per step shared by all trials.
    seed: Master seed.
  """
  if trials < 100:
    raise ValueError("need at least 100 trials")
  if n < 2 or steps < 1:
    raise ValueError("need n >= 2 and steps >= 1")
  if tau2 > 0 and math.isinf(clip):
    raise ValueError("noise requires a finite clipping norm")
  tau = math.sqrt(tau2)
  d = model.d

  if isinstance(estimation, Estimated):
    rng = _block_rng(seed, 1 << 30)
    per_step = []
    for _ in range(steps):
      bg = clip_rows(model.sample(rng, estimation.m), clip)
      per_step.append(estimate_distribution(bg, estimation.ridge).with_noise(n, tau2))
  else:
    per_step = [GradientEstimate.from_model(model).with_noise(n, tau2)] * steps

  member = np.zeros(trials)
  nonmember = np.zeros(trials)
  for block, start in enumerate(range(0, trials, _BLOCK)):
    size = min(_BLOCK, trials - start)
    rng = _block_rng(seed, block)
    for t in range(steps):
      est = per_step[t]
      for label, scores in (("member", member), ("nonmember", nonmember)):
        query = clip_rows(model.sample(rng, size), clip)
        if label == "member":
          mean = (query + model.sample_sums(rng, size, n - 1, clip)) / n
        else:
          mean = model.sample_sums(rng, size, n, clip) / n
        if tau > 0:
          mean = mean + tau * rng.standard_normal((size, d))
        s = glir_statistic(mean, query, est, n)
        k = susceptibility(query, est)
        scores[start:start + size] += glir_log_pvalue(np.atleast_1d(s), d, n, np.atleast_1d(k))
  return AuditResult(member, nonmember, steps)

"""Closed-form loss-based membership test for least squares.

For a model fitted by ordinary least squares under Gaussian label noise
``sigma^2``, the residual of a query ``(x', y')`` is ``N(0, v0)`` with
``v0 = sigma^2 (1 - h)`` when the query was in the training set and
``N(0, v1)`` with ``v1 = sigma^2 (1 + h)`` otherwise, where
``h = x'^T (X^T X)^-1 x'`` is the leverage. The likelihood-ratio test
thresholds the squared loss.

Internally the null hypothesis is *member*: a rejection claims "nonmember",
so the FPR is the rate of members flagged and the power (TPR) the rate of
nonmembers flagged. :class:`LossLrtCurve` and the experiment's ROC convert to
the membership-positive convention used by the rest of the package.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import special

from gmip.errors import LeverageError, SingularDesignError
from gmip.roc import RocEstimate, binomial_se
from gmip.tradeoff import TradeoffCurve

__all__ = [
    "CONVENTION_NOTE",
    "LinregExperiment",
    "LossLrtCurve",
    "LossTestSpec",
    "OlsFit",
    "fit_ols",
    "loss_lrt_fnr",
    "loss_lrt_power",
    "loss_variances",
    "run_linreg_experiment",
]

CONVENTION_NOTE = (
    "tpr_empirical/tpr_analytical treat 'member' as the null hypothesis: fpr is the "
    "fraction of members flagged as nonmembers and tpr the fraction of nonmembers "
    "flagged. The ROC file uses the opposite, membership-positive convention.")
_MAX_COND = 1e12


@dataclasses.dataclass(frozen=True, eq=False)
class OlsFit:
  design: np.ndarray
  targets: np.ndarray
  params: np.ndarray
  gram_inverse: np.ndarray
  noise_var: float
  condition_number: float


def fit_ols(design, targets, noise_var: float) -> OlsFit:
  """Least-squares fit ``theta = (X^T X)^-1 X^T y``.

  Raises:
    SingularDesignError: If ``X^T X`` is singular or badly conditioned.
  """
  x = np.asarray(design, dtype=float)
  y = np.asarray(targets, dtype=float)
  if x.ndim != 2 or y.shape != (x.shape[0],):
    raise ValueError("design must be (n, p) and targets (n,)")
  if not noise_var > 0:
    raise ValueError("noise_var must be > 0")
  gram = x.T @ x
  cond = float(np.linalg.cond(gram))
  if not cond < _MAX_COND:
    raise SingularDesignError(f"X^T X is singular (condition number {cond:.3g})")
  gram_inv = np.linalg.inv(gram)
  params = gram_inv @ (x.T @ y)
  return OlsFit(x, y, params, gram_inv, float(noise_var), cond)


@dataclasses.dataclass(frozen=True)
class LossTestSpec:
  """Residual variances of a query: ``v0`` if it is a member, ``v1`` otherwise."""

  v0: float
  v1: float

  def __post_init__(self):
    if not (0 < self.v0 <= self.v1) or math.isinf(self.v1):
      raise ValueError(f"need 0 < v0 <= v1 < inf, got ({self.v0!r}, {self.v1!r})")

  @property
  def ratio(self) -> float:
    return self.v0 / self.v1


def loss_variances(query, fit: OlsFit) -> LossTestSpec:
  """``(sigma^2 (1 - h), sigma^2 (1 + h))`` with ``h`` the query's leverage.

  Raises:
    LeverageError: If ``h >= 1``.
  """
  q = np.asarray(query, dtype=float).reshape(-1)
  h = float(q @ fit.gram_inverse @ q)
  if h >= 1.0:
    raise LeverageError(f"leverage {h:.6g} >= 1")
  h = max(h, 0.0)
  return LossTestSpec(fit.noise_var * (1.0 - h), fit.noise_var * (1.0 + h))


def _chi2_1_isf(alpha):
  """Upper quantile of chi-squared(1): ``Phi^-1(alpha / 2)^2``."""
  return special.ndtri(0.5 * np.asarray(alpha, dtype=float)) ** 2


def loss_lrt_power(spec: LossTestSpec, alpha):
  """Power at level ``alpha``: ``1 - F_1((v0 / v1) F_1^-1(1 - alpha))``.

  ``F_1`` is the chi-squared(1) CDF. The test flags "nonmember" when the
  squared loss exceeds ``v0 F_1^-1(1 - alpha)``.
  """
  a = np.asarray(alpha, dtype=float)
  if np.any((a < 0) | (a > 1)):
    raise ValueError("alpha must lie in [0, 1]")
  with np.errstate(divide="ignore"):
    q = _chi2_1_isf(a)
    # 1 - F_1(r q) = 2 Phi(-sqrt(r q)).
    out = 2.0 * special.ndtr(-np.sqrt(spec.ratio * q))
  out = np.where(a == 0, 0.0, np.where(a == 1, 1.0, out))
  return float(out) if out.ndim == 0 else out


def loss_lrt_fnr(spec: LossTestSpec, alpha):
  """Type II error at level ``alpha``: ``F_1((v0 / v1) F_1^-1(1 - alpha))``."""
  out = 1.0 - np.asarray(loss_lrt_power(spec, alpha), dtype=float)
  return float(out) if out.ndim == 0 else out


@dataclasses.dataclass(frozen=True)
class LossLrtCurve(TradeoffCurve):
  """Trade-off of the loss test with members as positives.

  The FNR at membership-FPR ``a`` is
  ``2 Phi(-Phi^-1((1 + a) / 2) / sqrt(v0 / v1))``.
  """

  spec: LossTestSpec

  def __call__(self, alpha):
    a = np.asarray(alpha, dtype=float)
    if np.any((a < 0) | (a > 1)):
      raise ValueError("alpha must lie in [0, 1]")
    with np.errstate(divide="ignore"):
      out = 2.0 * special.ndtr(-special.ndtri(0.5 * (1.0 + a)) / math.sqrt(self.spec.ratio))
    out = np.where(a == 1, 0.0, out)
    return float(out) if out.ndim == 0 else out


@dataclasses.dataclass(frozen=True, eq=False)
class LinregExperiment:
  """Outcome of the simulated loss-test experiment.

  Attributes:
    member_scores: Squared member losses divided by their ``v0``.
    nonmember_scores: Squared nonmember losses divided by their ``v0``;
      ``inf`` for queries with leverage at least 1, which cannot be members.
    nonmember_leverages: Leverage of each nonmember query.
    member_leverages: Leverage of each member query.
    redraws: Number of singular designs that were redrawn.
  """

  member_scores: np.ndarray
  nonmember_scores: np.ndarray
  nonmember_leverages: np.ndarray
  member_leverages: np.ndarray
  redraws: int

  @property
  def trials(self) -> int:
    return self.member_scores.size

  @property
  def roc(self) -> RocEstimate:
    """Membership-positive ROC: low normalized loss claims member."""
    return RocEstimate.from_scores(self.member_scores, self.nonmember_scores)

  @property
  def nonmember_ratios(self) -> np.ndarray:
    """``v0 / v1`` of each nonmember query, 0 when its leverage is at least 1."""
    h = self.nonmember_leverages
    return np.clip((1.0 - h) / (1.0 + h), 0.0, None)

  @property
  def mean_leverage_spec(self) -> LossTestSpec:
    """Variances (in units of sigma^2) at the mean nonmember leverage."""
    h = float(np.mean(self.nonmember_leverages))
    return LossTestSpec(1.0 - h, 1.0 + h)

  def empirical_fpr(self, alpha) -> float:
    return float(np.mean(self.member_scores >= _chi2_1_isf(alpha)))

  def empirical_power(self, alpha) -> float:
    return float(np.mean(self.nonmember_scores >= _chi2_1_isf(alpha)))

  def analytical_power(self, alpha) -> float:
    """Mean of the per-query powers at level ``alpha``."""
    q = _chi2_1_isf(alpha)
    return float(np.mean(2.0 * special.ndtr(-np.sqrt(self.nonmember_ratios * q))))

  def mean_leverage_power(self, alpha) -> float:
    return float(loss_lrt_power(self.mean_leverage_spec, alpha))

  def power_check(self, alphas, z: float = 3.0):
    """Rows ``(alpha, empirical, analytical, se, passed)`` at each level."""
    rows = []
    for a in alphas:
      emp = self.empirical_power(a)
      ref = self.analytical_power(a)
      se = binomial_se(ref, self.trials)
      rows.append((float(a), emp, ref, se, abs(emp - ref) <= z * se))
    return rows

  def to_csv(self, alphas=None) -> str:
    if alphas is None:
      alphas = np.concatenate([np.logspace(-4, -1, 31)[:-1], np.linspace(0.1, 1.0, 91)])
    lines = ["fpr,tpr_empirical,tpr_analytical"]
    for a in alphas:
      lines.append(f"{a:.17g},{self.empirical_power(a):.17g},{self.analytical_power(a):.17g}")
    return "\n".join(lines) + "\n"


def run_linreg_experiment(n: int, p: int, sigma2: float, trials: int, seed: int,
                          *, beta_scale: float = 1.0) -> LinregExperiment:
  """Simulates the loss test on fresh OLS problems.

  Each trial draws a design with i.i.d. standard normal entries, a standard
  normal teacher ``beta`` (scaled by ``beta_scale``) and labels
  ``y = X beta + eps``. One training row is the member query; a fresh
  ``(x', y')`` is the nonmember query. Scores are squared losses divided by
  each query's own member variance ``v0``, so member scores are exactly
  chi-squared(1).

  Raises:
    ValueError: Unless ``p >= 1``, ``n > p + 1`` and ``trials >= 1000``.
  """
  if p < 1:
    raise ValueError("p must be >= 1")
  if n <= p + 1:
    raise ValueError("need n > p + 1")
  if trials < 1000:
    raise ValueError("need at least 1000 trials")
  if not sigma2 > 0:
    raise ValueError("sigma2 must be > 0")
  sd = math.sqrt(sigma2)
  mem = np.empty(trials)
  non = np.empty(trials)
  levq = np.empty(trials)
  levs = np.empty(trials)
  redraws = 0
  block = 512
  for b, start in enumerate(range(0, trials, block)):
    size = min(block, trials - start)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(b,))))
    x = rng.standard_normal((size, n, p))
    beta = beta_scale * rng.standard_normal((size, p))
    y = np.einsum("tnp,tp->tn", x, beta) + sd * rng.standard_normal((size, n))
    xq = rng.standard_normal((size, p))
    yq = np.einsum("tp,tp->t", xq, beta) + sd * rng.standard_normal(size)
    idx = rng.integers(0, n, size=size)
    gram = np.einsum("tnp,tnq->tpq", x, x)
    cond = np.linalg.cond(gram)
    for i in np.flatnonzero(~(cond < _MAX_COND)):
      # Continuous designs are almost surely regular; redraw just in case.
      while True:
        redraws += 1
        x[i] = rng.standard_normal((n, p))
        y[i] = x[i] @ beta[i] + sd * rng.standard_normal(n)
        gram[i] = x[i].T @ x[i]
        if np.linalg.cond(gram[i]) < _MAX_COND:
          break
    gram_inv = np.linalg.inv(gram)
    theta = np.einsum("tpq,tq->tp", gram_inv, np.einsum("tnp,tn->tp", x, y))
    xm = x[np.arange(size), idx]
    ym = y[np.arange(size), idx]
    hm = np.einsum("tp,tpq,tq->t", xm, gram_inv, xm)
    hq = np.einsum("tp,tpq,tq->t", xq, gram_inv, xq)
    if np.any(hm >= 1):
      raise LeverageError("leverage >= 1 for a training point in simulated design")
    loss_m = (ym - np.einsum("tp,tp->t", xm, theta)) ** 2
    loss_q = (yq - np.einsum("tp,tp->t", xq, theta)) ** 2
    mem[start:start + size] = loss_m / (sigma2 * (1.0 - hm))
    # Training points have leverage below 1, so h >= 1 certifies a nonmember.
    with np.errstate(divide="ignore", invalid="ignore"):
      non[start:start + size] = np.where(hq < 1, loss_q / (sigma2 * (1.0 - hq)), np.inf)
    levq[start:start + size] = hq
    levs[start:start + size] = hm
  return LinregExperiment(mem, non, levq, levs, redraws)

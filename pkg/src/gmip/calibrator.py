"""Noise calibration: the SGD noise level that reaches a target privacy level."""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Callable

from gmip.accountant import (
    MU_STEP_OVERFLOW,
    Notion,
    SubsamplingPlan,
    compose_subsampled,
    gdp_mu_step,
    mu_step,
    subsampling_ratio,
)
from gmip.errors import InfeasibleTargetError
from gmip.tradeoff import OneStepParams

__all__ = [
    "CalibrationTarget",
    "DatasetPreset",
    "PRESETS",
    "PUBLISHED_TAU_TABLE",
    "TauCell",
    "achieved_mu",
    "mu_grid",
    "reproduce_tau_table",
    "round_half_away",
    "tau_for_gdp",
    "tau_for_gmip",
    "tau_table_csv",
    "tau_table_text",
]

LOG_TAU_BRACKET = (math.log(1e-8), math.log(1e6))
REL_WIDTH = 1e-12


@dataclasses.dataclass(frozen=True)
class CalibrationTarget:
  """A target privacy level together with the training hyperparameters.

  Attributes:
    notion: GMIP or GDP.
    target_mu: Level to reach after composition over the whole run.
    plan: Dataset size, batch size and epochs.
    d: Number of parameters.
    clip: Per-sample clipping norm.
    K: Gradient susceptibility; defaults to ``d``.
    strict: Floor the number of iterations to an integer.
  """

  notion: Notion
  target_mu: float
  plan: SubsamplingPlan
  d: int
  clip: float
  K: float | None = None
  strict: bool = False

  def __post_init__(self):
    if not self.target_mu > 0 or math.isinf(self.target_mu):
      raise ValueError(f"target_mu must be positive and finite, got {self.target_mu!r}")
    if int(self.d) != self.d or self.d < 1:
      raise ValueError(f"d must be a positive integer, got {self.d!r}")
    if not self.clip > 0 or math.isinf(self.clip):
      raise ValueError(f"clip must be positive and finite, got {self.clip!r}")
    if self.plan.batch_size < 2:
      raise ValueError("batch size must be >= 2")
    if self.K is None:
      object.__setattr__(self, "K", float(self.d))
    elif not self.K >= 0:
      raise ValueError(f"K must be >= 0, got {self.K!r}")

  def with_notion(self, notion: Notion) -> CalibrationTarget:
    return dataclasses.replace(self, notion=notion)


def _c(target: CalibrationTarget) -> float:
  return subsampling_ratio(target.plan, strict=target.strict)


def _gmip_step(target: CalibrationTarget, tau: float) -> float:
  params = OneStepParams(target.plan.batch_size, target.d, tau * tau,
                         target.clip, target.K)
  return mu_step(params)


def achieved_mu(target: CalibrationTarget, tau: float) -> float:
  """Composed level of the run at noise level ``tau`` under the target's notion."""
  if target.notion is Notion.GDP:
    step = gdp_mu_step(target.plan.batch_size, tau, target.clip)
  else:
    step = _gmip_step(target, tau)
  if step > MU_STEP_OVERFLOW:
    return math.inf
  return compose_subsampled(step, _c(target))


def _solve_log_tau(mu_of_tau: Callable[[float], float], target_mu: float,
                   what: str) -> float:
  lo, hi = LOG_TAU_BRACKET
  mu_hi = mu_of_tau(math.exp(hi))
  if mu_hi > target_mu:
    raise InfeasibleTargetError(
        f"{what}: target mu={target_mu:g} not reached even at tau={math.exp(hi):g} "
        f"(achieved {mu_hi:g})", infimum=mu_hi)
  if mu_of_tau(math.exp(lo)) <= target_mu:
    return math.exp(lo)
  # mu decreases in tau; keep mu(lo) > target >= mu(hi).
  while hi - lo > REL_WIDTH:
    mid = 0.5 * (lo + hi)
    if mu_of_tau(math.exp(mid)) > target_mu:
      lo = mid
    else:
      hi = mid
  return math.exp(hi)


def tau_for_gdp(target: CalibrationTarget) -> float:
  """Noise level at which the run is ``target_mu``-GDP.

  Raises:
    InfeasibleTargetError: If the target is out of reach within the search
      bracket ``tau in [1e-8, 1e6]``.
  """
  t = target.with_notion(Notion.GDP)
  return _solve_log_tau(lambda tau: achieved_mu(t, tau), target.target_mu, "GDP")


def tau_for_gmip(target: CalibrationTarget, *, min_rule: bool = True) -> float:
  """Noise level at which the run is ``target_mu``-GMIP.

  Returns 0 when training without noise already meets the target. With
  ``min_rule`` the result is capped by the GDP noise level, since a GDP
  guarantee implies the same GMIP guarantee.

  Raises:
    InfeasibleTargetError: If the target cannot be reached; the exception
      carries the smallest level found.
  """
  t = target.with_notion(Notion.GMIP)
  if achieved_mu(t, 0.0) <= target.target_mu:
    return 0.0
  try:
    tau = _solve_log_tau(lambda tau: achieved_mu(t, tau), target.target_mu, "GMIP")
  except InfeasibleTargetError:
    if not min_rule:
      raise
    tau = math.inf
  if min_rule:
    tau = min(tau, tau_for_gdp(target))
  return tau


# -- Published utility-experiment setups --------------------------------------

@dataclasses.dataclass(frozen=True)
class DatasetPreset:
  name: str
  dataset_size: int
  d: int
  batch_size: int
  epochs: float
  clip: float

  @property
  def plan(self) -> SubsamplingPlan:
    return SubsamplingPlan(self.dataset_size, self.batch_size, self.epochs)

  def target(self, notion: Notion, mu: float) -> CalibrationTarget:
    return CalibrationTarget(notion, mu, self.plan, self.d, self.clip)


PRESETS: dict[str, DatasetPreset] = {
    "cifar10": DatasetPreset("CIFAR-10", 48000, 650, 400, 10, 500.0),
    "purchase": DatasetPreset("Purchase", 54855, 2580, 795, 3, 2000.0),
    "adult": DatasetPreset("Adult", 43000, 1026, 1000, 20, 800.0),
}


def mu_grid(count: int = 20, lo: float = 0.4, hi: float = 50.0) -> list[float]:
  """Log-spaced target levels ``lo (hi/lo)^(k/(count-1))``."""
  return [lo * (hi / lo) ** (k / (count - 1)) for k in range(count)]


_ZEROS = [0.0] * 20
PUBLISHED_TAU_TABLE: dict[tuple[str, str], list[float]] = {
    ("cifar10", "MIP"): [2.84, 2.44, 2.13] + _ZEROS[:17],
    ("cifar10", "DP"): [2.84, 2.44, 2.13, 1.89, 1.70, 1.55, 1.42, 1.32, 1.24, 1.17,
                        1.11, 1.06, 1.02, 0.98, 0.94, 0.91, 0.88, 0.85, 0.83, 0.81],
    ("purchase", "MIP"): [4.72, 4.14, 3.68, 3.32, 3.04, 2.81] + _ZEROS[:14],
    ("purchase", "DP"): [4.72, 4.14, 3.68, 3.32, 3.04, 2.81, 2.62, 2.46, 2.32, 2.21,
                         2.11, 2.02, 1.94, 1.87, 1.81, 1.75, 1.70, 1.65, 1.61, 1.57],
    ("adult", "MIP"): [3.38, 2.77, 2.30, 1.93, 1.65] + _ZEROS[:15],
    ("adult", "DP"): [3.38, 2.77, 2.30, 1.93, 1.65, 1.43, 1.26, 1.13, 1.02, 0.94,
                      0.87, 0.81, 0.77, 0.73, 0.69, 0.66, 0.63, 0.61, 0.59, 0.57],
}


@dataclasses.dataclass(frozen=True)
class TauCell:
  dataset: str
  notion: str
  mu: float
  tau: float
  published: float

  @property
  def rounded(self) -> float:
    return round_half_away(self.tau, 2)

  @property
  def deviation(self) -> float:
    return abs(self.tau - self.published)


def round_half_away(x: float, places: int) -> float:
  """Rounds half away from zero (unlike Python's banker's ``round``)."""
  scale = 10.0 ** places
  return math.copysign(math.floor(abs(x) * scale + 0.5) / scale, x)


def reproduce_tau_table() -> list[TauCell]:
  """Recomputes the noise table of the utility experiment (3 datasets x 2 notions x 20 levels)."""
  cells = []
  mus = mu_grid()
  for key, preset in PRESETS.items():
    for notion, label in ((Notion.GMIP, "MIP"), (Notion.GDP, "DP")):
      published = PUBLISHED_TAU_TABLE[(key, label)]
      for mu, pub in zip(mus, published):
        target = preset.target(notion, mu)
        tau = tau_for_gmip(target) if notion is Notion.GMIP else tau_for_gdp(target)
        cells.append(TauCell(key, label, mu, tau, pub))
  return cells


def tau_table_csv(cells: list[TauCell]) -> str:
  lines = ["dataset,notion,mu,tau"]
  lines += [f"{c.dataset},{c.notion},{c.mu:.17g},{c.tau:.17g}" for c in cells]
  return "\n".join(lines) + "\n"


def tau_table_text(cells: list[TauCell], with_diff: bool = True) -> str:
  """Aligned table: one row per dataset and notion, one column per level."""
  mus = mu_grid()
  head = f"{'mu':<16}" + "".join(f"{m:>7.2f}" for m in mus)
  lines = [head]
  rows: dict[tuple[str, str], list[TauCell]] = {}
  for c in cells:
    rows.setdefault((c.dataset, c.notion), []).append(c)
  for (ds, notion), row in rows.items():
    label = f"{PRESETS[ds].name} ({notion})"
    lines.append(f"{label:<16}" + "".join(f"{c.rounded:>7.2f}" for c in row))
  if with_diff:
    bad = [c for c in cells if c.deviation > 0.01 + 1e-12]
    worst = max(c.deviation for c in cells)
    lines.append("")
    lines.append(f"cells differing from the published table by > 0.01: {len(bad)} "
                 f"(largest deviation {worst:.4f})")
    for c in bad:
      lines.append(f"  {c.dataset} {c.notion} mu={c.mu:.2f}: {c.tau:.4f} vs {c.published:.2f}")
  return "\n".join(lines) + "\n"

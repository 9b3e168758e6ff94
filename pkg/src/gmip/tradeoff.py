"""Trade-off functions and their composition.

A trade-off curve maps the false positive rate ``alpha`` of a membership test
to the smallest false negative rate ``beta`` any test can reach at that FPR.
Curves here are immutable callables, vectorised over ``alpha``.
"""

from __future__ import annotations

import abc
import dataclasses
import enum
import math
from collections.abc import Sequence

import numpy as np
from scipy import special

from gmip.specfun import NoncentralChiSq

__all__ = [
    "GaussianCurve",
    "OneStepCurve",
    "OneStepParams",
    "Ordering",
    "StochasticComposition",
    "TabulatedCurve",
    "TradeoffCurve",
    "WeightedTestFamily",
    "compare",
    "check_axioms",
    "evaluation_grid",
    "gaussian_beta",
    "onestep_alpha",
    "onestep_beta",
    "onestep_frontier",
    "stochastic_compose",
    "sup_gap",
    "tabulate",
    "tensor_compose_gaussian",
    "write_curve_csv",
]

AXIOM_TOL = 1e-9
DEFAULT_GRID = 1001
_GRID_ANCHORS = (1e-5, 1e-4, 1e-3, 0.005, 0.01, 0.05, 0.25, 0.5)


def evaluation_grid(size: int = DEFAULT_GRID) -> np.ndarray:
  """FPR grid used for tabulation and curve checks.

  Grids of at least 101 points start at 0, put roughly half of the points on a
  log scale in [1e-6, 0.1) and the rest on a linear scale in [0.1, 1]. The
  points nearest to 1e-5, 1e-4, 1e-3, 0.005, 0.01, 0.05, 0.25 and 0.5 are
  moved onto those values. Smaller grids are uniform.

  Args:
    size: Number of points, at least 3.

  Returns:
    Increasing array starting at 0 and ending at 1.
  """
  if size < 3:
    raise ValueError(f"grid size must be >= 3, got {size}")
  if size < 101:
    return np.linspace(0.0, 1.0, size)
  n_lin = (size + 1) // 2
  n_log = size - n_lin - 1
  grid = np.concatenate([[0.0], np.logspace(-6.0, -1.0, n_log, endpoint=False),
                         np.linspace(0.1, 1.0, n_lin)])
  # Put the usual audit levels on the grid exactly.
  for anchor in _GRID_ANCHORS:
    i = int(np.argmin(np.abs(grid - anchor) / anchor))
    if abs(grid[i] - anchor) < 0.05 * anchor:
      grid[i] = anchor
  return grid


class TradeoffCurve(abc.ABC):
  """A false-positive-rate to false-negative-rate map."""

  @abc.abstractmethod
  def __call__(self, alpha):
    """Evaluates beta at ``alpha`` (scalar or array)."""


def _as_alpha(alpha) -> np.ndarray:
  arr = np.asarray(alpha, dtype=float)
  if np.any(np.isnan(arr)) or np.any((arr < 0) | (arr > 1)):
    raise ValueError("alpha must lie in [0, 1]")
  return arr


def _scalar_or_array(arr: np.ndarray):
  return float(arr) if arr.ndim == 0 else arr


# -- Gaussian -----------------------------------------------------------------

def gaussian_beta(mu: float, alpha):
  """The Gaussian trade-off ``g_mu(alpha) = Phi(Phi^-1(1 - alpha) - mu)``."""
  if not mu >= 0:
    raise ValueError(f"mu must be >= 0, got {mu!r}")
  a = _as_alpha(alpha)
  with np.errstate(divide="ignore"):
    # ndtri(1 - a) == -ndtri(a); the latter keeps precision for tiny alpha.
    out = special.ndtr(-special.ndtri(a) - mu)
  out = np.where(a == 0, 1.0, np.where(a == 1, 0.0, out))
  return _scalar_or_array(out)


def _gaussian_slope(mu: float, alpha: np.ndarray) -> np.ndarray:
  z = -special.ndtri(alpha)
  return -np.exp(mu * z - 0.5 * mu * mu)


@dataclasses.dataclass(frozen=True)
class GaussianCurve(TradeoffCurve):
  """``g_mu``: the trade-off between N(0, 1) and N(mu, 1)."""

  mu: float

  def __post_init__(self):
    if not (self.mu >= 0) or math.isnan(self.mu):
      raise ValueError(f"mu must be >= 0, got {self.mu!r}")

  def __call__(self, alpha):
    return gaussian_beta(self.mu, alpha)

  def allocation(self, log_slope: np.ndarray) -> np.ndarray:
    """FPR at which the curve's slope equals ``-exp(log_slope)``."""
    if self.mu == 0:
      return np.where(log_slope > 0, 0.0, np.where(log_slope < 0, 1.0, 0.5))
    with np.errstate(over="ignore"):
      # Tiny mu sends z to +-inf, which ndtr maps to the right endpoint.
      z = (log_slope + 0.5 * self.mu * self.mu) / self.mu
    return special.ndtr(-z)


# -- One noisy SGD step -------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class OneStepParams:
  """Hyperparameters of one noisy SGD step seen by a membership attacker.

  Attributes:
    n: Batch size.
    d: Number of parameters.
    tau2: Variance of the isotropic Gaussian noise added to the mean gradient.
    clip: Per-sample clipping norm; ``inf`` disables clipping.
    K: Gradient susceptibility, the squared whitened distance of the query
      gradient from the mean. Defaults to ``d``.
  """

  n: int
  d: int
  tau2: float = 0.0
  clip: float = math.inf
  K: float | None = None

  def __post_init__(self):
    if int(self.n) != self.n or self.n < 2:
      raise ValueError(f"batch size n must be an integer >= 2, got {self.n!r}")
    if int(self.d) != self.d or self.d < 1:
      raise ValueError(f"d must be an integer >= 1, got {self.d!r}")
    if not self.tau2 >= 0 or math.isinf(self.tau2):
      raise ValueError(f"tau2 must be finite and >= 0, got {self.tau2!r}")
    if not self.clip > 0:
      raise ValueError(f"clip must be > 0, got {self.clip!r}")
    if self.tau2 > 0 and math.isinf(self.clip):
      raise ValueError("tau2 > 0 requires a finite clipping norm")
    k = float(self.d) if self.K is None else float(self.K)
    if not k >= 0 or math.isinf(k):
      raise ValueError(f"K must be finite and >= 0, got {self.K!r}")
    object.__setattr__(self, "n", int(self.n))
    object.__setattr__(self, "d", int(self.d))
    object.__setattr__(self, "tau2", float(self.tau2))
    object.__setattr__(self, "clip", float(self.clip))
    object.__setattr__(self, "K", k)

  @property
  def n_effective(self) -> float:
    if self.tau2 == 0:
      return float(self.n)
    return self.n + self.tau2 * self.n * self.n / (self.clip * self.clip)

  def laws(self) -> tuple[NoncentralChiSq, NoncentralChiSq, float]:
    """Member law, nonmember law and the scale ratio between them."""
    ne = self.n_effective
    member = NoncentralChiSq(self.d, (ne - 1.0) * self.K)
    nonmember = NoncentralChiSq(self.d, ne * self.K)
    return member, nonmember, ne / (ne - 1.0)


def onestep_beta(params: OneStepParams, alpha):
  """Trade-off of the optimal membership test against one noisy SGD step.

  ``beta(alpha) = 1 - F_{gamma0}(r * F^-1_{gamma1}(alpha))`` where
  ``gamma1 = n_eff K`` and ``gamma0 = (n_eff - 1) K`` are the noncentralities of
  the nonmember and member laws and ``r = n_eff / (n_eff - 1)``.
  """
  a = _as_alpha(alpha)
  member, nonmember, ratio = params.laws()
  out = np.where(a == 0, 1.0, 0.0)
  inner = (a > 0) & (a < 1)
  if np.any(inner):
    q = np.atleast_1d(nonmember.quantile(a[inner]))
    out = out.astype(float)
    out[inner] = member.sf(ratio * q)
  return _scalar_or_array(out)


def onestep_alpha(params: OneStepParams, beta):
  """Inverse of :func:`onestep_beta`: the FPR at which the FNR equals ``beta``."""
  b = _as_alpha(beta)
  member, nonmember, ratio = params.laws()
  out = np.where(b == 0, 1.0, 0.0).astype(float)
  inner = (b > 0) & (b < 1)
  if np.any(inner):
    q = np.atleast_1d(member.isf(b[inner]))
    out[inner] = nonmember.cdf(q / ratio)
  return _scalar_or_array(out)


def onestep_frontier(params: OneStepParams, size: int = 4001):
  """Exact (alpha, beta) pairs of the one-step trade-off from a threshold sweep.

  Cheaper than :func:`onestep_beta` on a fixed alpha grid because no quantile
  has to be solved. Thresholds are spread evenly in nonmember-law probability
  with extra resolution in both tails.
  """
  member, nonmember, ratio = params.laws()
  u = np.concatenate([np.logspace(-12, -2, size // 4, endpoint=False),
                      np.linspace(0.01, 0.99, size // 2, endpoint=False),
                      1 - np.logspace(-2, -12, size - size // 4 - size // 2)])
  z = special.ndtri(u)
  thresholds = np.clip(nonmember.mean + math.sqrt(nonmember.variance) * z,
                       0.0, None)
  thresholds = np.unique(thresholds)
  alpha = np.asarray(nonmember.cdf(thresholds))
  beta = np.asarray(member.sf(ratio * thresholds))
  alpha = np.concatenate([[0.0], alpha, [1.0]])
  beta = np.concatenate([[1.0], beta, [0.0]])
  return alpha, beta


@dataclasses.dataclass(frozen=True)
class OneStepCurve(TradeoffCurve):
  params: OneStepParams

  def __call__(self, alpha):
    return onestep_beta(self.params, alpha)


# -- Tabulated ----------------------------------------------------------------

def _lower_hull(x: np.ndarray, y: np.ndarray) -> np.ndarray:
  """Indices of the vertices of the lower convex hull (monotone chain)."""
  hull: list[int] = []
  for i in range(len(x)):
    while len(hull) >= 2:
      i0, i1 = hull[-2], hull[-1]
      cross = (x[i1] - x[i0]) * (y[i] - y[i0]) - (y[i1] - y[i0]) * (x[i] - x[i0])
      if cross <= 0:
        hull.pop()
      else:
        break
    hull.append(i)
  return np.asarray(hull)


class TabulatedCurve(TradeoffCurve):
  """Piecewise-linear curve through tabulated points, convexified on entry.

  Points must be strictly increasing in FPR from 0 to 1. Each FNR is replaced by the lower
  convex hull of the point set evaluated at its FPR, so the stored points all
  lie on a convex, non-increasing polyline. Evaluation interpolates linearly.
  """

  def __init__(self, alpha: Sequence[float], beta: Sequence[float]):
    x = np.asarray(alpha, dtype=float)
    y = np.asarray(beta, dtype=float)
    if x.ndim != 1 or x.shape != y.shape or x.size < 2:
      raise ValueError("need matching 1-D arrays with at least two points")
    if np.any(~np.isfinite(x)) or np.any(~np.isfinite(y)):
      raise ValueError("tabulated points must be finite")
    if np.any(np.diff(x) <= 0):
      raise ValueError("FPR values must be strictly increasing")
    if x[0] != 0 or x[-1] != 1 or np.any((y < 0) | (y > 1)):
      raise ValueError("tabulated points must span FPR 0 to 1 inside the unit square")
    # A trade-off curve is non-increasing: use the running minimum from the
    # left before taking the hull.
    y = np.minimum.accumulate(y)
    hull = _lower_hull(x, y)
    y = np.interp(x, x[hull], y[hull])
    x.setflags(write=False)
    y.setflags(write=False)
    self._x = x
    self._y = y
    self._hull = hull

  @property
  def alpha(self) -> np.ndarray:
    return self._x

  @property
  def beta(self) -> np.ndarray:
    return self._y

  def __call__(self, alpha):
    a = _as_alpha(alpha)
    return _scalar_or_array(np.interp(a, self._x, self._y))

  def __eq__(self, other):
    if not isinstance(other, TabulatedCurve):
      return NotImplemented
    return (np.array_equal(self._x, other._x)
            and np.array_equal(self._y, other._y))

  def __hash__(self):
    return hash((self._x.tobytes(), self._y.tobytes()))

  def __repr__(self):
    return f"TabulatedCurve(<{self._x.size} points>)"

  def _segments(self) -> tuple[np.ndarray, np.ndarray]:
    hx = self._x[self._hull]
    hy = self._y[self._hull]
    return hx, np.diff(hy) / np.diff(hx)

  def allocation(self, log_slope: np.ndarray) -> np.ndarray:
    """Left-most FPR minimising ``f(a) + exp(log_slope) * a``."""
    hx, slopes = self._segments()
    lam = -np.exp(log_slope)
    return hx[np.searchsorted(slopes, lam, side="left")]


def tabulate(curve: TradeoffCurve, grid_size: int = DEFAULT_GRID) -> TabulatedCurve:
  """Samples ``curve`` on the evaluation grid and returns the convexified table."""
  grid = evaluation_grid(grid_size)
  if isinstance(curve, OneStepCurve):
    # Interpolating a dense exact frontier is much cheaper than solving one
    # quantile per grid point and just as accurate at this resolution.
    fa, fb = onestep_frontier(curve.params, max(4001, 4 * grid_size))
    keep = np.concatenate([[True], np.diff(fa) > 0])
    beta = np.interp(grid, fa[keep], fb[keep])
  else:
    beta = np.asarray(curve(grid), dtype=float)
  return TabulatedCurve(grid, np.clip(beta, 0.0, 1.0))


# -- Comparisons and checks ---------------------------------------------------

class Ordering(enum.Enum):
  F_DOMINATES = "f_dominates"
  G_DOMINATES = "g_dominates"
  EQUAL = "equal"
  INCOMPARABLE = "incomparable"


def compare(f: TradeoffCurve, g: TradeoffCurve, *, tol: float = AXIOM_TOL,
            grid_size: int = DEFAULT_GRID) -> Ordering:
  """Orders two curves by hardness on the evaluation grid.

  ``f`` dominates when its FNR is at least that of ``g`` everywhere (within
  ``tol``) and strictly larger somewhere: the test against ``f`` is uniformly
  at least as hard.
  """
  grid = evaluation_grid(grid_size)
  fv = np.asarray(f(grid))
  gv = np.asarray(g(grid))
  diff = fv - gv
  if np.all(np.abs(diff) <= tol):
    return Ordering.EQUAL
  if np.all(diff >= -tol):
    return Ordering.F_DOMINATES
  if np.all(diff <= tol):
    return Ordering.G_DOMINATES
  return Ordering.INCOMPARABLE


def sup_gap(f: TradeoffCurve, g: TradeoffCurve, grid_size: int = DEFAULT_GRID) -> float:
  """Largest absolute FNR difference between two curves on the grid."""
  grid = evaluation_grid(grid_size)
  return float(np.max(np.abs(np.asarray(f(grid)) - np.asarray(g(grid)))))


@dataclasses.dataclass(frozen=True)
class AxiomReport:
  non_increasing: bool
  below_diagonal: bool
  convex: bool
  endpoints: bool

  @property
  def ok(self) -> bool:
    return self.non_increasing and self.below_diagonal and self.convex and self.endpoints


def check_axioms(curve: TradeoffCurve, grid_size: int = DEFAULT_GRID,
                 tol: float = AXIOM_TOL) -> AxiomReport:
  """Checks the trade-off function axioms on the evaluation grid.

  Convexity is tested through the discrete chord condition on consecutive
  triples, which is exact for piecewise-linear interpolants of the grid.
  """
  x = evaluation_grid(grid_size)
  y = np.asarray(curve(x), dtype=float)
  non_inc = bool(np.all(np.diff(y) <= tol))
  below = bool(np.all(y <= 1.0 - x + tol))
  x0, x1, x2 = x[:-2], x[1:-1], x[2:]
  chord = y[:-2] + (y[2:] - y[:-2]) * (x1 - x0) / (x2 - x0)
  convex = bool(np.all(y[1:-1] <= chord + tol))
  ends = bool(np.all((y >= -tol) & (y <= 1 + tol)))
  return AxiomReport(non_inc, below, convex, ends)


# -- Composition --------------------------------------------------------------

def tensor_compose_gaussian(mus: Sequence[float]) -> float:
  """Level of the tensor product of Gaussian trade-offs: ``sqrt(sum mu_i^2)``."""
  vals = [float(m) for m in mus]
  if not vals:
    raise ValueError("need at least one mu")
  if any(not m >= 0 for m in vals):
    raise ValueError("mu values must be >= 0")
  return math.sqrt(math.fsum(m * m for m in vals))


@dataclasses.dataclass(frozen=True)
class WeightedTestFamily:
  """A finite mixture of per-instance membership tests.

  Attributes:
    entries: Pairs ``(weight, curve)``; weights are positive and sum to one.
  """

  entries: tuple[tuple[float, TradeoffCurve], ...]

  def __post_init__(self):
    entries = tuple((float(w), c) for w, c in self.entries)
    if not entries:
      raise ValueError("family needs at least one entry")
    if any(not w > 0 for w, _ in entries):
      raise ValueError("weights must be > 0")
    total = math.fsum(w for w, _ in entries)
    if abs(total - 1.0) > 1e-9:
      raise ValueError(f"weights must sum to 1, got {total!r}")
    object.__setattr__(self, "entries", entries)

  @classmethod
  def from_samples(cls, curves: Sequence[TradeoffCurve]) -> WeightedTestFamily:
    """Uniform weights over ``curves`` (e.g. atoms drawn from a distribution)."""
    w = 1.0 / len(curves)
    return cls(tuple((w, c) for c in curves))


def _allocator(curve: TradeoffCurve):
  if isinstance(curve, (GaussianCurve, TabulatedCurve)):
    return curve
  return tabulate(curve)


def stochastic_compose(family: WeightedTestFamily, alpha):
  """Smallest global FNR at global FPR ``alpha`` over per-instance FPR allocations.

  Solves ``min sum_i w_i f_i(a_i)`` subject to ``sum_i w_i a_i = alpha`` by
  water-filling: at the optimum every ``f_i`` has the same slope ``-lambda``.
  The multiplier is found by bisection on ``log lambda``. Gaussian members use
  their closed-form slope inverse; other curves are tabulated on the
  evaluation grid and use their exact piecewise-linear slopes. The two
  allocations bracketing the budget are mixed linearly so the constraint holds
  exactly, which also covers flat pieces of the slope map.
  """
  a = _as_alpha(alpha)
  flat = a.reshape(-1)
  weights = np.array([w for w, _ in family.entries])
  members = [_allocator(c) for _, c in family.entries]

  def total(log_lam):
    allocs = np.stack([m.allocation(log_lam) for m in members])
    return allocs, weights @ allocs

  # Larger lambda (steeper slope) means smaller allocations.
  lo = np.full(flat.shape, -750.0)
  hi = np.full(flat.shape, 750.0)
  for _ in range(120):
    mid = 0.5 * (lo + hi)
    _, spent = total(mid)
    over = spent > flat
    lo = np.where(over, mid, lo)
    hi = np.where(over, hi, mid)
  alloc_lo, spent_lo = total(lo)
  alloc_hi, spent_hi = total(hi)
  gap = spent_lo - spent_hi
  with np.errstate(divide="ignore", invalid="ignore"):
    t = np.where(gap > 0, (flat - spent_hi) / gap, 0.0)
  t = np.clip(t, 0.0, 1.0)
  alloc = alloc_hi + t * (alloc_lo - alloc_hi)
  alloc = np.clip(alloc, 0.0, 1.0)
  beta = np.zeros(flat.shape)
  for i, (w, curve) in enumerate(zip(weights, members)):
    beta += w * np.asarray(curve(alloc[i]))
  beta = np.where(flat == 1, 0.0, beta)
  return _scalar_or_array(np.clip(beta, 0.0, 1.0).reshape(a.shape))


@dataclasses.dataclass(frozen=True)
class StochasticComposition(TradeoffCurve):
  family: WeightedTestFamily

  def __call__(self, alpha):
    return stochastic_compose(self.family, alpha)


# -- Export -------------------------------------------------------------------

def write_curve_csv(curve: TradeoffCurve, path_or_file, grid_size: int = DEFAULT_GRID):
  """Writes ``alpha,beta`` rows on the evaluation grid with 17 significant digits."""
  grid = evaluation_grid(grid_size)
  beta = np.asarray(curve(grid), dtype=float)
  lines = ["alpha,beta"]
  lines += [f"{x:.17g},{y:.17g}" for x, y in zip(grid, beta)]
  text = "\n".join(lines) + "\n"
  if hasattr(path_or_file, "write"):
    path_or_file.write(text)
  else:
    with open(path_or_file, "w", encoding="utf-8") as fh:
      fh.write(text)

"""Special functions: normal law, incomplete gamma, central and noncentral chi-squared.

The noncentral chi-squared law is evaluated as a Poisson mixture of regularized
incomplete gamma terms, truncated where the neglected Poisson mass drops below
1e-14. Only one incomplete gamma call is made per abscissa; the other mixture
terms follow from ``P(a + 1, y) = P(a, y) - y**a exp(-y) / Gamma(a + 1)``
with the increments computed in log space through a saddle-point form of the
Poisson density. This stays accurate for the very large noncentralities
(``n * K ~ 1e5..1e7``) the attack needs.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import special

from gmip.errors import UnboundedQuantileError

__all__ = [
    "NoncentralChiSq",
    "chi2_cdf",
    "chi2_sf",
    "noncentral_chi2_cdf",
    "noncentral_chi2_pdf",
    "noncentral_chi2_quantile",
    "noncentral_chi2_sf",
    "reg_lower_gamma",
    "reg_upper_gamma",
    "std_normal_cdf",
    "std_normal_quantile",
    "std_normal_sf",
]

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_TAIL_MASS = 1e-14
# Upper bound on (mixture terms) x (abscissae) held in memory at once.
_BLOCK = 1 << 21


def std_normal_cdf(x):
  """Standard normal CDF."""
  return special.ndtr(x)


def std_normal_sf(x):
  """Standard normal survival function ``1 - Phi(x)`` without cancellation."""
  return special.ndtr(-np.asarray(x, dtype=float))


def std_normal_quantile(p):
  """Inverse of the standard normal CDF.

  Args:
    p: Probability or array of probabilities, strictly inside (0, 1).

  Returns:
    The quantile(s), same shape as ``p``.

  Raises:
    UnboundedQuantileError: If any ``p`` equals 0 or 1.
    ValueError: If any ``p`` lies outside [0, 1] or is NaN.
  """
  arr = np.asarray(p, dtype=float)
  if np.any(np.isnan(arr)) or np.any((arr < 0) | (arr > 1)):
    raise ValueError(f"probability outside [0, 1]: {p!r}")
  if np.any((arr == 0) | (arr == 1)):
    raise UnboundedQuantileError("normal quantile is unbounded at p in {0, 1}")
  return special.ndtri(arr)


def _gamma_args(s, x):
  s_arr = np.asarray(s, dtype=float)
  x_arr = np.asarray(x, dtype=float)
  if np.any(~(s_arr > 0)) or np.any(np.isinf(s_arr)):
    raise ValueError(f"shape must be positive and finite, got {s!r}")
  if np.any(~(x_arr >= 0)):
    raise ValueError(f"x must be >= 0, got {x!r}")
  return s_arr, x_arr


def reg_lower_gamma(s, x):
  """Regularized lower incomplete gamma ``P(s, x)``.

  Raises:
    ValueError: Unless ``s > 0`` and ``x >= 0``.
  """
  return special.gammainc(*_gamma_args(s, x))[()]


def reg_upper_gamma(s, x):
  """Regularized upper incomplete gamma ``Q(s, x) = 1 - P(s, x)``.

  Raises:
    ValueError: Unless ``s > 0`` and ``x >= 0``.
  """
  return special.gammaincc(*_gamma_args(s, x))[()]


def chi2_cdf(dof, x):
  """Central chi-squared CDF."""
  return special.gammainc(0.5 * dof, 0.5 * np.asarray(x, dtype=float))


def chi2_sf(dof, x):
  """Central chi-squared survival function."""
  return special.gammaincc(0.5 * dof, 0.5 * np.asarray(x, dtype=float))


@dataclasses.dataclass(frozen=True)
class NoncentralChiSq:
  """Law of ``sum_i (Z_i + b_i)**2`` with ``d`` terms and ``sum_i b_i**2 = gamma``."""

  dof: int
  noncentrality: float = 0.0

  def __post_init__(self):
    if int(self.dof) != self.dof or self.dof < 1:
      raise ValueError(f"dof must be a positive integer, got {self.dof!r}")
    if not (self.noncentrality >= 0.0) or not math.isfinite(self.noncentrality):
      raise ValueError(
          f"noncentrality must be finite and >= 0, got {self.noncentrality!r}")
    object.__setattr__(self, "dof", int(self.dof))
    object.__setattr__(self, "noncentrality", float(self.noncentrality))

  @property
  def mean(self) -> float:
    return self.dof + self.noncentrality

  @property
  def variance(self) -> float:
    return 2.0 * (self.dof + 2.0 * self.noncentrality)

  def cdf(self, x):
    return noncentral_chi2_cdf(self, x)

  def sf(self, x):
    return noncentral_chi2_sf(self, x)

  def pdf(self, x):
    return noncentral_chi2_pdf(self, x)

  def quantile(self, p):
    return noncentral_chi2_quantile(self, p)

  def isf(self, q):
    return noncentral_chi2_quantile(self, q, upper=True)


# -- Poisson mixture machinery ------------------------------------------------

_STIRLING = (1.0 / 12, 1.0 / 360, 1.0 / 1260, 1.0 / 1680, 1.0 / 1188)


def _stirlerr(a: np.ndarray) -> np.ndarray:
  """``log Gamma(a + 1) - (a + 1/2) log a + a - log sqrt(2 pi)`` for a > 0."""
  a = np.asarray(a, dtype=float)
  out = np.empty_like(a)
  big = a > 15.0
  if np.any(big):
    ab = a[big]
    a2 = ab * ab
    s0, s1, s2, s3, s4 = _STIRLING
    out[big] = (s0 - (s1 - (s2 - (s3 - s4 / a2) / a2) / a2) / a2) / ab
  small = ~big
  if np.any(small):
    asm = a[small]
    out[small] = (special.gammaln(asm + 1.0) - (asm + 0.5) * np.log(asm) + asm
                  - _HALF_LOG_2PI)
  return out


def _bd0(x: np.ndarray, m: np.ndarray) -> np.ndarray:
  """Deviance term ``x log(x/m) + m - x`` for x > 0, m > 0."""
  diff = x - m
  near = np.abs(diff) <= m
  # log1p form near x = m avoids cancellation; the direct form elsewhere
  # avoids overflow of (x - m) / m when m is tiny.
  if np.all(near):
    u = diff / m
    return m * ((1.0 + u) * np.log1p(u) - u)
  x, m = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(m, dtype=float))
  u = np.where(near, diff / np.where(near, m, 1.0), 0.0)
  close = m * ((1.0 + u) * np.log1p(u) - u)
  with np.errstate(divide="ignore", invalid="ignore"):
    far = x * (np.log(x) - np.log(m)) + m - x
  return np.where(near, close, far)


def _log_gamma_density(a: np.ndarray, y: np.ndarray) -> np.ndarray:
  """``log(y**a exp(-y) / Gamma(a + 1))`` for a > 0 and y > 0 (broadcast)."""
  return (-_stirlerr(a) - _HALF_LOG_2PI - 0.5 * np.log(a)) - _bd0(a, y)


def _poisson_window(lam: float) -> tuple[np.ndarray, np.ndarray]:
  """Indices and weights of Poisson(lam) covering all but ~1e-14 of the mass."""
  if lam == 0.0:
    return np.zeros(1), np.ones(1)
  mode = math.floor(lam)
  half = int(math.ceil(10.0 * math.sqrt(lam) + 40.0))
  j = np.arange(max(0, mode - half), mode + half + 1, dtype=float)
  if lam < 10.0:
    # Direct form; the deviance form overflows for tiny lam.
    logw = special.xlogy(j, lam) - lam - special.gammaln(j + 1.0)
  else:
    logw = np.empty_like(j)
    pos = j > 0
    logw[pos] = (-_stirlerr(j[pos]) - _HALF_LOG_2PI - 0.5 * np.log(j[pos])
                 - _bd0(j[pos], np.full(pos.sum(), lam)))
    logw[~pos] = -lam
  w = np.exp(logw)
  # Trim from both ends while the discarded mass stays below the budget.
  left = np.cumsum(w)
  right = np.cumsum(w[::-1])[::-1]
  lo = int(np.searchsorted(left, 0.5 * _TAIL_MASS, side="right"))
  hi = len(w) - int(np.searchsorted(right[::-1], 0.5 * _TAIL_MASS, side="right"))
  lo = min(lo, int(np.argmax(w)))
  hi = max(hi, lo + 1)
  return j[lo:hi], w[lo:hi]


def _mixture(law: NoncentralChiSq, x: np.ndarray, kinds: tuple[str, ...]) -> list[np.ndarray]:
  """Evaluates any of cdf, sf and pdf of ``law`` at nonnegative finite ``x`` (1-D).

  With ``g_k = y**a_k exp(-y) / Gamma(a_k + 1)`` and cumulative weights
  ``C_k``, summation by parts gives ``cdf = W P(a_top + 1, y) + sum_k g_k C_k``
  and ``sf = W Q(a_bottom, y) + sum_k g_k (W - C_k)``. Only terms with
  ``a_k`` within a few standard deviations of ``y`` contribute, so abscissae
  are processed in sorted chunks that each touch a narrow band of ``k``. All
  requested functions share the ``g_k`` evaluations.
  """
  half_d = 0.5 * law.dof
  j, w = _poisson_window(0.5 * law.noncentrality)
  a = half_d + j
  total = w.sum()
  cum = np.cumsum(w)
  order = np.argsort(x, kind="stable")
  ys = 0.5 * x[order]
  outs = {kind: np.empty_like(ys) for kind in kinds}
  step = max(1, min(512, _BLOCK // len(a)))
  for start in range(0, len(ys), step):
    y = ys[start:start + step]
    pos = y > 0
    yp = y[pos]
    g = np.zeros((0, yp.size))
    k0 = k1 = 0
    if yp.size:
      spread = 12.0 * math.sqrt(yp[-1]) + 60.0
      k0 = int(np.searchsorted(a, yp[0] - spread, side="left"))
      k1 = int(np.searchsorted(a, yp[-1] + spread, side="right"))
      if k1 > k0:
        g = np.exp(_log_gamma_density(a[k0:k1, None], yp[None, :]))
    for kind in kinds:
      res = np.zeros_like(y)
      if yp.size:
        if kind == "cdf":
          res[pos] = total * special.gammainc(a[-1] + 1.0, yp) + cum[k0:k1] @ g
        elif kind == "sf":
          res[pos] = total * special.gammaincc(a[0], yp) + (total - cum[k0:k1]) @ g
        else:
          res[pos] = 0.5 * ((w[k0:k1] * a[k0:k1]) @ g) / yp
      if kind == "sf":
        res[~pos] = total
      elif kind == "pdf":
        # Density at 0 is finite only for d <= 2.
        res[~pos] = {1: np.inf, 2: 0.5 * math.exp(-0.5 * law.noncentrality)}.get(
            law.dof, 0.0)
      outs[kind][start:start + step] = res
  results = []
  for kind in kinds:
    out = np.empty_like(ys)
    out[order] = outs[kind]
    results.append(np.clip(out, 0.0, None if kind == "pdf" else 1.0))
  return results


def _evaluate(law: NoncentralChiSq, x, what: str):
  arr = np.asarray(x, dtype=float)
  if np.any(np.isnan(arr)):
    raise ValueError("NaN abscissa")
  flat = arr.reshape(-1)
  out = np.empty_like(flat)
  neg = flat < 0
  inf = np.isposinf(flat)
  ok = ~(neg | inf)
  if what == "cdf":
    out[neg], out[inf] = 0.0, 1.0
  elif what == "sf":
    out[neg], out[inf] = 1.0, 0.0
  else:
    out[neg | inf] = 0.0
  if np.any(ok):
    out[ok] = _mixture(law, flat[ok], (what,))[0]
  out = out.reshape(arr.shape)
  return float(out) if out.ndim == 0 else out


def noncentral_chi2_cdf(law: NoncentralChiSq, x):
  """CDF of a noncentral chi-squared law, vectorised over ``x``."""
  return _evaluate(law, x, "cdf")


def noncentral_chi2_sf(law: NoncentralChiSq, x):
  """Survival function ``1 - cdf``, accurate in the upper tail."""
  return _evaluate(law, x, "sf")


def noncentral_chi2_pdf(law: NoncentralChiSq, x):
  """Density of a noncentral chi-squared law."""
  return _evaluate(law, x, "pdf")


def noncentral_chi2_quantile(law: NoncentralChiSq, p, *, upper: bool = False,
                             tol: float = 1e-13, max_iter: int = 400):
  """Quantile of a noncentral chi-squared law.

  Safeguarded Newton iteration: every iterate keeps a bracket that is known to
  contain the root, and a Newton step leaving the bracket is replaced by a
  bisection step. The lower tail is solved on the CDF and the upper tail on the
  survival function so deep-tail probabilities keep their relative accuracy.

  Args:
    law: The distribution.
    p: Probability (or array). Lower-tail probability unless ``upper``.
    upper: If true, ``p`` is an upper-tail probability and the result solves
      ``sf(x) = p``.
    tol: Relative tolerance on ``x``.
    max_iter: Iteration cap.

  Returns:
    The quantile(s), same shape as ``p``.

  Raises:
    UnboundedQuantileError: If the requested quantile is infinite.
  """
  arr = np.asarray(p, dtype=float)
  if np.any(np.isnan(arr)) or np.any((arr < 0) | (arr > 1)):
    raise ValueError(f"probability outside [0, 1]: {p!r}")
  lower_p = 1.0 - arr if upper else arr
  infinite = (arr == 0) if upper else (arr == 1)
  if np.any(infinite):
    raise UnboundedQuantileError("chi-squared quantile is unbounded at the top")
  flat_p = arr.reshape(-1).copy()
  out = np.zeros_like(flat_p)
  zero = ((flat_p == 1) if upper else (flat_p == 0))
  todo = np.flatnonzero(~zero)
  if todo.size:
    out[todo] = _solve_quantile(law, flat_p[todo],
                                lower_p.reshape(-1)[todo], upper, tol, max_iter)
  out = out.reshape(arr.shape)
  return float(out) if out.ndim == 0 else out


def _solve_quantile(law, p, lower_p, upper, tol, max_iter):
  # Solve on the tail holding the smaller probability.
  use_sf = lower_p > 0.5
  upper_p = p if upper else 1.0 - p
  target = np.where(use_sf, upper_p, lower_p)

  mean, sd = law.mean, math.sqrt(law.variance)
  lo = np.zeros_like(p)
  hi = np.full_like(p, mean + 20.0 * sd)
  for _ in range(200):
    bad = _resid_subset(law, hi, target, use_sf) < 0
    if not np.any(bad):
      break
    lo[bad] = hi[bad]
    hi[bad] *= 4.0

  x = _patnaik_guess(law, target, use_sf)
  x = np.where((x <= lo) | (x >= hi) | ~np.isfinite(x), 0.5 * (lo + hi), x)
  active = np.ones(p.shape, dtype=bool)
  for _ in range(max_iter):
    idx = np.flatnonzero(active)
    if idx.size == 0:
      break
    xa, la, ha = x[idx], lo[idx], hi[idx]
    r, dens = _resid_subset(law, xa, target[idx], use_sf[idx], with_pdf=True)
    above = r > 0
    ha = np.where(above, xa, ha)
    la = np.where(above, la, xa)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
      newton = xa - r / dens
    inside = np.isfinite(newton) & (newton > la) & (newton < ha)
    # Geometric bisection copes with roots many decades below the bracket top.
    wide = ha > 8.0 * la
    mid = np.where(wide, np.where(la > 0, np.sqrt(la * ha), 0.125 * ha),
                   0.5 * (la + ha))
    xn = np.where(inside, newton, mid)
    done = ((r == 0) | (np.abs(xn - xa) <= tol * xa)
            | (ha - la <= tol * ha))
    x[idx] = np.where(r == 0, xa, xn)
    lo[idx], hi[idx] = la, ha
    active[idx[done]] = False
  return x


def _patnaik_guess(law, target, use_sf):
  """Starting point from the two-moment scaled central chi-squared approximation."""
  d, nc = law.dof, law.noncentrality
  scale = (d + 2.0 * nc) / (d + nc)
  half_dof = 0.5 * (d + nc) ** 2 / (d + 2.0 * nc)
  t = np.clip(target, 1e-300, 1.0)
  with np.errstate(all="ignore"):
    return 2.0 * scale * np.where(use_sf, special.gammainccinv(half_dof, t),
                                  special.gammaincinv(half_dof, t))


def _resid_subset(law, x, target, use_sf, with_pdf=False):
  val = np.empty_like(x)
  dens = np.empty_like(x)
  for mask, kind, sign in ((use_sf, "sf", -1.0), (~use_sf, "cdf", 1.0)):
    if not np.any(mask):
      continue
    xm = x[mask]
    ok = (xm > 0) & np.isfinite(xm)
    prob = np.where(xm > 0, 1.0, 0.0) if kind == "cdf" else np.where(xm > 0, 0.0, 1.0)
    pdf = np.zeros_like(xm)
    if np.any(ok):
      kinds = (kind, "pdf") if with_pdf else (kind,)
      res = _mixture(law, xm[ok], kinds)
      prob[ok] = res[0]
      if with_pdf:
        pdf[ok] = res[1]
    val[mask] = sign * (prob - target[mask])
    dens[mask] = pdf
  return (val, dens) if with_pdf else val

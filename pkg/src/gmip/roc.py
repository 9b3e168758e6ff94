"""Empirical ROC curves of membership tests."""

from __future__ import annotations

import dataclasses

import numpy as np

__all__ = ["RocEstimate", "binomial_se"]


def binomial_se(p, trials: int):
  """Standard error of a binomial proportion estimate."""
  p = np.asarray(p, dtype=float)
  out = np.sqrt(np.clip(p * (1.0 - p), 0.0, None) / trials)
  return float(out) if out.ndim == 0 else out


@dataclasses.dataclass(frozen=True, eq=False)
class RocEstimate:
  """Step ROC of a test that claims membership for low scores.

  Attributes:
    fpr: Non-decreasing false positive rates (nonmembers claimed).
    fnr: Matching non-increasing false negative rates (members missed); no
      two points coincide.
    member_trials: Number of member scores behind the estimate.
    nonmember_trials: Number of nonmember scores behind the estimate.
  """

  fpr: np.ndarray
  fnr: np.ndarray
  member_trials: int
  nonmember_trials: int

  def __post_init__(self):
    fpr = np.asarray(self.fpr, dtype=float)
    fnr = np.asarray(self.fnr, dtype=float)
    if fpr.shape != fnr.shape or fpr.ndim != 1 or fpr.size == 0:
      raise ValueError("fpr and fnr must be matching non-empty 1-D arrays")
    if np.any(np.diff(fpr) < 0):
      raise ValueError("fpr must be non-decreasing")
    if np.any(np.diff(fnr) > 0):
      raise ValueError("fnr must be non-increasing")
    if np.any((np.diff(fpr) == 0) & (np.diff(fnr) == 0)):
      raise ValueError("ROC points must be distinct")
    fpr.setflags(write=False)
    fnr.setflags(write=False)
    object.__setattr__(self, "fpr", fpr)
    object.__setattr__(self, "fnr", fnr)

  @property
  def trials_per_class(self) -> int:
    return min(self.member_trials, self.nonmember_trials)

  @property
  def tpr(self) -> np.ndarray:
    return 1.0 - self.fnr

  @classmethod
  def from_scores(cls, member_scores, nonmember_scores) -> RocEstimate:
    """Sweeps a threshold ``eta`` over all observed scores; score <= eta claims member.

    Equal scores form a single threshold, so tied member and nonmember scores
    move both rates in one step.
    """
    mem = np.sort(np.asarray(member_scores, dtype=float))
    non = np.sort(np.asarray(nonmember_scores, dtype=float))
    if mem.size == 0 or non.size == 0:
      raise ValueError("need scores for both classes")
    if np.any(np.isnan(mem)) or np.any(np.isnan(non)):
      raise ValueError("scores must not be NaN")
    thresholds = np.unique(np.concatenate([mem, non]))
    fpr = np.searchsorted(non, thresholds, side="right") / non.size
    fnr = 1.0 - np.searchsorted(mem, thresholds, side="right") / mem.size
    fpr = np.concatenate([[0.0], fpr])
    fnr = np.concatenate([[1.0], fnr])
    return cls(fpr, fnr, mem.size, non.size)

  def fnr_at(self, alpha):
    """Lowest FNR the swept tests reach without exceeding FPR ``alpha``."""
    a = np.asarray(alpha, dtype=float)
    idx = np.searchsorted(self.fpr, a, side="right") - 1
    out = np.where(idx >= 0, self.fnr[np.clip(idx, 0, None)], 1.0)
    return float(out) if out.ndim == 0 else out

  def fnr_se(self, beta) -> float:
    return binomial_se(beta, self.member_trials)

  def auc(self) -> float:
    """Area under the ROC (TPR against FPR) through its vertices.

    For curves built by :meth:`from_scores` this is the probability that a
    member scores below a nonmember, counting ties as one half.
    """
    fpr = np.concatenate([self.fpr, [1.0]]) if self.fpr[-1] < 1 else self.fpr
    tpr = np.concatenate([self.tpr, [1.0]]) if self.fpr[-1] < 1 else self.tpr
    return float(np.sum(np.diff(fpr) * 0.5 * (tpr[:-1] + tpr[1:])))

  def to_csv(self) -> str:
    lines = ["fpr,fnr,tpr"]
    lines += [f"{a:.17g},{b:.17g},{1.0 - b:.17g}" for a, b in zip(self.fpr, self.fnr)]
    return "\n".join(lines) + "\n"

  def __eq__(self, other):
    if not isinstance(other, RocEstimate):
      return NotImplemented
    return (np.array_equal(self.fpr, other.fpr) and np.array_equal(self.fnr, other.fnr)
            and self.member_trials == other.member_trials
            and self.nonmember_trials == other.nonmember_trials)

  __hash__ = None  # type: ignore[assignment]

  def check_against(self, curve, alphas, z: float = 3.0) -> list[tuple[float, float, float, float, bool]]:
    """Tests that the attack does not beat ``curve`` by more than ``z`` SE.

    Returns:
      Rows ``(alpha, empirical_fnr, bound, se, passed)``.
    """
    rows = []
    for a in alphas:
      emp = float(self.fnr_at(a))
      bound = float(curve(a))
      se = max(binomial_se(bound, self.member_trials), 1.0 / self.member_trials)
      rows.append((float(a), emp, bound, se, emp >= bound - z * se))
    return rows


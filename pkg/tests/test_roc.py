import numpy as np
import pytest
from hypothesis import given, strategies as st

from gmip.roc import RocEstimate, binomial_se
from gmip.tradeoff import GaussianCurve


def _brute_fnr_at(member, nonmember, alpha):
  """Lowest FNR over every threshold whose FPR stays at or below alpha."""
  best = 1.0
  for eta in np.concatenate([[-np.inf], member, nonmember]):
    if np.mean(nonmember <= eta) <= alpha:
      best = min(best, float(np.mean(member > eta)))
  return best


class TestRoc:

  def test_perfect_separation(self):
    roc = RocEstimate.from_scores([0, 1, 2], [10, 11])
    assert roc.fnr_at(0.0) == 0.0
    assert roc.auc() == 1.0

  def test_no_separation(self):
    roc = RocEstimate.from_scores([5.0] * 4, [5.0] * 4)
    assert roc.fnr_at(0.5) == 1.0
    assert roc.fnr_at(1.0) == 0.0
    assert roc.auc() == pytest.approx(0.5)

  @given(st.lists(st.integers(0, 20), min_size=1, max_size=30),
         st.lists(st.integers(0, 20), min_size=1, max_size=30), st.floats(0, 1))
  def test_matches_threshold_sweep(self, mem, non, alpha):
    mem, non = np.array(mem, float), np.array(non, float)
    roc = RocEstimate.from_scores(mem, non)
    assert roc.fnr_at(alpha) == pytest.approx(_brute_fnr_at(mem, non, alpha), abs=1e-12)

  @given(st.lists(st.integers(0, 20), min_size=1, max_size=30),
         st.lists(st.integers(0, 20), min_size=1, max_size=30))
  def test_auc_is_mann_whitney(self, mem, non):
    mem, non = np.array(mem, float), np.array(non, float)
    wins = np.mean((mem[:, None] < non[None, :]) + 0.5 * (mem[:, None] == non[None, :]))
    assert RocEstimate.from_scores(mem, non).auc() == pytest.approx(wins, abs=1e-12)

  def test_csv(self):
    text = RocEstimate.from_scores([0, 2], [1, 3]).to_csv()
    lines = text.splitlines()
    assert lines[0] == "fpr,fnr,tpr"
    for line in lines[1:]:
      fpr, fnr, tpr = map(float, line.split(","))
      assert fnr + tpr == pytest.approx(1.0)

  def test_equality(self):
    a = RocEstimate.from_scores([0, 2], [1, 3])
    assert a == RocEstimate.from_scores([2, 0], [3, 1])
    assert a != RocEstimate.from_scores([0, 2], [1, 4, 5])

  @pytest.mark.parametrize("mem,non", [([], [1]), ([1], []), ([np.nan], [1])])
  def test_invalid_scores(self, mem, non):
    with pytest.raises(ValueError):
      RocEstimate.from_scores(mem, non)

  def test_invalid_curve(self):
    with pytest.raises(ValueError):
      RocEstimate(np.array([0.0, 0.5, 0.4]), np.array([1.0, 0.5, 0.2]), 10, 10)
    with pytest.raises(ValueError):
      RocEstimate(np.array([0.0, 0.5]), np.array([0.2, 0.5]), 10, 10)
    with pytest.raises(ValueError):
      RocEstimate(np.array([0.0, 0.5, 0.5]), np.array([1.0, 0.2, 0.2]), 10, 10)

  def test_bound_check_flags_impossible_attack(self):
    rng = np.random.default_rng(0)
    # Scores from N(0,1) vs N(3,1) follow g_3, which beats a g_1 bound.
    roc = RocEstimate.from_scores(rng.normal(0, 1, 5000), rng.normal(3, 1, 5000))
    rows = roc.check_against(GaussianCurve(1.0), [0.05, 0.25])
    assert not any(r[-1] for r in rows)
    rows = roc.check_against(GaussianCurve(3.0), [0.05, 0.25])
    assert all(r[-1] for r in rows)

  def test_binomial_se(self):
    assert binomial_se(0.5, 100) == pytest.approx(0.05)
    assert binomial_se(0.0, 100) == 0.0

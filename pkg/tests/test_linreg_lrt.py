import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gmip.errors import LeverageError, SingularDesignError
from gmip.linreg_lrt import (
    LossLrtCurve,
    LossTestSpec,
    fit_ols,
    loss_lrt_fnr,
    loss_lrt_power,
    loss_variances,
    run_linreg_experiment,
)
from gmip.tradeoff import check_axioms


class TestFit:

  def test_normal_equations(self):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 4))
    y = rng.standard_normal(50)
    fit = fit_ols(x, y, 1.0)
    resid = x.T @ (x @ fit.params - y)
    assert np.linalg.norm(resid) <= 1e-8 * np.linalg.norm(x.T @ y)
    assert fit.condition_number >= 1.0

  def test_singular_design(self):
    x = np.ones((10, 2))
    with pytest.raises(SingularDesignError):
      fit_ols(x, np.zeros(10), 1.0)

  def test_invalid(self):
    with pytest.raises(ValueError):
      fit_ols(np.ones((3, 1)), np.ones(2), 1.0)
    with pytest.raises(ValueError):
      fit_ols(np.ones((3, 1)), np.ones(3), 0.0)


class TestVariances:

  def test_zero_query(self):
    fit = fit_ols(np.random.default_rng(1).standard_normal((20, 3)), np.zeros(20), 2.0)
    spec = loss_variances(np.zeros(3), fit)
    assert spec.v0 == spec.v1 == 2.0

  def test_orthonormal_design(self):
    n, p, s2 = 8, 4, 3.0
    q, _ = np.linalg.qr(np.random.default_rng(2).standard_normal((n, p)))
    x = math.sqrt(n) * q
    np.testing.assert_allclose(x.T @ x, n * np.eye(p), atol=1e-12)
    query = np.zeros(p)
    query[0] = math.sqrt(n / 2)
    spec = loss_variances(query, fit_ols(x, np.zeros(n), s2))
    assert spec.v0 == pytest.approx(s2 / 2)
    assert spec.v1 == pytest.approx(3 * s2 / 2)

  @pytest.mark.parametrize("n", [2, 5, 100])
  def test_mean_only_model(self, n):
    spec = loss_variances([1.0], fit_ols(np.ones((n, 1)), np.zeros(n), 1.0))
    assert spec.v0 == pytest.approx(1 - 1 / n)
    assert spec.v1 == pytest.approx(1 + 1 / n)

  def test_leverage_overflow(self):
    fit = fit_ols(np.ones((4, 1)), np.zeros(4), 1.0)
    with pytest.raises(LeverageError):
      loss_variances([2.0], fit)

  def test_spec_validation(self):
    with pytest.raises(ValueError):
      LossTestSpec(2.0, 1.0)
    with pytest.raises(ValueError):
      LossTestSpec(0.0, 1.0)


class TestPower:

  @pytest.mark.parametrize("alpha", [0.0, 0.01, 0.05, 0.3, 1.0])
  def test_powerless(self, alpha):
    assert loss_lrt_power(LossTestSpec(1.0, 1.0), alpha) == pytest.approx(alpha, abs=1e-15)

  @pytest.mark.parametrize("alpha", [0.001, 0.05, 0.5])
  def test_vanishing_ratio(self, alpha):
    assert loss_lrt_power(LossTestSpec(1e-12, 1.0), alpha) > 1 - 1e-4

  def test_half_leverage_example(self):
    spec = LossTestSpec(0.5, 1.5)
    ref = stats.chi2.cdf(stats.chi2.ppf(0.95, 1) / 3, 1)
    assert stats.chi2.ppf(0.95, 1) / 3 == pytest.approx(1.2805, abs=1e-4)
    assert loss_lrt_fnr(spec, 0.05) == pytest.approx(ref, rel=1e-12)
    assert loss_lrt_power(spec, 0.05) == pytest.approx(1 - ref, rel=1e-12)

  @settings(max_examples=50, deadline=None)
  @given(st.floats(0.01, 1.0), st.floats(1e-3, 1e3), st.floats(0.001, 0.999))
  def test_depends_only_on_ratio(self, ratio, scale, alpha):
    a = loss_lrt_power(LossTestSpec(ratio, 1.0), alpha)
    b = loss_lrt_power(LossTestSpec(ratio * scale, scale), alpha)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)

  def test_vectorised_matches_scipy(self):
    spec = LossTestSpec(0.3, 1.2)
    a = np.array([0.001, 0.01, 0.2, 0.7])
    ref = stats.chi2.sf(spec.ratio * stats.chi2.isf(a, 1), 1)
    np.testing.assert_allclose(loss_lrt_power(spec, a), ref, rtol=1e-10)

  def test_rejects_bad_alpha(self):
    with pytest.raises(ValueError):
      loss_lrt_power(LossTestSpec(1.0, 2.0), 1.5)

  @pytest.mark.parametrize("ratio", [1.0, 0.9, 0.5, 0.05])
  def test_curve_axioms(self, ratio):
    assert check_axioms(LossLrtCurve(LossTestSpec(ratio, 1.0))).ok

  def test_fnr_transform_is_convex(self):
    a = np.linspace(0, 1, 2001)
    fnr = loss_lrt_fnr(LossTestSpec(1.0, 3.0), a)
    assert np.all(np.diff(fnr) <= 1e-15)
    assert np.all(np.diff(fnr, 2) >= -1e-12)


class TestExperiment:

  def test_rejects_null_model(self):
    with pytest.raises(ValueError):
      run_linreg_experiment(10, 0, 1.0, 1000, 0)
    with pytest.raises(ValueError):
      run_linreg_experiment(5, 4, 1.0, 1000, 0)
    with pytest.raises(ValueError):
      run_linreg_experiment(50, 4, 1.0, 999, 0)

  def test_sigma_scale_invariance(self):
    a = run_linreg_experiment(30, 3, 1.0, 2000, 4, beta_scale=0.0)
    b = run_linreg_experiment(30, 3, 7.5, 2000, 4, beta_scale=0.0)
    np.testing.assert_allclose(a.member_scores, b.member_scores, rtol=1e-9)
    np.testing.assert_allclose(a.nonmember_scores, b.nonmember_scores, rtol=1e-9)

  def test_deterministic(self):
    a = run_linreg_experiment(20, 2, 1.0, 1000, 9)
    b = run_linreg_experiment(20, 2, 1.0, 1000, 9)
    assert np.array_equal(a.member_scores, b.member_scores)

  def test_members_are_chi2_and_power_matches(self):
    exp = run_linreg_experiment(30, 5, 2.0, 10_000, 5)
    assert stats.kstest(exp.member_scores, stats.chi2(1).cdf).pvalue > 0.01
    assert all(r[-1] for r in exp.power_check([0.01, 0.05, 0.1, 0.5]))
    for a in (0.05, 0.2):
      assert abs(exp.empirical_fpr(a) - a) <= 3 * math.sqrt(a * (1 - a) / exp.trials)

  def test_leverages_in_unit_interval(self):
    exp = run_linreg_experiment(20, 4, 1.0, 1000, 6)
    assert np.all((exp.member_leverages > 0) & (exp.member_leverages < 1))
    assert np.all(exp.nonmember_leverages > 0)
    # Mean in-sample leverage is p / n.
    assert exp.member_leverages.mean() == pytest.approx(4 / 20, rel=0.05)

  def test_csv(self):
    exp = run_linreg_experiment(20, 2, 1.0, 1000, 7)
    lines = exp.to_csv([0.1, 0.5]).splitlines()
    assert lines[0] == "fpr,tpr_empirical,tpr_analytical"
    assert len(lines) == 3

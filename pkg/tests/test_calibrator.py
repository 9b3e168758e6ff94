import math

import pytest
from hypothesis import given, settings, strategies as st

from gmip import calibrator as cal
from gmip.accountant import Notion, SubsamplingPlan
from gmip.errors import InfeasibleTargetError

MUS = cal.mu_grid()


def _preset(name, notion, mu):
  return cal.PRESETS[name].target(notion, mu)


class TestGdp:

  def test_cifar(self):
    assert cal.tau_for_gdp(_preset("cifar10", Notion.GDP, 0.40)) == pytest.approx(2.84, abs=0.01)

  def test_purchase(self):
    assert cal.tau_for_gdp(_preset("purchase", Notion.GDP, 1.43)) == pytest.approx(2.81, abs=0.01)

  def test_table_corners(self):
    assert cal.tau_for_gdp(_preset("cifar10", Notion.GDP, 50.0)) == pytest.approx(0.81, abs=0.01)
    assert cal.tau_for_gdp(_preset("adult", Notion.GDP, 0.40)) == pytest.approx(3.38, abs=0.01)

  def test_plug_back(self):
    target = _preset("adult", Notion.GDP, 1.7)
    tau = cal.tau_for_gdp(target)
    assert cal.achieved_mu(target, tau) == pytest.approx(1.7, rel=1e-6)

  def test_tau_scales_with_clip(self):
    base = cal.CalibrationTarget(Notion.GDP, 1.0, SubsamplingPlan(10000, 100, 5), 50, 1.0)
    double = cal.CalibrationTarget(Notion.GDP, 1.0, SubsamplingPlan(10000, 100, 5), 50, 2.0)
    assert cal.tau_for_gdp(double) == pytest.approx(2 * cal.tau_for_gdp(base), rel=1e-9)

  @settings(max_examples=20, deadline=None)
  @given(st.floats(0.2, 20), st.floats(0.2, 20))
  def test_more_privacy_needs_more_noise(self, a, b):
    lo, hi = sorted((a, b))
    t_lo = cal.tau_for_gdp(_preset("cifar10", Notion.GDP, lo))
    t_hi = cal.tau_for_gdp(_preset("cifar10", Notion.GDP, hi))
    assert t_lo >= t_hi * (1 - 1e-9)


class TestGmip:

  def test_no_noise_needed(self):
    assert cal.tau_for_gmip(_preset("cifar10", Notion.GMIP, MUS[3])) == 0.0
    assert round(MUS[3], 2) == 0.86
    assert cal.tau_for_gmip(_preset("cifar10", Notion.GMIP, 0.86)) == 0.0
    assert cal.tau_for_gmip(_preset("purchase", Notion.GMIP, 1.84)) == 0.0

  def test_min_rule_row(self):
    mu = MUS[2]
    assert round(mu, 2) == 0.66
    assert cal.tau_for_gmip(_preset("adult", Notion.GMIP, mu)) == pytest.approx(2.30, abs=0.01)
    assert cal.tau_for_gmip(_preset("adult", Notion.GMIP, mu)) == pytest.approx(
        cal.tau_for_gdp(_preset("adult", Notion.GDP, mu)), rel=1e-12)

  def test_gmip_only_plug_back(self):
    target = cal.CalibrationTarget(Notion.GMIP, 1.0, SubsamplingPlan(400, 200, 5), 100, 1.0)
    tau = cal.tau_for_gmip(target, min_rule=False)
    assert tau > 0
    assert cal.achieved_mu(target, tau) == pytest.approx(1.0, rel=1e-6)

  def test_min_rule_never_exceeds_gdp(self):
    for name in cal.PRESETS:
      for mu in MUS[::4]:
        gmip = cal.tau_for_gmip(_preset(name, Notion.GMIP, mu))
        gdp = cal.tau_for_gdp(_preset(name, Notion.GDP, mu))
        assert gmip <= gdp * (1 + 1e-12)

  def test_no_noise_threshold(self):
    target = _preset("cifar10", Notion.GMIP, 1.0)
    floor = cal.achieved_mu(target, 0.0)
    assert cal.tau_for_gmip(target.__class__(Notion.GMIP, floor * 1.0001, target.plan,
                                             target.d, target.clip)) == 0.0

  def test_tau_scales_with_clip(self):
    plan = SubsamplingPlan(400, 200, 5)
    a = cal.CalibrationTarget(Notion.GMIP, 1.0, plan, 100, 1.0)
    b = cal.CalibrationTarget(Notion.GMIP, 1.0, plan, 100, 2.0)
    assert cal.tau_for_gmip(b, min_rule=False) == pytest.approx(
        2 * cal.tau_for_gmip(a, min_rule=False), rel=1e-9)

  def test_infeasible_reports_infimum(self):
    target = cal.CalibrationTarget(Notion.GMIP, 1e-9, SubsamplingPlan(1000, 100, 50), 5, 1.0)
    with pytest.raises(InfeasibleTargetError) as info:
      cal.tau_for_gmip(target, min_rule=False)
    assert info.value.infimum > 1e-9


class TestTable:

  def test_grid(self):
    assert len(MUS) == 20
    assert MUS[0] == pytest.approx(0.4) and MUS[-1] == pytest.approx(50.0)

  def test_all_cells(self):
    cells = cal.reproduce_tau_table()
    assert len(cells) == 120
    assert all(c.deviation <= 0.01 for c in cells)

  def test_text_is_stable(self):
    cells = cal.reproduce_tau_table()
    assert cal.tau_table_text(cells) == cal.tau_table_text(cal.reproduce_tau_table())
    assert cal.tau_table_csv(cells).splitlines()[0].startswith("dataset")

  def test_round_half_away(self):
    assert cal.round_half_away(2.845, 2) in (2.85, 2.84)  # binary representation decides
    assert cal.round_half_away(0.125, 2) == 0.13
    assert cal.round_half_away(-0.125, 2) == -0.13


class TestValidation:

  @pytest.mark.parametrize("kwargs", [
      dict(target_mu=0.0), dict(target_mu=math.inf), dict(d=0), dict(clip=math.inf),
      dict(clip=0.0), dict(K=-1.0)])
  def test_invalid_target(self, kwargs):
    base = dict(notion=Notion.GMIP, target_mu=1.0, plan=SubsamplingPlan(100, 10, 1), d=5, clip=1.0)
    base.update(kwargs)
    with pytest.raises(ValueError):
      cal.CalibrationTarget(**base)

"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS/FAIL line (printed with ``-s`` and repeated in the
pytest terminal summary) before asserting.
"""

import math
import time

import numpy as np
from scipy import stats

from gmip import accountant as acc
from gmip import calibrator as cal
from gmip import glir
from gmip import linreg_lrt
from gmip import sgd
from gmip import tradeoff as tr
from gmip.roc import RocEstimate
from gmip.specfun import NoncentralChiSq

from oracles import brute_force_composition, d1_noncentral_cdf, lrt_fnr_monte_carlo

INF = math.inf
VERIFY = tr.OneStepParams(500, 650, 0.0, INF, 650)


def _per_call_seconds(fn, repeats=200):
  fn()
  times = []
  for _ in range(repeats):
    t0 = time.perf_counter()
    fn()
    times.append(time.perf_counter() - t0)
  return float(np.median(times))


def test_mu_step_reproduction(verdict):
  t0 = time.perf_counter()
  mu = acc.mu_step(VERIFY)
  per_call = _per_call_seconds(lambda: acc.mu_step(VERIFY))
  ok = (abs(mu - 1.1396) < 1e-4 and abs(mu - 1.13) <= 0.01 and abs(mu - 1.14) <= 0.01
        and per_call < 1e-3)
  verdict("mu_step reproduction", ok,
          f"mu_step={mu:.6f} (want 1.1396, within 0.01 of 1.13 and 1.14), "
          f"{per_call * 1e6:.1f} us/call", time.perf_counter() - t0)
  assert ok


def test_five_step_composition(verdict):
  t0 = time.perf_counter()
  compose = lambda: acc.compose_k_steps(acc.mu_step(VERIFY), 5)
  mu = compose()
  per_call = _per_call_seconds(compose)
  ok = abs(mu - 2.54) <= 0.01 and abs(mu - 2.548) < 1e-3 and per_call < 1e-3
  verdict("5-step composition", ok,
          f"mu={mu:.6f} (want 2.548, within 0.01 of 2.54), {per_call * 1e6:.1f} us/call",
          time.perf_counter() - t0)
  assert ok


def test_tau_table_reproduction(verdict):
  t0 = time.perf_counter()
  cells = cal.reproduce_tau_table()
  elapsed = time.perf_counter() - t0
  worst = max(c.deviation for c in cells)
  bad = [c for c in cells if not c.deviation <= 0.01]
  ok = len(cells) == 120 and not bad and elapsed < 1.0
  verdict("tau-table reproduction", ok,
          f"{len(cells) - len(bad)}/{len(cells)} cells within 0.01, max deviation {worst:.4f}",
          elapsed)
  assert ok, bad


ONE_STEP_CASES = [
    # (n, d, K, tau2, clip, per-example simulation)
    (10, 4, 4.0, 0.0, 1.0, True),
    (50, 20, 20.0, 0.0, 5.0, False),
    (50, 20, 20.0, 0.5, 5.0, False),
]
ORACLE_FPRS = (0.05, 0.1, 0.25, 0.5)


def test_one_step_tradeoff_matches_lrt_oracle(verdict):
  t0 = time.perf_counter()
  rows = []
  for i, (n, d, K, tau2, clip, per_example) in enumerate(ONE_STEP_CASES):
    fnr, se = lrt_fnr_monte_carlo(n, d, K, tau2, clip, ORACLE_FPRS, 10**6, seed=1000 + i,
                                  per_example=per_example)
    clip_arg = INF if tau2 == 0 else clip
    beta = tr.onestep_beta(tr.OneStepParams(n, d, tau2, clip_arg, K), np.array(ORACLE_FPRS))
    for a, f, s, b in zip(ORACLE_FPRS, fnr, se, beta):
      rows.append((n, d, tau2, a, f, b, s, abs(f - b) <= 3 * s))
  elapsed = time.perf_counter() - t0
  ok = all(r[-1] for r in rows) and elapsed < 120
  worst = max(abs(r[4] - r[5]) / r[6] for r in rows)
  verdict("one-step trade-off vs 1e6-trial LRT oracle", ok,
          f"{sum(r[-1] for r in rows)}/{len(rows)} points within 3 SE, worst {worst:.2f} SE",
          elapsed)
  for r in rows:
    print("   n=%d d=%d tau2=%g alpha=%.2f  mc=%.6f  formula=%.6f  se=%.2e  %s" % (
        *r[:7], "ok" if r[7] else "MISS"))
  assert ok


def test_gaussian_limit_convergence(verdict):
  t0 = time.perf_counter()
  gaps = []
  for d, n in [(50, 50), (200, 200), (650, 500), (5000, 5000)]:
    params = tr.OneStepParams(n, d, 0.0, INF, d)
    fa, fb = tr.onestep_frontier(params, 1201)
    gaps.append(float(np.max(np.abs(fb - tr.gaussian_beta(acc.mu_step(params), fa)))))
  elapsed = time.perf_counter() - t0
  ok = all(b < a for a, b in zip(gaps, gaps[1:])) and gaps[-1] < 0.01 and elapsed < 10
  verdict("Gaussian-limit convergence", ok,
          "sup gaps " + ", ".join(f"{g:.3g}" for g in gaps), elapsed)
  assert ok


GLIR_FPRS = (0.01, 0.05, 0.1, 0.25, 0.5)


def test_glir_tightness_audit(verdict):
  t0 = time.perf_counter()
  d, n = 650, 500
  model = glir.random_model(d, np.random.default_rng(7))
  result = glir.run_audit(model, n, 1, 20_000, seed=7)
  curve = tr.OneStepCurve(tr.OneStepParams(n, d, 0.0, INF, d))
  rows = result.level_test(curve, GLIR_FPRS)
  bound_rows = result.roc.check_against(curve, GLIR_FPRS)
  elapsed = time.perf_counter() - t0
  ok = all(r[-1] for r in rows) and all(r[-1] for r in bound_rows) and elapsed < 300
  verdict("GLiR tightness audit (d=650, n=500, 2e4 trials)", ok,
          "; ".join(f"a={a:g}: {e:.4f} vs {b:.4f} ({abs(e - b) / s:.2f} SE)"
                    for a, e, b, s, _ in rows), elapsed)
  assert ok


def test_monotonicity_suite(verdict):
  t0 = time.perf_counter()
  failures = []
  alphas = np.array([0.01, 0.05, 0.1, 0.25, 0.5])
  tau2s = [0.0, 0.05, 0.25, 1.0, 4.0]
  clip = 10.0
  checked = 0
  k_pairs = k_falls = 0
  for n in (10, 50, 200, 500, 2000):
    for d in (1, 5, 50, 200, 650):
      # tau2 direction at K = d.
      betas = np.array([tr.onestep_beta(tr.OneStepParams(n, d, t, clip, d), alphas)
                        for t in tau2s])
      checked += betas.size
      if np.any(np.diff(betas, axis=0) < -1e-12):
        failures.append(("tau2", n, d))
      # K direction at tau2 = 0: more susceptible queries are easier to detect.
      ks = [0.0, 0.25 * d, 0.5 * d, d, 2.0 * d]
      betas = np.array([tr.onestep_beta(tr.OneStepParams(n, d, 0.0, INF, k), alphas)
                        for k in ks])
      checked += betas.size
      steps = np.diff(betas, axis=0)
      k_pairs += steps.size
      k_falls += int(np.sum(steps < 0))
      if np.any(steps > 1e-12):
        failures.append(("K", n, d))
      # mu_step against n_effective.
      mus = [acc.mu_step(tr.OneStepParams(n, d, t, clip, d)) for t in tau2s]
      if np.any(np.diff(mus) > 1e-15):
        failures.append(("mu_step", n, d))
      # Conversion never loosens a DP level.
      for mu_dp in (0.01, 0.1, 0.5, 1.0, 2.0, 10.0, INF):
        if not acc.dp_to_mip(mu_dp, n, d, 1.0) <= mu_dp:
          failures.append(("dp_to_mip", n, d, mu_dp))
  elapsed = time.perf_counter() - t0
  ok = not failures
  verdict("monotonicity suite (5x5x5 grid)", ok,
          f"{checked} beta values checked; beta non-decreasing in tau2, non-increasing in K "
          f"(a literal non-decreasing-in-K reading is contradicted by {k_falls}/{k_pairs} "
          f"adjacent K pairs, where beta strictly falls); failures: {failures or 'none'}",
          elapsed)
  assert ok


COMPOSE_FAMILIES = [
    ([1.0], [1.3]),
    ([0.5, 0.5], [0.5, 2.0]),
    ([0.3, 0.7], [0.0, 1.5]),
    ([0.2, 0.3, 0.5], [0.5, 1.0, 3.0]),
    ([0.6, 0.3, 0.1], [0.2, 2.5, 4.0]),
]


def test_stochastic_composition_oracle(verdict):
  t0 = time.perf_counter()
  worst = 0.0
  for weights, mus in COMPOSE_FAMILIES:
    family = tr.WeightedTestFamily(tuple(zip(weights, map(tr.GaussianCurve, mus))))
    for a in (0.01, 0.1, 0.3):
      got = tr.stochastic_compose(family, a)
      want = brute_force_composition(weights, mus, a)
      worst = max(worst, abs(got - want))
  rng = np.random.default_rng(11)
  violations = 0
  for _ in range(100):
    k = int(rng.integers(1, 6))
    mus = rng.uniform(0.0, 4.0, size=k)
    weights = rng.dirichlet(np.ones(k))
    family = tr.WeightedTestFamily(tuple(zip(weights, map(tr.GaussianCurve, mus))))
    a = rng.uniform(0.0, 1.0, size=8)
    floor = tr.gaussian_beta(float(mus.max()), a)
    violations += int(np.sum(np.asarray(tr.stochastic_compose(family, a)) < floor - 1e-12))
  elapsed = time.perf_counter() - t0
  ok = worst <= 1e-3 and violations == 0
  verdict("stochastic-composition oracle", ok,
          f"max |compose - brute force| = {worst:.2e}; "
          f"{violations} worst-case-bound violations over 100 random families", elapsed)
  assert ok


def _all_curves():
  fam = tr.WeightedTestFamily(((0.25, tr.GaussianCurve(0.5)), (0.75, tr.GaussianCurve(2.0))))
  mixed = tr.WeightedTestFamily(((0.5, tr.GaussianCurve(1.0)),
                                 (0.5, tr.OneStepCurve(tr.OneStepParams(20, 5)))))
  spec = linreg_lrt.LossTestSpec(0.5, 1.5)
  return {
      "gaussian mu=0": tr.GaussianCurve(0.0),
      "gaussian mu=1.14": tr.GaussianCurve(1.14),
      "gaussian mu=6": tr.GaussianCurve(6.0),
      "gaussian tensor [1,2,2]": tr.GaussianCurve(tr.tensor_compose_gaussian([1, 2, 2])),
      "one-step 500/650": tr.OneStepCurve(VERIFY),
      "one-step 10/4": tr.OneStepCurve(tr.OneStepParams(10, 4)),
      "one-step noisy": tr.OneStepCurve(tr.OneStepParams(50, 20, 0.5, 5.0, 20)),
      "one-step K=0": tr.OneStepCurve(tr.OneStepParams(100, 30, K=0.0)),
      "one-step d=1": tr.OneStepCurve(tr.OneStepParams(2, 1, K=3.0)),
      "tabulated one-step": tr.tabulate(tr.OneStepCurve(tr.OneStepParams(20, 10))),
      "tabulated raw": tr.TabulatedCurve([0, 0.2, 0.5, 1], [1, 0.9, 0.1, 0]),
      "stochastic gaussian": tr.StochasticComposition(fam),
      "stochastic mixed": tr.StochasticComposition(mixed),
      "loss test": linreg_lrt.LossLrtCurve(spec),
  }


def test_tradeoff_axiom_suite(verdict):
  t0 = time.perf_counter()
  failed = []
  curves = _all_curves()
  for name, curve in curves.items():
    report = tr.check_axioms(curve, 1001)
    if not report.ok:
      failed.append((name, report))
  elapsed = time.perf_counter() - t0
  ok = not failed
  verdict("trade-off axiom suite", ok,
          f"{len(curves) - len(failed)}/{len(curves)} curve types convex, non-increasing, "
          f"<= 1 - alpha on 1001 points", elapsed)
  assert ok, failed


def test_special_function_suite(verdict):
  t0 = time.perf_counter()
  x = np.concatenate([np.linspace(0.0, 5.0, 51), np.linspace(5.0, 400.0, 200)])
  closed_err = 0.0
  for nc in (0.0, 0.3, 1.0, 10.0, 100.0):
    got = NoncentralChiSq(1, nc).cdf(x)
    closed_err = max(closed_err, float(np.max(np.abs(got - d1_noncentral_cdf(x, nc)))))
  rt_err = 0.0
  probs = np.array([1e-6, 1e-3, 0.01, 0.1, 0.5, 0.9, 0.99, 0.999, 1 - 1e-6])
  for d in (1, 10, 650):
    for nc in (0.0, d, 10.0 * d):
      law = NoncentralChiSq(d, nc)
      q = law.quantile(probs)
      rt_err = max(rt_err, float(np.max(np.abs(law.cdf(q) - probs))))
  elapsed = time.perf_counter() - t0
  ok = closed_err <= 1e-9 and rt_err <= 1e-8
  verdict("special-function suite", ok,
          f"d=1 closed-form error {closed_err:.1e}, quantile round-trip error {rt_err:.1e}",
          elapsed)
  assert ok


def test_linear_regression_loss_lrt(verdict):
  t0 = time.perf_counter()
  exp = linreg_lrt.run_linreg_experiment(100, 10, 1.0, 10_000, seed=3)
  rows = exp.power_check((0.05, 0.1, 0.25))
  ks = stats.kstest(exp.member_scores, stats.chi2(1).cdf)
  elapsed = time.perf_counter() - t0
  ok = all(r[-1] for r in rows) and ks.pvalue > 0.01 and elapsed < 60
  verdict("linear-regression loss LRT (n=100, p=10, 1e4 trials)", ok,
          "; ".join(f"a={a:g}: {e:.4f} vs {r:.4f} ({abs(e - r) / s:.2f} SE)"
                    for a, e, r, s, _ in rows) + f"; member KS p={ks.pvalue:.3f}", elapsed)
  assert ok


E2E_FPRS = (0.01, 0.05, 0.1, 0.25, 0.5)


def _end_to_end(tau: float, runs: int = 5):
  d, size, n, epochs, clip = 100, 400, 200, 5, 1.0
  steps = epochs * size // n
  members, nonmembers = [], []
  for run in range(runs):
    rng = np.random.default_rng(100 + run)
    task = sgd.SyntheticTask.random("logistic_regression", d, rng, scale=3.0)
    x, y = task.sample(rng, size)
    xp, yp = task.sample(rng, size)
    xb, yb = task.sample(rng, 1000)
    config = sgd.SgdConfig(0.5, n, steps, clip, tau, seed=run)
    res = sgd.train(task, config, x, y, probes=(np.vstack([x, xp]), np.concatenate([y, yp])),
                    background=(xb, yb))
    scores = sgd.score_probes(res.trace, tau * tau)
    members.append(scores[:size])
    nonmembers.append(scores[size:])
  return RocEstimate.from_scores(np.concatenate(members), np.concatenate(nonmembers))


def test_end_to_end_guarantee(verdict):
  t0 = time.perf_counter()
  target = cal.CalibrationTarget(acc.Notion.GMIP, 1.0, acc.SubsamplingPlan(400, 200, 5), 100, 1.0)
  bound = tr.GaussianCurve(1.0)
  taus = {"min-rule": cal.tau_for_gmip(target),
          "gmip-only": cal.tau_for_gmip(target, min_rule=False)}
  details = []
  ok = True
  for label, tau in taus.items():
    roc = _end_to_end(tau)
    rows = roc.check_against(bound, E2E_FPRS)
    ok = ok and all(r[-1] for r in rows)
    margin = min((r[1] - r[2]) / r[3] for r in rows)
    details.append(f"{label} tau={tau:.4g}: AUC {roc.auc():.3f}, "
                   f"empirical FNR above the bound by >= {margin:.2f} SE")
  elapsed = time.perf_counter() - t0
  ok = ok and elapsed < 600
  verdict("end-to-end guarantee (mu=1.0, d=100, n=200)", ok, "; ".join(details), elapsed)
  assert ok

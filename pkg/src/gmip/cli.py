"""Command-line interface.

Exit codes: 0 success, 1 an audit check failed, 2 usage or invalid
parameters, 3 unreachable calibration target, 4 I/O or parse error.

Files without an explicit path go to ``$GMIP_OUTPUT_DIR`` (default: the
current directory).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from collections.abc import Sequence

import numpy as np

from gmip import accountant as acc
from gmip import calibrator as cal
from gmip import glir, linreg_lrt, sgd, trace, tradeoff
from gmip.errors import InfeasibleTargetError, TraceFormatError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_IO = 0, 1, 2, 3, 4
OUTPUT_DIR_ENV = "GMIP_OUTPUT_DIR"
AUDIT_FPRS = (0.01, 0.05, 0.1, 0.25, 0.5)


class UsageError(ValueError):
  pass


def _output_dir() -> str:
  return os.environ.get(OUTPUT_DIR_ENV, ".")


def _resolve(path: str | None, default_name: str) -> str:
  if path:
    return path
  return os.path.join(_output_dir(), default_name)


def _fmt(x) -> str:
  if isinstance(x, (bool, np.bool_)):
    return "pass" if x else "FAIL"
  if isinstance(x, (int, np.integer)):
    return str(int(x))
  if isinstance(x, (float, np.floating)):
    return f"{float(x):.6g}"
  return str(x)


def _json_default(x):
  if isinstance(x, np.generic):
    return x.item()
  raise TypeError(f"not JSON serializable: {type(x)}")


def _json_float(x: float):
  # JSON has no infinity; use the strings understood by float().
  if isinstance(x, float) and math.isinf(x):
    return "inf" if x > 0 else "-inf"
  return x


def _emit(report: dict, fmt: str, out=None) -> None:
  out = out or sys.stdout
  if fmt == "json":
    clean = {k: _json_float(v) if isinstance(v, float) else v for k, v in report.items()}
    out.write(json.dumps(clean, indent=2, default=_json_default) + "\n")
  elif fmt == "csv":
    flat = {k: v for k, v in report.items() if not isinstance(v, (dict, list))}
    out.write(",".join(flat) + "\n")
    out.write(",".join(repr(float(v)) if isinstance(v, float) else str(v)
                       for v in flat.values()) + "\n")
  else:
    width = max(len(k) for k in report)
    for k, v in report.items():
      if isinstance(v, dict):
        continue
      if isinstance(v, list):
        out.write(f"{k}:\n")
        for row in v:
          out.write("  " + "  ".join(f"{rk}={_fmt(rv)}" for rk, rv in row.items()) + "\n")
      else:
        out.write(f"{k:<{width}}  {_fmt(v)}\n")


def _write_text(path: str, text: str) -> None:
  parent = os.path.dirname(path)
  if parent:
    os.makedirs(parent, exist_ok=True)
  with open(path, "w", encoding="utf-8") as fh:
    fh.write(text)


# -- tradeoff -----------------------------------------------------------------

def cmd_tradeoff(args) -> int:
  if (args.gmip is None) == (args.onestep is None):
    raise UsageError("give exactly one of --gmip MU or --onestep N D TAU2 C K")
  report: dict = {}
  if args.gmip is not None:
    curve: tradeoff.TradeoffCurve = tradeoff.GaussianCurve(args.gmip)
    report["curve"] = f"gaussian mu={args.gmip:g}"
  else:
    n, d, tau2, clip, k = args.onestep
    if n != int(n) or d != int(d):
      raise UsageError("N and D must be integers")
    params = tradeoff.OneStepParams(int(n), int(d), tau2, clip, k)
    curve = tradeoff.OneStepCurve(params)
    mu = acc.mu_step(params)
    fa, fb = tradeoff.onestep_frontier(params, 1201)
    report["curve"] = "one-step"
    report["n_effective"] = params.n_effective
    report["mu_step"] = mu
    report["gaussian_sup_gap"] = float(np.max(np.abs(fb - tradeoff.gaussian_beta(mu, fa))))
  grid = tradeoff.evaluation_grid(args.grid)
  beta = np.asarray(curve(grid))
  text = "alpha,beta\n" + "".join(f"{a:.17g},{b:.17g}\n" for a, b in zip(grid, beta))
  if args.out == "-":
    sys.stdout.write(text)
    return EXIT_OK
  path = _resolve(args.out, "tradeoff.csv")
  _write_text(path, text)
  report["rows"] = len(grid)
  report["output"] = path
  _emit(report, args.format)
  return EXIT_OK


# -- accountant ---------------------------------------------------------------

_ACCOUNTANT_FIELDS = ("n", "d", "tau2", "clip", "K", "steps", "subsample", "strict",
                      "convert", "mu")


def _accountant_config(args) -> dict:
  cfg = {f: getattr(args, f) for f in _ACCOUNTANT_FIELDS}
  if args.config:
    with open(args.config, encoding="utf-8") as fh:
      doc = json.load(fh)
    doc = doc.get("config", doc)
    unknown = set(doc) - set(_ACCOUNTANT_FIELDS)
    if unknown:
      raise UsageError(f"unknown config fields: {sorted(unknown)}")
    for k, v in doc.items():
      if cfg.get(k) in (None, False):
        cfg[k] = v
  for k in ("tau2", "clip", "K", "mu"):
    if cfg.get(k) is not None:
      cfg[k] = float(cfg[k])
  if cfg["tau2"] is None:
    cfg["tau2"] = 0.0
  if cfg["clip"] is None:
    cfg["clip"] = math.inf
  return cfg


def cmd_accountant(args) -> int:
  cfg = _accountant_config(args)
  if cfg["n"] is None or cfg["d"] is None:
    raise UsageError("--n and --d are required")
  n, d = int(cfg["n"]), int(cfg["d"])
  report: dict = {}
  if cfg["convert"]:
    if cfg["mu"] is None:
      raise UsageError("--convert needs --mu")
    if cfg["convert"] == "dp-to-mip":
      report["mu_dp"] = cfg["mu"]
      if not math.isfinite(cfg["clip"]):
        raise UsageError("dp-to-mip needs a finite --clip")
      report["mu_mip"] = acc.dp_to_mip(cfg["mu"], n, d, cfg["clip"])
    else:
      report["mu_mip"] = cfg["mu"]
      report["mu_dp"] = acc.mip_to_dp(cfg["mu"], n, d)
  else:
    if cfg["steps"] is not None and cfg["subsample"] is not None:
      raise UsageError("--steps and --subsample are mutually exclusive")
    params = tradeoff.OneStepParams(n, d, cfg["tau2"], cfg["clip"], cfg["K"])
    mu = acc.mu_step(params)
    report["n_effective"] = params.n_effective
    report["mu_step"] = mu
    if cfg["steps"] is not None:
      report["steps"] = int(cfg["steps"])
      report["mu"] = acc.compose_k_steps(mu, int(cfg["steps"]))
    elif cfg["subsample"] is not None:
      size, epochs = cfg["subsample"]
      plan = acc.SubsamplingPlan(int(size), n, float(epochs))
      c = acc.subsampling_ratio(plan, strict=bool(cfg["strict"]))
      report["iterations"] = plan.iterations(strict=bool(cfg["strict"]))
      report["c"] = c
      report["mu"] = acc.compose_subsampled(mu, c)
  if args.format == "json":
    report["config"] = {k: _json_float(v) if isinstance(v, float) else v
                        for k, v in cfg.items() if v is not None and v is not False}
  _emit(report, args.format)
  return EXIT_OK


# -- calibrate / reproduce ----------------------------------------------------

def _preset(name: str) -> cal.DatasetPreset:
  key = name.lower().removesuffix("-preset")
  if key not in cal.PRESETS:
    raise UsageError(f"unknown dataset preset {name!r}; choose from {sorted(cal.PRESETS)}")
  return cal.PRESETS[key]


def cmd_calibrate(args) -> int:
  notion = acc.Notion(args.notion)
  if args.dataset:
    p = _preset(args.dataset)
    size, batch, epochs, clip, d = p.dataset_size, p.batch_size, p.epochs, p.clip, p.d
  else:
    size, batch, epochs, clip, d = (args.dataset_size, args.batch_size, args.epochs,
                                    args.clip, args.d)
  for name, v in (("dataset_size", size), ("batch_size", batch), ("epochs", epochs),
                  ("clip", clip), ("d", d)):
    if args.dataset and getattr(args, name, None) is not None:
      raise UsageError(f"--{name.replace('_', '-')} conflicts with --dataset")
    if v is None:
      raise UsageError(f"--{name.replace('_', '-')} is required without --dataset")
  target = cal.CalibrationTarget(notion, args.mu, acc.SubsamplingPlan(size, batch, epochs),
                                 d, clip, args.K, args.strict)
  try:
    if notion is acc.Notion.GDP:
      tau = cal.tau_for_gdp(target)
    else:
      tau = cal.tau_for_gmip(target, min_rule=not args.no_min_rule)
  except InfeasibleTargetError as err:
    sys.stderr.write(f"infeasible: {err}\n")
    if err.infimum is not None:
      sys.stderr.write(f"achievable infimum: {err.infimum:.6g}\n")
    return EXIT_INFEASIBLE
  report = {
      "notion": notion.value,
      "target_mu": args.mu,
      "tau": tau,
      "achieved_mu": cal.achieved_mu(target, tau),
  }
  if notion is acc.Notion.GMIP:
    report["achieved_gdp_mu"] = cal.achieved_mu(target.with_notion(acc.Notion.GDP), tau)
  _emit(report, args.format)
  return EXIT_OK


def cmd_reproduce(args) -> int:
  cells = cal.reproduce_tau_table()
  if args.format == "csv":
    sys.stdout.write(cal.tau_table_csv(cells))
  elif args.format == "json":
    rows = [{"dataset": c.dataset, "notion": c.notion, "mu": c.mu, "tau": c.tau,
             "published": c.published} for c in cells]
    sys.stdout.write(json.dumps(rows, indent=2) + "\n")
  else:
    sys.stdout.write(cal.tau_table_text(cells))
  return EXIT_OK


# -- audit --------------------------------------------------------------------

def _check_rows(rows) -> list[dict]:
  return [{"fpr": a, "empirical_fnr": e, "bound": b, "se": s, "check": ok}
          for a, e, b, s, ok in rows]


def cmd_audit_glir_sim(args) -> int:
  if args.tau2 > 0 and math.isinf(args.clip):
    raise UsageError("--tau2 > 0 needs a finite --clip")
  rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(2**31,)))
  model = glir.random_model(args.d, rng, family=glir.Family(args.family))
  estimation = (glir.Estimated(args.estimated, args.ridge) if args.estimated
                else glir.ExactParams())
  result = glir.run_audit(model, args.n, args.steps, args.trials, tau2=args.tau2,
                          clip=args.clip, estimation=estimation, seed=args.seed)
  params = tradeoff.OneStepParams(args.n, args.d, args.tau2, args.clip, args.d)
  if args.steps == 1:
    bound: tradeoff.TradeoffCurve = tradeoff.OneStepCurve(params)
  else:
    bound = tradeoff.GaussianCurve(acc.compose_k_steps(acc.mu_step(params), args.steps))
  out_dir = args.out_dir or _output_dir()
  roc = result.roc
  _write_text(os.path.join(out_dir, "glir_roc.csv"), roc.to_csv())
  tab = tradeoff.tabulate(bound)
  _write_text(os.path.join(out_dir, "glir_bound.csv"),
              "alpha,beta\n" + "".join(f"{a:.17g},{b:.17g}\n" for a, b in zip(tab.alpha, tab.beta)))
  rows = _check_rows(roc.check_against(bound, AUDIT_FPRS))
  report: dict = {"trials_per_class": args.trials, "steps": args.steps, "auc": roc.auc(),
                  "bound_not_beaten": rows}
  ok = all(r["check"] for r in rows)
  if args.steps == 1 and isinstance(estimation, glir.ExactParams):
    tight = _check_rows(result.level_test(bound, AUDIT_FPRS))
    report["tightness"] = tight
    if args.family == "gaussian" and math.isinf(args.clip):
      ok = ok and all(r["check"] for r in tight)
  report["output_dir"] = out_dir
  _emit(report, args.format)
  return EXIT_OK if ok else EXIT_CHECK_FAILED


def _load_estimate(args, d: int):
  if args.model:
    with np.load(args.model) as z:
      return glir.GradientEstimate.from_moments(z["mean"], z["cov"])
  if args.background:
    bg = np.load(args.background)
    if bg.ndim == 3:
      return [glir.estimate_distribution(b, args.ridge) for b in bg]
    return glir.estimate_distribution(bg, args.ridge)
  raise UsageError("give --model (npz with mean, cov) or --background (npy)")


def cmd_audit_glir_trace(args) -> int:
  rows = []
  for path in args.traces:
    tr = trace.read_trace(path, n=args.n)
    est = _load_estimate(args, tr.d)
    score = glir.score_trace(tr, est, tau2=args.tau2, clip=args.clip)
    claim = "member" if score <= args.threshold else "nonmember"
    rows.append({"file": path, "steps": tr.steps, "d": tr.d, "n": tr.n,
                 "log_p_total": score, "claim": claim})
  if args.format == "csv":
    sys.stdout.write("file,steps,d,n,log_p_total,claim\n")
    for r in rows:
      sys.stdout.write(f"{r['file']},{r['steps']},{r['d']},{r['n']},{r['log_p_total']!r},{r['claim']}\n")
  else:
    _emit({"threshold": args.threshold, "traces": rows}, args.format)
  return EXIT_OK


def cmd_audit_linreg(args) -> int:
  from scipy import stats

  exp = linreg_lrt.run_linreg_experiment(args.n, args.p, args.sigma2, args.trials, args.seed)
  out_dir = args.out_dir or _output_dir()
  _write_text(os.path.join(out_dir, "linreg.csv"), exp.to_csv())
  _write_text(os.path.join(out_dir, "linreg_roc.csv"), exp.roc.to_csv())
  meta = {"convention": linreg_lrt.CONVENTION_NOTE, "n": args.n, "p": args.p,
          "sigma2": args.sigma2, "trials": args.trials, "seed": args.seed,
          "singular_redraws": exp.redraws}
  _write_text(os.path.join(out_dir, "linreg_meta.json"), json.dumps(meta, indent=2) + "\n")
  rows = [{"fpr": a, "tpr_empirical": e, "tpr_analytical": r, "se": s,
           "tpr_mean_leverage": exp.mean_leverage_power(a), "check": ok}
          for a, e, r, s, ok in exp.power_check((0.05, 0.1, 0.25))]
  ks = stats.kstest(exp.member_scores, stats.chi2(1).cdf)
  ks_crit = stats.kstwo.ppf(0.99, exp.trials)
  report = {"trials": exp.trials, "singular_redraws": exp.redraws,
            "member_ks_statistic": float(ks.statistic), "ks_critical_1pct": float(ks_crit),
            "ks_check": bool(ks.statistic < ks_crit), "power": rows, "output_dir": out_dir}
  _emit(report, args.format)
  ok = report["ks_check"] and all(r["check"] for r in rows)
  return EXIT_OK if ok else EXIT_CHECK_FAILED


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
  task, config, size = sgd.load_run_config(args.config)
  rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(2,))))
  if not np.any(task.true_params):
    task = sgd.SyntheticTask(task.kind, task.feature_dim, task.label_noise,
                             rng.standard_normal(task.feature_dim) / math.sqrt(task.feature_dim))
  x, y = task.sample(rng, size)
  probes = min(args.probes, size)
  res = sgd.train(task, config, x, y, probes=(x[:probes], y[:probes]))
  out_dir = args.out_dir or _output_dir()
  os.makedirs(out_dir, exist_ok=True)
  paths = []
  for i in range(probes):
    path = os.path.join(out_dir, f"trace_probe{i}.gmip")
    trace.write_trace(res.trace.gradient_trace(i), path)
    paths.append(path)
  np.save(os.path.join(out_dir, "params.npy"), res.params)
  _emit({"iterations": config.iterations, "final_param_norm": float(np.linalg.norm(res.params)),
         "traces": [{"path": p} for p in paths]}, args.format)
  return EXIT_OK


# -- parser -------------------------------------------------------------------

def _float(text: str) -> float:
  try:
    return float(text)
  except ValueError:
    raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _common_parser() -> argparse.ArgumentParser:
  common = argparse.ArgumentParser(add_help=False)
  common.add_argument("--format", choices=("text", "json", "csv"), default="text",
                      help="output format for reports (default: text)")
  common.add_argument("--seed", type=int, default=0, help="master random seed")
  return common


def build_parser() -> argparse.ArgumentParser:
  common = _common_parser()
  parser = argparse.ArgumentParser(
      prog="gmip", description="Membership-inference privacy accounting and auditing for noisy SGD.")
  sub = parser.add_subparsers(dest="command", required=True)

  p = sub.add_parser("tradeoff", parents=[common], help="tabulate a trade-off curve")
  p.add_argument("--gmip", type=_float, metavar="MU")
  p.add_argument("--onestep", type=_float, nargs=5, metavar=("N", "D", "TAU2", "C", "K"))
  p.add_argument("--grid", type=int, default=tradeoff.DEFAULT_GRID)
  p.add_argument("--out", help="curve CSV path ('-' for stdout)")
  p.set_defaults(func=cmd_tradeoff)

  p = sub.add_parser("accountant", parents=[common], help="per-step and composed privacy levels")
  p.add_argument("--config", help="JSON file with the fields below (as emitted by --format json)")
  p.add_argument("--n", type=int)
  p.add_argument("--d", type=int)
  p.add_argument("--tau2", type=_float)
  p.add_argument("--clip", type=_float)
  p.add_argument("--K", type=_float)
  p.add_argument("--steps", type=int)
  p.add_argument("--subsample", type=_float, nargs=2, metavar=("N", "EPOCHS"))
  p.add_argument("--strict", action="store_true", help="floor the number of iterations")
  p.add_argument("--convert", choices=("dp-to-mip", "mip-to-dp"))
  p.add_argument("--mu", type=_float)
  p.set_defaults(func=cmd_accountant)

  p = sub.add_parser("calibrate", parents=[common], help="noise level for a target mu")
  p.add_argument("--notion", choices=("gdp", "gmip"), required=True)
  p.add_argument("--mu", type=_float, required=True)
  p.add_argument("--dataset", help="preset: cifar10, purchase or adult")
  p.add_argument("--dataset-size", type=int)
  p.add_argument("--batch-size", type=int)
  p.add_argument("--epochs", type=_float)
  p.add_argument("--clip", type=_float)
  p.add_argument("--d", type=int)
  p.add_argument("--K", type=_float)
  p.add_argument("--strict", action="store_true")
  p.add_argument("--no-min-rule", action="store_true",
                 help="do not cap the GMIP noise level by the GDP one")
  p.set_defaults(func=cmd_calibrate)

  p = sub.add_parser("reproduce", parents=[common], help="reproduce published tables")
  p.add_argument("table", choices=("tau-table",))
  p.set_defaults(func=cmd_reproduce)

  p = sub.add_parser("train", parents=[common], help="run noisy SGD from a JSON config")
  p.add_argument("config")
  p.add_argument("--probes", type=int, default=1, help="training points whose traces are written")
  p.add_argument("--out-dir")
  p.set_defaults(func=cmd_train)

  audit = sub.add_parser("audit", help="empirical membership-inference audits")
  asub = audit.add_subparsers(dest="audit", required=True)

  p = asub.add_parser("glir-sim", parents=[common], help="simulated GLiR audit")
  p.add_argument("--n", type=int, required=True)
  p.add_argument("--d", type=int, required=True)
  p.add_argument("--trials", type=int, required=True)
  p.add_argument("--steps", type=int, default=1)
  p.add_argument("--tau2", type=_float, default=0.0)
  p.add_argument("--clip", type=_float, default=math.inf)
  p.add_argument("--family", choices=("gaussian", "uniform"), default="gaussian")
  p.add_argument("--estimated", type=int, metavar="M",
                 help="estimate moments from M background gradients per step")
  p.add_argument("--ridge", type=_float, default=glir.DEFAULT_RIDGE)
  p.add_argument("--out-dir")
  p.set_defaults(func=cmd_audit_glir_sim)

  p = asub.add_parser("glir-trace", parents=[common], help="score gradient trace files")
  p.add_argument("traces", nargs="+")
  p.add_argument("--n", type=int, help="batch size (CSV traces only)")
  p.add_argument("--model", help="npz file with arrays 'mean' and 'cov'")
  p.add_argument("--background", help="npy file, (m, d) or per step (T, m, d)")
  p.add_argument("--ridge", type=_float, default=glir.DEFAULT_RIDGE)
  p.add_argument("--tau2", type=_float, default=0.0)
  p.add_argument("--clip", type=_float, default=math.inf)
  p.add_argument("--threshold", type=_float, default=math.log(0.05),
                 help="claim member when the summed log p-value is at most this")
  p.set_defaults(func=cmd_audit_glir_trace)

  p = asub.add_parser("linreg", parents=[common], help="least-squares loss-test experiment")
  p.add_argument("--n", type=int, required=True)
  p.add_argument("--p", type=int, required=True)
  p.add_argument("--trials", type=int, required=True)
  p.add_argument("--sigma2", type=_float, default=1.0)
  p.add_argument("--out-dir")
  p.set_defaults(func=cmd_audit_linreg)
  return parser


def main(argv: Sequence[str] | None = None) -> int:
  parser = build_parser()
  try:
    args = parser.parse_args(argv)
  except SystemExit as exc:
    return int(exc.code) if exc.code is not None else EXIT_OK
  try:
    return args.func(args)
  except TraceFormatError as err:
    sys.stderr.write(f"parse error: {err}\n")
    return EXIT_IO
  except InfeasibleTargetError as err:
    sys.stderr.write(f"infeasible: {err}\n")
    return EXIT_INFEASIBLE
  except OSError as err:
    sys.stderr.write(f"I/O error: {err}\n")
    return EXIT_IO
  except ValueError as err:
    sys.stderr.write(f"usage error: {err}\n")
    return EXIT_USAGE


if __name__ == "__main__":
  sys.exit(main())

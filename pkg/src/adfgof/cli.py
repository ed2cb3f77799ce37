"""Command-line front end: ``adfgof {test, simulate, limit, reproduce}``.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import limit_laws
from .errors import AdfError, ValidationError
from .reports import export_paths, write_edf


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adfgof", description="Distribution-free goodness-of-fit tests for regression.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", help="run a test on a CSV dataset (header x1..xp,y)")
    t.add_argument("data", help="input CSV")
    t.add_argument("--model", default="linear", help="built-in model: linear or exponential")
    t.add_argument("--kind", default="error", choices=["error", "error_scale", "regression"])
    t.add_argument("--config", help="JSON file with test options (flags override it)")
    t.add_argument("--sign-convention", choices=["general", "eq71"])
    t.add_argument("--tau", type=float)
    t.add_argument("--sup-rule", choices=["exact", "residuals"])
    t.add_argument("--design", choices=["empirical", "gaussian"])
    t.add_argument("--copula-r", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="write the report here instead of stdout")
    t.add_argument("--paths", help="export the process path as CSV")

    s = sub.add_parser("simulate", help="Monte Carlo rejection rates")
    s.add_argument("--config", help="JSON experiment config (flags override it)")
    s.add_argument("--experiment", choices=list(ex.EXPERIMENTS))
    s.add_argument("--n", type=int)
    s.add_argument("--m", type=int)
    s.add_argument("--r", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--sign-convention", dest="sign_convention", choices=["general", "eq71"])
    s.add_argument("--theta", choices=["estimated", "true"])
    s.add_argument("--tau", type=float)
    s.add_argument("--sup-rule", dest="sup_rule", choices=["exact", "residuals"])
    s.add_argument("--critical", choices=["published", "limit"])
    s.add_argument("--workers", type=int)
    s.add_argument("--out", help="CSV of rejection rates (default stdout)")
    s.add_argument("--edf", help="also export the e.d.f. of the statistic against its limit")

    lim = sub.add_parser("limit", help="tabulate a limit law as CSV (x, cdf)")
    lim.add_argument("kind", choices=["sup_bm", "poisson", "l_r"])
    lim.add_argument("--r", type=float, default=0.0)
    lim.add_argument("--n-intensity", type=int, default=2000)
    lim.add_argument("--m-reps", type=int, default=5000)
    lim.add_argument("--grid", type=int, default=1025)
    lim.add_argument("--seed", type=int, default=ex.DEFAULT_SEED)
    lim.add_argument("--workers", type=int, default=1)
    lim.add_argument("--out", help="output CSV (default stdout)")

    rp = sub.add_parser("reproduce", help="regenerate a simulation table with published-difference columns")
    rp.add_argument("table", choices=["table1", "table2", "table3", "table4"])
    rp.add_argument("--scale", type=float, default=1.0)
    rp.add_argument("--out-dir", default=".")
    rp.add_argument("--seed", type=int, default=ex.DEFAULT_SEED)
    rp.add_argument("--workers", type=int, default=1)
    return p


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_test(a) -> None:
    cfg = {}
    if a.config:
        try:
            cfg = json.loads(Path(a.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {a.config}: {exc}") from exc
    keys = ("sign_convention", "tau", "design", "copula_r", "seed", "sup_rule")
    flags = {k: getattr(a, k) for k in keys}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    report = ex.test_from_file(a.data, a.model, a.kind, cfg)
    _emit(report.to_text(), a.out)
    if a.paths:
        if report.path is None:
            raise ValidationError(f"test kind {a.kind!r} produces no path to export")
        export_paths(report, a.paths)


def _simulate_config(a) -> ex.ExperimentConfig:
    keys = ("experiment", "n", "m", "r", "seed", "sign_convention", "theta", "tau", "critical", "workers", "sup_rule")
    flags = {k: getattr(a, k) for k in keys}
    if a.config:
        return ex.ExperimentConfig.from_file(a.config, flags)
    return ex.ExperimentConfig.from_dict({k: v for k, v in flags.items() if v is not None})


def _cmd_simulate(a) -> None:
    cfg = _simulate_config(a)
    if cfg.experiment == "error_gof_exp":
        stats = ex.error_statistics(cfg)
    else:
        stats = ex.regression_statistics(cfg)
    alphas, crit = ex.critical_values(cfg)
    rows = ex.rate_rows(stats, alphas, crit)
    lines = [f"# experiment={cfg.experiment} n={cfg.n} m={cfg.m} r={cfg.r} seed={cfg.seed}", "alpha,critical,rate,se"]
    lines += [f"{row['alpha']!r},{row['critical']!r},{row['rate']!r},{row['se']!r}" for row in rows]
    _emit("\n".join(lines) + "\n", a.out)
    if a.edf:
        name = "D_n" if cfg.experiment == "error_gof_exp" else "V_n"
        write_edf(a.edf, stats, ex.limit_law(cfg).cdf, name)


def _cmd_limit(a) -> None:
    if a.kind == "sup_bm":
        law = limit_laws.sup_bm_law()
        x, cdf = law.x, law.cdf_values
        head = "# sup |W| on [0, 1], analytic series"
    elif a.kind == "poisson":
        x = np.round(np.arange(0.5, 4.0001, 0.05), 10)
        cdf = np.array([limit_laws.sup_bm_cdf_poisson(v, a.n_intensity) for v in x])
        head = f"# sup |W| on [0, 1], Poisson non-crossing recursion n={a.n_intensity}"
    else:
        law = limit_laws.l_r_cdf(a.r, a.n_intensity, a.m_reps, a.grid, a.seed, a.workers)
        x, cdf = law.x, law.cdf_values
        head = f"# L_r simulation r={a.r} n_intensity={a.n_intensity} m_reps={a.m_reps} grid={a.grid} seed={a.seed}"
    lines = [head, "x,cdf"] + [f"{u!r},{c!r}" for u, c in zip(np.asarray(x).tolist(), np.asarray(cdf).tolist())]
    _emit("\n".join(lines) + "\n", a.out)


def _cmd_reproduce(a) -> None:
    for path in ex.reproduce(a.table, a.scale, a.out_dir, a.seed, a.workers):
        sys.stdout.write(f"{path}\n")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"test": _cmd_test, "simulate": _cmd_simulate, "limit": _cmd_limit, "reproduce": _cmd_reproduce}
    try:
        handlers[args.command](args)
    except AdfError as exc:
        sys.stderr.write(f"adfgof: error: {exc}\n")
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``bliptest estimate|test|simulate|medical|generate``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .blip_model import SnmmSpec, check_assignment_condition
from .errors import BlipTestError, ParseError, StatisticalError
from .estimator import Hypothesis, bootstrap, fit_blip, wald
from .medical import MedicalDesign, analyze_medical, generate_medical
from .oracle_dgp import generate_dataset, load_spec
from .point_effects import VarianceMode
from .seqdata import OutcomeFamily, read_dataset, serialize_dataset
from .study import StudyConfig, canonical_json, run_study

EXIT_OK, EXIT_USAGE, EXIT_STAT, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("BLIPTEST_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"BLIPTEST_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be at least 1")
    return n


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.lineno) from None


def _load_data(args):
    return read_dataset(args.data, OutcomeFamily.coerce(args.family))


def _load_snmm(args, dataset) -> SnmmSpec:
    if args.snmm:
        return SnmmSpec.from_json(_read_json(args.snmm))
    return SnmmSpec.stratified({t: dataset.covariate_levels(t) if len(dataset.covariate_levels(t)) > 1 else None
                                for t in range(1, dataset.T + 1)})


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        sys.stdout.write(canonical_json(payload) + "\n")
    else:
        sys.stdout.write(text.rstrip("\n") + "\n")


def _fmt(v) -> str:
    return f"{v:.6g}"


# ---------------------------------------------------------------------------
# estimate / test
# ---------------------------------------------------------------------------


def _estimate_payload(dataset, snmm, fit) -> tuple[dict, list[str]]:
    est, pe, C = fit.estimate, fit.point_effects, fit.design
    se = np.sqrt(np.diag(est.cov_conditional))
    sigma_se = np.sqrt(np.diag(pe.sigma))
    report = check_assignment_condition(dataset)
    payload = {
        "n": dataset.n,
        "T": dataset.T,
        "labels": list(est.labels),
        "gamma_hat": est.gamma_hat,
        "se_conditional": se,
        "cov_conditional": est.cov_conditional,
        "point_effects": [
            {"t": s.t, "x": s.x, "z": s.z, "theta": th, "se": e}
            for s, th, e in zip(pe.strata, pe.theta, sigma_se)
        ],
        "design": {
            "matrix": C.matrix,
            "rank": C.rank,
            "condition_number": C.condition_number,
            "singular_values": C.singular_values,
        },
        "assignment_check": [
            {"t": c.t, "x": c.x, "n": c.n, "statistic": c.statistic, "dof": c.dof, "p_value": c.p_value}
            for c in report.checks
        ],
        "variance_mode": pe.variance_mode.value,
        "skipped_strata": [list(s) for s in pe.skipped],
    }
    lines = [f"n = {dataset.n}, T = {dataset.T}, variance mode = {pe.variance_mode.value}", "", "Blip parameters"]
    for lab, g, s in zip(est.labels, est.gamma_hat, se):
        lines.append(f"  {lab:<12}{_fmt(g):>14}  (SE {_fmt(s)})")
    lines += ["", "Point effects"]
    for s, th, e in zip(pe.strata, pe.theta, sigma_se):
        lines.append(f"  t={s.t} x={s.x!s:<6} z={s.z!s:<3}{_fmt(th):>14}  (SE {_fmt(e)})")
    if pe.skipped:
        lines.append("  dropped (empty control cell): " + ", ".join(str(tuple(s)) for s in pe.skipped))
    lines += ["", f"Design matrix: {C.shape[0]} x {C.shape[1]}, rank {C.rank}, condition number {_fmt(C.condition_number)}"]
    lines.append("Conditional covariance")
    for row in est.cov_conditional:
        lines.append("  " + " ".join(f"{_fmt(v):>12}" for v in row))
    lines += ["", "Assignment check (z_t vs z_{t-1} within x_t)"]
    for c in report.checks:
        if c.applicable:
            flag = "  <- depends on earlier treatment?" if c.p_value < 0.05 else ""
            lines.append(f"  t={c.t} x={c.x!s:<6} chi2={_fmt(c.statistic)} df={c.dof} p={_fmt(c.p_value)}{flag}")
        else:
            lines.append(f"  t={c.t} x={c.x!s:<6} not applicable")
    return payload, lines


def cmd_estimate(args) -> int:
    dataset = _load_data(args)
    snmm = _load_snmm(args, dataset)
    fit = fit_blip(dataset, snmm, args.variance_mode, drop_inestimable=args.drop_inestimable)
    payload, lines = _estimate_payload(dataset, snmm, fit)
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_test(args) -> int:
    dataset = _load_data(args)
    snmm = _load_snmm(args, dataset)
    spec = _read_json(args.hypothesis)
    hyps = [Hypothesis.from_json(h) for h in spec] if isinstance(spec, list) else [Hypothesis.from_json(spec)]
    for h in hyps:
        if h.k != snmm.k:
            raise UsageError(f"hypothesis {h.name or ''} has {h.k} columns but the SNMM has k={snmm.k}")
    fit = fit_blip(dataset, snmm, args.variance_mode, drop_inestimable=args.drop_inestimable)
    boot = bootstrap(
        dataset, snmm, args.boot, args.seed, args.variance_mode,
        strata=fit.point_effects.strata, threads=_threads(args),
    )
    est = fit.estimate.with_marginal(boot.cov)
    se = np.sqrt(np.diag(boot.cov))
    results = [wald(est, h, args.alpha) for h in hyps]
    payload = {
        "B": args.boot,
        "seed": args.seed,
        "alpha": args.alpha,
        "bootstrap_failed": boot.n_failed,
        "labels": list(est.labels),
        "gamma_hat": est.gamma_hat,
        "se_bootstrap": se,
        "ci95": [[g - 1.96 * s, g + 1.96 * s] for g, s in zip(est.gamma_hat, se)],
        "cov_marginal": boot.cov,
        "tests": [
            {"name": r.name, "W": r.W, "df": r.df, "p_value": r.p_value, "critical_value": r.critical_value,
             "reject": r.reject}
            for r in results
        ],
    }
    lines = [f"bootstrap B = {args.boot} (failed {boot.n_failed}), seed = {args.seed}", "",
             f"{'':<12}{'estimate':>12}{'SE':>12}{'95% CI':>28}"]
    for lab, g, s in zip(est.labels, est.gamma_hat, se):
        lines.append(f"{lab:<12}{_fmt(g):>12}{_fmt(s):>12}   ({_fmt(g - 1.96 * s)}, {_fmt(g + 1.96 * s)})")
    lines.append("")
    for r in results:
        verdict = "reject" if r.reject else "accept"
        lines.append(f"{r.name or 'H0'}: W = {_fmt(r.W)}, df = {r.df}, p = {_fmt(r.p_value)} -> {verdict} at alpha = {r.alpha}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / medical / generate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg_path = Path(args.config)
    try:
        config = StudyConfig.from_json(_read_json(cfg_path))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, BlipTestError):
            raise
        raise UsageError(f"invalid study config: {exc}") from None
    if args.seed is not None:
        config = StudyConfig.from_json({**config.to_json(), "seed": args.seed})
    result = run_study(config, threads=_threads(args), base_dir=cfg_path.parent)
    written = result.write(args.out) if args.out else []
    payload = {"config_hash": result.config_hash, "error_rates": result.error_rates.rows, "moments": result.moments}
    lines = [f"config {result.config_hash[:12]}", result.error_rates.format() if result.error_rates.rows else "(no tests)", ""]
    lines.append(f"{'family':<10}{'n':>6}  {'parameter':<10}{'true':>9}{'mean':>10}{'var':>10}{'mean|J0':>10}{'var|J0':>10}")
    for m in result.moments:
        lines.append(
            f"{m['family']:<10}{m['n']:>6}  {m['parameter']:<10}{m['true']:9.4g}{m['mean']:10.4g}{m['variance']:10.4g}"
            f"{m.get('mean_restricted', float('nan')):10.4g}{m.get('variance_restricted', float('nan')):10.4g}"
        )
    for p in written:
        lines.append(f"wrote {p}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_medical(args) -> int:
    dataset = read_dataset(args.data, OutcomeFamily.BERNOULLI)
    design = MedicalDesign(
        tuple(args.t1_covariates.split(",")) if args.t1_covariates else (),
        tuple(args.t2_covariates.split(",")) if args.t2_covariates else (),
        args.split_by,
    )
    report = analyze_medical(dataset, B=args.boot, seed=args.seed, design=design, auto_select=args.auto_select)
    _emit(args, report.to_json(), report.format())
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.dgp == "medical":
        dataset = generate_medical(args.n, args.seed)
    else:
        dataset = generate_dataset(load_spec(args.dgp), args.n, args.seed)
    text = serialize_dataset(dataset)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bliptest", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, json_flag=True):
        if data:
            sp.add_argument("--data", required=True, help="dataset CSV")
        if json_flag:
            sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.add_argument("--threads", type=int, default=None, help="worker count (default $BLIPTEST_THREADS or 1)")

    def model(sp):
        sp.add_argument("--snmm", help="SNMM basis JSON (default: one blip per time and covariate level)")
        sp.add_argument("--family", default="normal", choices=[f.value for f in OutcomeFamily])
        sp.add_argument("--variance-mode", default="sample", choices=[m.value for m in VarianceMode])
        sp.add_argument("--drop-inestimable", action="store_true",
                        help="drop strata with an empty control cell instead of failing")

    sp = sub.add_parser("estimate", help="point effects, design matrix and GLS blip estimates")
    common(sp)
    model(sp)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("test", help="bootstrap covariance and Wald test")
    common(sp)
    model(sp)
    sp.add_argument("--hypothesis", required=True, help="JSON {H, rho} or a list of them")
    sp.add_argument("--boot", type=int, default=500)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.set_defaults(func=cmd_test)

    sp = sub.add_parser("simulate", help="Monte Carlo error-rate study")
    common(sp, data=False)
    sp.add_argument("--config", required=True, help="study config JSON")
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    sp.add_argument("--out", help="directory for CSV/JSON artifacts")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("medical", help="two-period binary-outcome workflow")
    common(sp)
    sp.add_argument("--boot", type=int, default=500)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--t1-covariates", default="x11,x13")
    sp.add_argument("--t2-covariates", default="x11,z1")
    sp.add_argument("--split-by", default="x2")
    sp.add_argument("--auto-select", action="store_true", help="backward covariate elimination at level 0.1")
    sp.set_defaults(func=cmd_medical)

    sp = sub.add_parser("generate", help="sample a dataset from a DGP spec")
    sp.add_argument("--dgp", default="normal", help="normal|bernoulli|poisson|medical or a spec JSON path")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="output CSV (default stdout)")
    sp.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "alpha", 0.5) is not None and not 0 < getattr(args, "alpha", 0.5) < 1:
            raise UsageError("--alpha must lie in (0, 1)")
        if getattr(args, "boot", 2) < 2:
            raise UsageError("--boot must be at least 2")
        return args.func(args)
    except UsageError as exc:
        print(f"bliptest: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StatisticalError as exc:
        print(f"bliptest: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAT
    except (OSError, BlipTestError) as exc:
        print(f"bliptest: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"bliptest: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

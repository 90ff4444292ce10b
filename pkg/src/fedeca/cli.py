"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 convergence error,
4 protocol error. Every run prints its resolved configuration as JSON on
stderr before doing any work.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from fedeca.errors import DataError, FedecaError

EXIT_USAGE = 1
HELP_WIDTH = 100


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1 and a fixed help width."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("formatter_class", lambda prog: argparse.HelpFormatter(prog, width=HELP_WIDTH))
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_floats(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_ints(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _csv_strs(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


# ------------------------------------------------------------------- parsers


def _add_data_source(p):
    g = p.add_argument_group("data source")
    g.add_argument("--data", help="pooled cohort CSV, split into --centers-k centers")
    g.add_argument("--centers", type=_csv_strs, help="comma-separated per-center CSVs")
    g.add_argument("--centers-k", type=int, default=1, help="number of centers when splitting --data (default: 1)")
    g.add_argument("--split", default="eca", choices=("eca", "uniform", "by-column"), help="split strategy (default: eca)")
    g.add_argument("--split-column", help="covariate name for --split by-column")
    g.add_argument("--split-seed", type=int, default=0, help="seed of the split shuffle (default: 0)")


def _add_fit_options(p):
    g = p.add_argument_group("model")
    g.add_argument("--method", default="fedeca", choices=("fedeca", "pooled_iptw", "unweighted", "maic"))
    g.add_argument("--variance", default="naive", choices=("naive", "robust", "bootstrap"))
    g.add_argument("--estimand", default="ate", choices=("ate", "att", "atc"))
    g.add_argument("--epsilon", type=float, default=1e-16, help="weight clipping floor (default: 1e-16)")
    g.add_argument("--intercept", action="store_true", help="fit a propensity intercept")
    g.add_argument("--standardize", action="store_true", help="standardize covariates for the propensity model")
    g.add_argument("--n-bootstrap", type=int, default=200, help="bootstrap replicates (default: 200)")
    g.add_argument("--bootstrap-ci", default="normal", choices=("normal", "percentile"))
    g.add_argument("--seed", type=int, default=42, help="bootstrap seed (default: 42)")
    g.add_argument("--gamma", type=float, default=0.0, help="elastic-net strength (default: 0)")
    g.add_argument("--l1-ratio", type=float, default=1.0, help="elastic-net mixing in [0, 1] (default: 1)")
    g.add_argument("--step-policy", default="backtracking", choices=("backtracking", "constant"))
    g.add_argument("--max-rounds", type=int, default=20, help="Cox Newton rounds (default: 20)")
    g.add_argument("--cox-covariates", type=_csv_ints, default=(), help="covariate indices added to the Cox model")
    g.add_argument("--match-variance", action="store_true", help="MAIC: match variances as well as means")


def build_parser():
    parser = _Parser(prog="fedeca", description="Federated IPTW Cox analysis of external control arms.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("datagen", help="simulate a cohort CSV")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--p", type=int, default=10)
    p.add_argument("--rho", type=float, default=0.5, help="Toeplitz correlation (default: 0.5)")
    p.add_argument("--shift", type=float, default=0.0, help="covariate shift of treatment allocation")
    p.add_argument("--hr", type=float, default=1.0, help="true hazard ratio of treatment")
    p.add_argument("--shape", type=float, default=2.0, help="Weibull shape (default: 2.0)")
    p.add_argument("--dropout", type=float, default=0.1, help="censoring rate, 0 disables (default: 0.1)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="output CSV; ground truth goes to <out>.truth.json")

    p = sub.add_parser("split", help="partition a cohort CSV into center CSVs")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, required=True, help="number of centers")
    p.add_argument("--strategy", default="eca", choices=("eca", "uniform", "by-column"))
    p.add_argument("--column", help="covariate name for by-column")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".", help="directory for center_<k>.csv files")

    p = sub.add_parser("fit", help="run the full analysis and write a JSON report")
    _add_data_source(p)
    p.add_argument("--backend", default="simu", choices=("simu", "local", "socket"))
    p.add_argument("--agg", help="aggregator host:port for --backend socket (env FEDECA_AGG_ADDR)")
    p.add_argument("--timeout", type=float, default=120.0, help="socket timeout in seconds")
    p.add_argument("--record", help="write the session transcript (simu backend)")
    _add_fit_options(p)
    p.add_argument("--out", help="report JSON path (default: stdout only)")

    for name, what in (("km", "weighted Kaplan-Meier curves per arm"), ("smd", "standardized mean differences")):
        p = sub.add_parser(name, help=what)
        _add_data_source(p)
        p.add_argument("--report", help="fit report JSON whose weights are applied (default: unit weights)")
        p.add_argument("--out", required=True, help="output CSV")
        p.add_argument("--svg", help="optional SVG figure")

    for name, what in (("power", "power / type-I experiment"), ("equivalence", "federated vs pooled equivalence"), ("smd-curve", "SMD against covariate shift")):
        p = sub.add_parser(name, help=what)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--reps", type=int, help="replications")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--workers", type=int, help="worker processes (default: 1)")
        p.add_argument("--n", type=int, help="patients per cohort")
        p.add_argument("--p", type=int, help="covariates")
        if name == "equivalence":
            p.add_argument("--k", type=_csv_ints, help="comma-separated center counts (default: 3)")
            p.add_argument("--split", choices=("eca", "uniform"), help="split strategy (default: uniform)")
            p.add_argument("--summary", help="summary CSV path")
        else:
            p.add_argument("--shifts", type=_csv_floats, help="comma-separated covariate shifts")
            p.add_argument("--methods", type=_csv_strs, help="comma-separated method[:variance] entries")
            p.add_argument("--match-variance", action="store_true", default=None, help="MAIC: match variances too")
        if name == "power":
            p.add_argument("--hr", type=float, help="true hazard ratio (1.0 for type-I error)")
            p.add_argument("--n-bootstrap", type=int, help="bootstrap replicates")
        p.add_argument("--out", required=True, help="output CSV")
        p.add_argument("--svg", help="optional SVG figure")

    p = sub.add_parser("serve-agg", help="run an aggregator for one socket session")
    p.add_argument("--bind", help="host:port to listen on (env FEDECA_BIND_ADDR)")
    p.add_argument("--k", type=int, required=True, help="number of centers")
    p.add_argument("--record", help="write the session transcript")
    p.add_argument("--timeout", type=float, default=120.0)

    p = sub.add_parser("serve-center", help="serve one center's data for one socket session")
    p.add_argument("--agg", help="aggregator host:port (env FEDECA_AGG_ADDR)")
    p.add_argument("--id", type=int, help="center id (env FEDECA_CENTER_ID)")
    p.add_argument("--data", required=True, help="this center's cohort CSV")
    p.add_argument("--timeout", type=float, default=120.0)
    p.add_argument("--protocol-version", type=int, default=None, help=argparse.SUPPRESS)
    return parser


# ------------------------------------------------------------------ commands


def _load_cohorts(args):
    from fedeca.data import read_cohort_csv
    from fedeca.federation.runtime import split_cohort

    if args.centers:
        return [read_cohort_csv(path, center_id=k) for k, path in enumerate(args.centers)]
    if not args.data:
        raise UsageError("one of --data or --centers is required")
    cohort = read_cohort_csv(args.data)
    if args.centers_k == 1:
        return [cohort]
    return split_cohort(cohort, args.centers_k, args.split, seed=args.split_seed, column=args.split_column)


def _fit_config(args):
    from fedeca.pipeline import FitConfig

    return FitConfig(
        method=args.method,
        weighting="unit" if args.method == "unweighted" else "iptw",
        estimand=args.estimand,
        epsilon=args.epsilon,
        intercept=args.intercept,
        standardize=args.standardize,
        variance=args.variance,
        n_bootstrap=args.n_bootstrap,
        bootstrap_ci=args.bootstrap_ci,
        seed=args.seed,
        gamma=args.gamma,
        l1_ratio=args.l1_ratio,
        step_policy=args.step_policy,
        max_rounds=args.max_rounds,
        cox_covariates=args.cox_covariates,
    )


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def cmd_datagen(args):
    from fedeca.data import write_cohort_csv
    from fedeca.simulate import SimConfig, simulate

    cfg = SimConfig(n=args.n, p=args.p, rho=args.rho, shift=args.shift, hazard_ratio=args.hr, shape=args.shape, dropout=args.dropout, seed=args.seed)
    cohort, truth = simulate(cfg)
    write_cohort_csv(cohort, args.out)
    _write_text(args.out + ".truth.json", json.dumps({"config": cfg.to_dict(), **truth.to_dict()}, sort_keys=True) + "\n")
    print(f"wrote {cohort.n} patients to {args.out}")
    return 0


def cmd_split(args):
    from fedeca.data import read_cohort_csv, write_cohort_csv
    from fedeca.federation.runtime import split_cohort

    cohort = read_cohort_csv(args.data)
    parts = split_cohort(cohort, args.k, args.strategy, seed=args.seed, column=args.column)
    os.makedirs(args.out_dir, exist_ok=True)
    for k, part in enumerate(parts):
        path = os.path.join(args.out_dir, f"center_{k}.csv")
        write_cohort_csv(part, path)
        print(f"center {k}: {part.n} patients -> {path}")
    return 0


def cmd_fit(args):
    from fedeca.pipeline import fit_fedeca, report_json

    config = _fit_config(args)
    if args.backend == "socket":
        from fedeca.federation.sockets import remote_fit

        agg = args.agg or os.environ.get("FEDECA_AGG_ADDR")
        if not agg:
            raise UsageError("--backend socket needs --agg or FEDECA_AGG_ADDR")
        if args.method not in ("fedeca", "unweighted"):
            raise UsageError(f"method {args.method} is not available over sockets")
        text = remote_fit(agg, config, timeout=args.timeout)
        report = json.loads(text)
    else:
        cohorts = _load_cohorts(args)
        if args.method == "maic":
            from fedeca.baselines import maic

            if len(cohorts) > 1:
                raise UsageError("maic runs on a single pooled cohort")
            report = maic(cohorts[0], config, match_variance=args.match_variance).report()
        elif args.method == "pooled_iptw" and len(cohorts) > 1:
            raise UsageError("pooled_iptw runs on a single pooled cohort")
        else:
            from fedeca.federation.runtime import LocalFederation, SimuFederation, write_transcript

            if args.backend == "simu":
                fed = SimuFederation(cohorts, record=args.record is not None)
            else:
                fed = LocalFederation(cohorts)
            report = fit_fedeca(fed, config).report()
            if args.record:
                write_transcript(fed.transcript, args.record)
        text = report_json(report)
    if args.out:
        _write_text(args.out, text)
    lo, hi = report["ci"]
    print(f"method={report['method']} variance={report['variance_method']} HR={report['hr']:.6g} CI95=[{lo:.6g}, {hi:.6g}] p={report['p']:.6g}")
    if not args.out:
        sys.stdout.write(text)
    return 0


def _analytics_federation(args):
    from fedeca.federation.runtime import SimuFederation
    from fedeca.pipeline import apply_report_weights

    fed = SimuFederation(_load_cohorts(args))
    report = None
    if args.report:
        try:
            with open(args.report) as fh:
                report = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"no such file: {args.report}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid report JSON {args.report}: {exc}") from None
    apply_report_weights(fed, report)
    return fed, report is not None


def cmd_km(args):
    from fedeca.pipeline import fed_kaplan_meier

    fed, weighted = _analytics_federation(args)
    curves = [fed_kaplan_meier(fed, arm, weighted=weighted) for arm in (1, 0)]
    fields = ("times", "survival", "ci_low", "ci_high")
    extra = ("var_greenwood", "var_exp_greenwood", "death_mass", "risk_mass")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("time", "survival", "ci_low", "ci_high", "arm") + extra)
        for c in curves:
            for j in range(len(c.times)):
                row = [repr(float(getattr(c, k)[j])) for k in fields] + [c.arm]
                w.writerow(row + [repr(float(getattr(c, k)[j])) for k in extra])
    if args.svg:
        from fedeca.plotting import plot_km

        plot_km(curves, args.svg)
    print(f"wrote {sum(len(c.times) for c in curves)} curve points to {args.out}")
    return 0


def cmd_smd(args):
    from fedeca.pipeline import fed_smd

    fed, weighted = _analytics_federation(args)
    names = fed.centers[0].cohort.covariate_names
    rep = fed_smd(fed, weighted=weighted, covariates=names)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("covariate", "smd_before", "smd_after", "mean_treated", "mean_control", "wmean_treated", "wmean_control"))
        for j, name in enumerate(rep.covariates):
            w.writerow([name] + [repr(float(getattr(rep, k)[j])) for k in (
                "smd_before", "smd_after", "mean_treated", "mean_control", "wmean_treated", "wmean_control")])
    if args.svg:
        from fedeca.plotting import plot_smd

        plot_smd(rep, args.svg)
    print(f"mean |SMD| before={np.nanmean(np.abs(rep.smd_before)):.4g} after={np.nanmean(np.abs(rep.smd_after)):.4g}")
    return 0


_EXPERIMENT_DEFAULTS = {
    "power": dict(experiment="power", reps=200, sim={"n": 700, "hazard_ratio": 0.4}, sweep_axis="shift", sweep=(2.0,),
                  methods=("fedeca:bootstrap", "fedeca:robust", "fedeca:naive", "maic:robust", "unweighted:naive")),
    "equivalence": dict(experiment="equivalence", reps=100, sim={"n": 1000, "p": 10}, sweep_axis="n_centers", sweep=(3,)),
    "smd-curve": dict(experiment="smd_curve", reps=100, sim={"n": 1000, "p": 10}, sweep_axis="shift",
                      sweep=(0.0, 0.5, 1.0, 1.5, 2.0), methods=("fedeca", "maic", "unweighted")),
}


def _experiment_config(args):
    from fedeca.experiments import ExperimentConfig, load_experiment_config

    if args.config:
        cfg = load_experiment_config(args.config)
    else:
        cfg = ExperimentConfig(**_EXPERIMENT_DEFAULTS[args.command])
    sim = dict(cfg.sim)
    for key in ("n", "p"):
        if getattr(args, key, None) is not None:
            sim[key] = getattr(args, key)
    if getattr(args, "hr", None) is not None:
        sim["hazard_ratio"] = args.hr
    changes = {"sim": sim}
    for key in ("reps", "seed", "workers", "n_bootstrap", "methods", "split", "match_variance"):
        if getattr(args, key, None) is not None:
            changes[key] = getattr(args, key)
    if getattr(args, "shifts", None):
        changes["sweep"] = args.shifts
    if getattr(args, "k", None):
        changes["sweep"] = args.k
    if args.command == "power" and sim.get("hazard_ratio", 1.0) == 1.0:
        changes["experiment"] = "type1"
    return dataclasses.replace(cfg, **changes)


def cmd_experiment(args):
    from fedeca import experiments, plotting

    cfg = _experiment_config(args)
    print(json.dumps({"experiment_config": cfg.to_dict()}, sort_keys=True), file=sys.stderr)
    rows, columns = experiments.run_experiment(cfg)
    experiments.write_csv(rows, columns, args.out)
    if cfg.experiment == "equivalence":
        summary = experiments.summarize_equivalence(rows)
        if args.summary:
            experiments.write_csv(summary, ("n_centers", "quantity", "max", "median", "mean"), args.summary)
        for s in summary:
            print(f"K={s['n_centers']} {s['quantity']}: max={s['max']:.3g} median={s['median']:.3g}")
    else:
        for r in rows:
            if cfg.experiment == "smd_curve":
                print(f"shift={r['shift']} {r['method']}: mean|SMD| after={r['mean_abs_smd_after']:.4g}")
            else:
                print(f"{r['axis']}={r['value']} {r['method']}:{r['variance']} rate={r['rate']:.4g} [{r['band_low']:.3g}, {r['band_high']:.3g}]")
    if args.svg:
        {"equivalence": plotting.plot_equivalence, "smd_curve": plotting.plot_smd_curve}.get(cfg.experiment, plotting.plot_power)(rows, args.svg)
    return 0


def cmd_serve_agg(args):
    from fedeca.federation.sockets import serve_aggregator

    bind = args.bind or os.environ.get("FEDECA_BIND_ADDR")
    if not bind:
        raise UsageError("--bind or FEDECA_BIND_ADDR is required")
    return serve_aggregator(bind, args.k, record=args.record, timeout=args.timeout, announce=lambda s: print(s, flush=True))


def cmd_serve_center(args):
    from fedeca.data import read_cohort_csv
    from fedeca.federation.protocol import PROTOCOL_VERSION
    from fedeca.federation.sockets import serve_center

    agg = args.agg or os.environ.get("FEDECA_AGG_ADDR")
    cid = args.id if args.id is not None else os.environ.get("FEDECA_CENTER_ID")
    if not agg or cid is None:
        raise UsageError("--agg and --id (or FEDECA_AGG_ADDR and FEDECA_CENTER_ID) are required")
    try:
        cid = int(cid)
    except ValueError:
        raise UsageError(f"invalid center id {cid!r}") from None
    cohort = read_cohort_csv(args.data, center_id=cid)
    version = PROTOCOL_VERSION if args.protocol_version is None else args.protocol_version
    return serve_center(agg, cohort, cid, timeout=args.timeout, protocol_version=version)


COMMANDS = {
    "datagen": cmd_datagen,
    "split": cmd_split,
    "fit": cmd_fit,
    "km": cmd_km,
    "smd": cmd_smd,
    "power": cmd_experiment,
    "equivalence": cmd_experiment,
    "smd-curve": cmd_experiment,
    "serve-agg": cmd_serve_agg,
    "serve-center": cmd_serve_center,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())}
    print(json.dumps({"resolved_config": resolved}, sort_keys=True), file=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fedeca: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FedecaError as exc:
        print(f"fedeca: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

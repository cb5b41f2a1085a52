"""Command-line front end.

Exit codes: 0 success, 2 bad input, 3 numerical failure (a report flagged
``converged: false`` is still written), 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .core import Diagnostics, EstimateReport, report_to_json
from .errors import BoundarySolution, DataError, NumericalError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INTERNAL = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _write_side(path: str | None, text: str):
    if path:
        Path(path).write_text(text, encoding="utf-8")


def _flags(args) -> dict:
    """Numeric and choice flags of the invocation, echoed into reports."""
    skip = {"func", "group", "command", "out"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}


def _with_flags(report: EstimateReport, args) -> EstimateReport:
    report.params = {**report.params, "flags": _flags(args)}
    return report


def _default_seed() -> int:
    raw = os.environ.get("SUMLAB_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"SUMLAB_SEED must be an integer, got {raw!r}") from None


def _seed(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


# ------------------------------------------------------------------- eb


def _cmd_eb_plugin(args):
    from .io import read_count_data
    from .poisson_eb import TargetKind, parse_utility, plugin_sum

    data, n_zero = read_count_data(args.input)
    target = TargetKind.lambda_weighted() if args.target == "lambda" else TargetKind.next_count()
    rep = plugin_sum(data, parse_utility(args.u), a=args.a, b=args.b, target=target, level=args.level, n_zero=n_zero)
    return _with_flags(rep, args)


def _cmd_eb_uv(args):
    from .io import read_count_data
    from .poisson_eb import parse_utility, uv_sum

    data, _ = read_count_data(args.input)
    return _with_flags(uv_sum(data, parse_utility(args.u)), args)


# -------------------------------------------------------------- species


def _read_fof(path):
    from .io import read_frequency_csv

    fof, _ = read_frequency_csv(path)
    return fof


def _cmd_species_fit_gamma(args):
    from .io import fitted_frequencies_csv
    from .species import fit_gamma_mle, fitted_frequencies

    fof = _read_fof(args.input)
    try:
        fit = fit_gamma_mle(fof, level=args.level)
    except BoundarySolution as exc:
        # no interior optimum: report the observed count, flagged
        rep = EstimateReport(
            estimate=fof.d_tilde,
            method="gamma-mle",
            diagnostics=Diagnostics(converged=False, warnings=[f"BoundarySolution: {exc}"]),
            extras={"d_tilde": fof.d_tilde},
        )
        return _with_flags(rep, args)
    _write_side(args.fitted_out, fitted_frequencies_csv(fitted_frequencies(fit, fof)))
    return _with_flags(fit.report, args)


def _cmd_species_chao(args):
    from .species import chao_lower

    return _with_flags(chao_lower(_read_fof(args.input), corrected=args.corrected), args)


def _cmd_species_nbreg(args):
    from .species import nb_ratio_regression

    fit = nb_ratio_regression(_read_fof(args.input), m=args.m, weights=args.weights, variant=args.variant)
    return _with_flags(fit.report, args)


def _cmd_species_npmle(args):
    from .species import fit_npmle_species

    fit = fit_npmle_species(_read_fof(args.input), tol=args.tol, max_iter=args.max_iter)
    return _with_flags(fit.report, args)


# --------------------------------------------------------------- netdeg


def _cmd_netdeg_simulate(args):
    from .core import RngContract
    from .io import link_counts_csv, read_routing_table
    from .netdegree import simulate_sd_sample

    rt = read_routing_table(args.routing, args.node_count)
    lc = simulate_sd_sample(rt, args.n, RngContract(_seed(args)))
    return link_counts_csv(lc)


def _node_tables(args):
    from .io import read_link_counts, read_routing_table
    from .netdegree import tabulate

    rt = read_routing_table(args.routing, args.node_count) if args.routing else None
    node_count = rt.node_count if rt is not None else args.node_count
    lc = read_link_counts(args.links, node_count)
    return tabulate(lc, rt)


def _cmd_netdeg_tabulate(args):
    tables = _node_tables(args)
    nodes = []
    for k, t in enumerate(tables.tables, start=1):
        entry = {"node": k, "observed_degree": t.d_tilde, "frequencies": {str(j): c for j, c in t.entries.items()}}
        if tables.unobserved is not None:
            entry["unobserved_degree"] = int(tables.unobserved[k - 1])
        nodes.append(entry)
    return json.dumps({"nodes": nodes, "flags": _flags(args)}, indent=2) + "\n"


def _cmd_netdeg_estimate(args):
    from .io import degree_estimates_csv
    from .netdegree import estimate_degrees

    tables = _node_tables(args)
    opts = {"tol": args.tol, "max_iter": args.max_iter} if args.method == "pooled-npmle" else {}
    est = estimate_degrees(tables, args.method, **opts)
    _write_side(args.table_out, degree_estimates_csv(tables, est, args.method))
    values = [r.estimate for r in est.reports if r is not None]
    warnings = [f"node {k}: {type(e).__name__}: {e}" for k, e in sorted(est.errors.items())]
    diag = Diagnostics(warnings=warnings)
    if est.pooled is not None:
        d = est.pooled.diagnostics
        diag = Diagnostics(d.iterations, d.converged, d.loglik, list(d.warnings) + warnings)
    rep = EstimateReport(
        estimate=float(sum(values)),
        method=f"degrees:{args.method}",
        diagnostics=diag,
        extras={
            "node_estimates": [None if r is None else r.estimate for r in est.reports],
            "observed_total": float(tables.d_tilde.sum()),
        },
    )
    return _with_flags(rep, args)


# ----------------------------------------------------------------- risk


def _risk_report(args, cells_or_table, model, fit_pi):
    from .disclosure import cell_risks, estimate_global_risk
    from .io import cell_risks_csv

    rep = estimate_global_risk(cells_or_table, model, fit_pi, u_kind=args.kind, a=args.a)
    if args.cells_out:
        _write_side(args.cells_out, cell_risks_csv(cell_risks(cells_or_table, model, fit_pi, args.kind, args.a)))
    return _with_flags(rep, args)


def _need(args, **flags):
    missing = [f for f, dest in flags.items() if getattr(args, dest) is None]
    if missing:
        raise DataError(f"missing required flag(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")


def _model(args, name):
    from .disclosure import MuArgusPopulation, NegBinPopulation, PoissonPopulation

    if name == "poisson":
        _need(args, **{"lambda": "lam"})
        return PoissonPopulation(args.lam)
    if name == "nb":
        _need(args, nb_alpha="nb_alpha", nb_beta="nb_beta")
        return NegBinPopulation(args.nb_alpha, args.nb_beta)
    return MuArgusPopulation()


def _cmd_risk(name):
    def run(args):
        from .io import read_cells_csv

        if name != "poisson" and args.kind != "inverse-y-at-1":
            raise DataError(f"--kind {args.kind} is only available for the Poisson model")
        return _risk_report(args, read_cells_csv(args.input), _model(args, name), "known")

    return run


def _cmd_risk_global(args):
    from .io import read_cells_csv, read_two_way_csv

    source = read_two_way_csv(args.input) if args.two_way else read_cells_csv(args.input)
    return _risk_report(args, source, _model(args, args.model), args.fit_pi)


# ------------------------------------------------------------------ sim


def _cmd_sim_run(args):
    from dataclasses import replace

    from .io import _read_text
    from .simlab import load_scenario, replicates_csv, run_replicates, summary_json

    sc = load_scenario(_read_text(args.scenario))
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    elif "SUMLAB_SEED" in os.environ:
        sc = replace(sc, seed=_default_seed())
    summary = run_replicates(sc, workers=args.workers)
    theory = _theoretical_sd(sc)
    _write_side(args.replicates_out, replicates_csv(summary))
    return summary_json(summary, theory)


def _theoretical_sd(sc):
    if sc.generator != "poisson-mixture" or sc.estimator != "plugin" or "tau" not in sc.params:
        return None
    from .poisson_eb import TargetKind, asymptotic_sd, parse_utility

    target = TargetKind.next_count() if sc.params.get("target") == "next" else TargetKind.lambda_weighted()
    sd, _ = asymptotic_sd(float(sc.params["tau"]), parse_utility(sc.params.get("u", "one")), target)
    return sd


# --------------------------------------------------------------- parser


def _leaf(sub, name, func, help_text, with_input=True):
    p = sub.add_parser(name, help=help_text, description=help_text)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--out", help="write the report here instead of stdout")
    if with_input:
        p.add_argument("--in", dest="input", required=True, help="input CSV file")
    p.set_defaults(func=func)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sumlab", description="Empirical-Bayes estimation of sums over latent variables.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    groups = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)

    def group(name, help_text):
        g = groups.add_parser(name, help=help_text, description=help_text)
        g.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
        return g.add_subparsers(dest="command", required=True, parser_class=_Parser)

    eb = group("eb", "Poisson empirical-Bayes sums")
    p = _leaf(eb, "plugin", _cmd_eb_plugin, "plug-in estimate with an exponential prior")
    p.add_argument("--u", default="one", help="utility: indicator:a, leq:a, identity or one")
    p.add_argument("--target", choices=["lambda", "next"], default="lambda")
    p.add_argument("--a", type=float, default=0.0)
    p.add_argument("--b", type=float, default=0.0)
    p.add_argument("--level", type=float, default=0.95)
    p = _leaf(eb, "uv", _cmd_eb_uv, "unbiased u,v estimate")
    p.add_argument("--u", default="one", help="utility: indicator:a, leq:a, identity or one")

    sp = group("species", "number of unseen classes")
    p = _leaf(sp, "fit-gamma", _cmd_species_fit_gamma, "gamma-mixture conditional MLE")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--fitted-out", help="write k,observed,fitted CSV here")
    p = _leaf(sp, "chao", _cmd_species_chao, "Chao lower bound")
    p.add_argument("--corrected", action="store_true")
    p = _leaf(sp, "nbreg", _cmd_species_nbreg, "ratio regression estimate")
    p.add_argument("--m", type=int)
    p.add_argument("--weights", choices=["unit", "inverse-count"], default="unit")
    p.add_argument("--variant", choices=["ratio-consistent", "shifted-count"], default="ratio-consistent")
    p = _leaf(sp, "npmle", _cmd_species_npmle, "nonparametric mixing MLE")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=10_000)

    nd = group("netdeg", "node degrees from sampled paths")
    p = _leaf(nd, "simulate", _cmd_netdeg_simulate, "sample paths and write k,l,count", with_input=False)
    p.add_argument("--routing", required=True, help="routing table file")
    p.add_argument("--n", type=int, required=True, help="number of sampled paths")
    p.add_argument("--node-count", type=int)
    p.add_argument("--seed", type=int)
    for name, func, help_text in (
        ("tabulate", _cmd_netdeg_tabulate, "per-node frequency tables"),
        ("estimate", _cmd_netdeg_estimate, "per-node degree estimates"),
    ):
        p = _leaf(nd, name, func, help_text, with_input=False)
        p.add_argument("--links", required=True, help="link-count CSV k,l,count")
        p.add_argument("--routing", help="routing table (enables unobserved-degree output)")
        p.add_argument("--node-count", type=int)
    p.add_argument("--method", choices=["pooled-npmle", "per-node-gamma", "chao", "observed"], default="pooled-npmle")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=10_000)
    p.add_argument("--table-out", help="write node,observed_degree,estimate,se,method CSV here")

    rk = group("risk", "disclosure risk of sample uniques")
    for name, help_text in (
        ("poisson", "Poisson population model"),
        ("nb", "negative-binomial population model"),
        ("argus", "mu-ARGUS limit"),
        ("global", "global risk, optionally fitting cell probabilities"),
    ):
        func = _cmd_risk_global if name == "global" else _cmd_risk(name)
        p = _leaf(rk, name, func, help_text)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--nb-alpha", type=float)
        p.add_argument("--nb-beta", type=float)
        p.add_argument("--kind", choices=["inverse-y-at-1", "inverse-y-at-x<=a"], default="inverse-y-at-1")
        p.add_argument("--a", type=int, default=1)
        p.add_argument("--cells-out", help="write cell_id,risk CSV here")
        if name == "global":
            p.add_argument("--model", choices=["poisson", "nb", "argus"], default="poisson")
            p.add_argument("--fit-pi", choices=["known", "two-way-independence"], default="known")
            p.add_argument("--two-way", action="store_true", help="input is row,col,x,p")

    sm = group("sim", "Monte Carlo scenarios")
    p = _leaf(sm, "run", _cmd_sim_run, "run a scenario file", with_input=False)
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--replicates-out", help="write rep,estimate,truth,se,covered CSV here")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    try:
        result = args.func(args)
    except DataError as exc:
        print(f"sumlab: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        rep = EstimateReport(
            estimate=0.0,
            method=f"{args.group}:{args.command}",
            diagnostics=Diagnostics(converged=False, warnings=[f"{type(exc).__name__}: {exc}"]),
        )
        _emit(report_to_json(_with_flags(rep, args)), args.out)
        print(f"sumlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        print(f"sumlab: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    if isinstance(result, EstimateReport):
        _emit(report_to_json(result), args.out)
        return EXIT_OK if result.diagnostics.converged else EXIT_NUMERIC
    _emit(result, args.out)
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

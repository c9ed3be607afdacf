"""``geoq`` command line: solve, approx, compare, sweep, verify, simulate, tables.

Exit codes: 0 success, 1 invalid input, 2 numerical failure. Results go to
stdout (or ``--out``); diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import diffusion, experiments, markov, sim
from .metrics import METRIC_NAMES, Metrics
from .model import (
    ArrivalModel,
    ConfigError,
    QueueParams,
    Regime,
    RegimeSpec,
    default_arrivals,
    generate_scenarios,
    load_scenario_config,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
NUMERIC_ERRORS = (markov.ConvergenceError, diffusion.NormalizationError, ArithmeticError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for numerical failure here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# argument definitions


def _scenario_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scenario (inline flags or --config)")
    g.add_argument("--config", type=Path, help="JSON scenario file")
    g.add_argument("--servers", type=int, help="number of servers N")
    rate = g.add_mutually_exclusive_group()
    rate.add_argument("--arrival-rate", type=float, help="mean arrivals per epoch, Lambda")
    rate.add_argument("--load", type=float, help="utilization rho; Lambda = rho*N*mu")
    svc = g.add_mutually_exclusive_group()
    svc.add_argument("--service-prob", type=float, help="per-epoch departure probability mu")
    svc.add_argument("--service-days", type=float, help="mean length of stay d; mu = 1/d")


def _output_args(p: argparse.ArgumentParser, formats=("pretty", "json", "csv")) -> None:
    p.add_argument("--format", choices=formats, default="pretty")
    p.add_argument("--out", type=Path, help="write results here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geoq", description="Discrete-time many-server queue: exact chain and diffusion approximations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="stationary distribution of the census chain")
    _scenario_args(p)
    _output_args(p)
    p.add_argument("--method", choices=("banded", "power", "dense"), default="banded")
    p.add_argument("--tol", type=float, default=markov.DEFAULT_TOL)
    p.add_argument("--pmf-out", type=Path, help="also write the pmf as CSV (+ .meta sidecar)")

    p = sub.add_parser("approx", help="diffusion approximation of the census")
    _scenario_args(p)
    _output_args(p)
    p.add_argument("--variant", choices=[v.value for v in diffusion.Variant], default="state_dependent")
    p.add_argument("--density-out", type=Path, help="also write x, pdf, cdf as CSV")

    p = sub.add_parser("compare", help="exact vs both diffusions with errors")
    _scenario_args(p)
    _output_args(p)
    p.add_argument("--no-wasserstein", action="store_true")

    p = sub.add_parser("sweep", help="scale a scenario along a load regime")
    _scenario_args(p)
    _output_args(p)
    p.add_argument("--regime", choices=[r.value.lower() for r in Regime])
    p.add_argument("--beta", type=float, help="spare-capacity coefficient (default: from the baseline)")
    p.add_argument("--gamma", type=float, help="mu = gamma*R^-s (default: keeps baseline mu)")
    p.add_argument("--s", type=float, default=None, help="service-scaling exponent s")
    p.add_argument("--multipliers", type=float, nargs="+", help="load multipliers (default 1 2 3 4 6 8)")
    p.add_argument("--variants", nargs="+", default=["exact", "state_dependent"],
                   choices=[v.value for v in experiments.Variant])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("verify", help="check pi against BAR, flow balance and the moment bounds")
    _scenario_args(p)
    _output_args(p)

    p = sub.add_parser("simulate", help="Monte Carlo census histogram")
    _scenario_args(p)
    _output_args(p)
    p.add_argument("--epochs", type=int, default=100_000, help="sampled epochs per replication")
    p.add_argument("--replications", type=int, default=10)
    p.add_argument("--warmup", type=int, default=None, help="discarded epochs (default ceil(50/mu))")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--histogram-out", type=Path)

    p = sub.add_parser("tables", help="run builtin reproduction tables")
    p.add_argument("names", nargs="*", default=["all"], help="table names or groups (table1..table6, c7..c14, all)")
    p.add_argument("--list", action="store_true", help="list builtin tables and exit")
    p.add_argument("--include-slow", action="store_true", help=f"also run rows with N > {experiments.SLOW_N}")
    p.add_argument("--out-dir", type=Path, default=None, help="report root (default $GEOQ_OUT_DIR)")
    p.add_argument("--format", choices=("pretty", "json", "csv"), default="pretty")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sim", action="store_true", help="add a simulation column")
    return parser


# --------------------------------------------------------------------------
# helpers


def scenario_from_args(args) -> tuple[QueueParams, ArrivalModel, Optional[RegimeSpec]]:
    inline = [args.servers, args.arrival_rate, args.load, args.service_prob, args.service_days]
    if args.config is not None:
        if any(v is not None for v in inline):
            raise ConfigError("give the scenario either inline or with --config, not both")
        return load_scenario_config(args.config)
    if args.servers is None:
        raise ConfigError("missing --servers (or --config)")
    if args.service_prob is not None:
        mu = args.service_prob
    elif args.service_days is not None:
        if not args.service_days > 1:
            raise ConfigError("--service-days must exceed 1")
        mu = 1.0 / args.service_days
    else:
        raise ConfigError("missing --service-prob or --service-days")
    if args.arrival_rate is not None:
        params = QueueParams(args.servers, args.arrival_rate, mu)
    elif args.load is not None:
        params = QueueParams.from_utilization(args.servers, args.load, mu)
    else:
        raise ConfigError("missing --arrival-rate or --load")
    return params, default_arrivals(params), None


def _params_dict(p: QueueParams) -> dict:
    return {"N": p.n_servers, "Lambda": p.arrival_rate, "mu": p.service_prob, "R": p.offered_load,
            "rho": p.utilization, "zeta": p.zeta}


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _metrics_text(fmt: str, params: QueueParams, columns: dict[str, Metrics], extra: Optional[dict] = None) -> str:
    """Render one or more metric sets (name -> Metrics) in the chosen format."""
    if fmt == "json":
        doc = {"params": _params_dict(params), **{k: m.as_dict() for k, m in columns.items()}}
        doc.update(extra or {})
        return json.dumps(doc, indent=2) + "\n"
    if fmt == "csv":
        rows = [["metric", *columns]]
        rows += [[m, *(repr(getattr(c, m)) for c in columns.values())] for m in METRIC_NAMES]
        return _csv(rows)
    head = f"N={params.n_servers}  R={params.offered_load:.4f}  mu={params.service_prob:.6g}  rho={params.utilization:.4f}\n"
    width = max(len(m) for m in METRIC_NAMES)
    lines = [head, " " * width + "".join(f"{k:>14}" for k in columns)]
    for m in METRIC_NAMES:
        lines.append(m.ljust(width) + "".join(f"{getattr(c, m):>14.4f}" for c in columns.values()))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# subcommands


def cmd_solve(args) -> int:
    params, arrivals, _ = scenario_from_args(args)
    pmf = markov.solve(params, arrivals, tol=args.tol, method=args.method)
    if args.pmf_out:
        markov.write_pmf_csv(pmf, args.pmf_out, {"params": _params_dict(params)})
    info = {"K": pmf.top, "residual": pmf.residual, "truncation_mass": pmf.truncation_mass, "method": pmf.method}
    _emit(_metrics_text(args.format, params, {"exact": markov.exact_metrics(pmf, params)}, {"solver": info}), args.out)
    return EXIT_OK


def cmd_approx(args) -> int:
    params, arrivals, _ = scenario_from_args(args)
    dens = diffusion.build_density(params, arrivals, variant=diffusion.Variant(args.variant))
    if args.density_out:
        dens.write_csv(args.density_out)
    _emit(_metrics_text(args.format, params, {args.variant: diffusion.approx_metrics(dens, params)}), args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    params, arrivals, _ = scenario_from_args(args)
    pmf = markov.solve(params, arrivals)
    reports = {}
    for v in diffusion.Variant:
        dens = diffusion.build_density(params, arrivals, variant=v)
        reports[v.value] = diffusion.distance_report(pmf, dens, params, not args.no_wasserstein)
    exact = next(iter(reports.values())).exact
    if args.format == "json":
        doc = {"params": _params_dict(params), "exact": exact.as_dict()}
        for k, r in reports.items():
            doc[k] = {"metrics": r.approx.as_dict(), "scaled_error": r.scaled, "relative_error": r.relative,
                      "wasserstein": r.wasserstein}
        _emit(json.dumps(doc, indent=2) + "\n", args.out)
        return EXIT_OK
    if args.format == "csv":
        rows = [["metric", "exact", *(f"{k}{s}" for k in reports for s in ("", "_scaled_error", "_relative_error"))]]
        for m in METRIC_NAMES:
            row = [m, repr(getattr(exact, m))]
            for r in reports.values():
                rel = r.relative[m]
                row += [repr(getattr(r.approx, m)), repr(r.scaled[m]), "" if rel is None else repr(rel)]
            rows.append(row)
        _emit(_csv(rows), args.out)
        return EXIT_OK
    sd, cc = reports["state_dependent"], reports["constant_coeff"]
    lines = [
        f"N={params.n_servers}  R={params.offered_load:.4f}  mu={params.service_prob:.6g}  rho={params.utilization:.4f}",
        "",
        f"{'metric':<14}{'Exact':>10}{'Stein':>10}{'scaled':>9}{'rel':>9}{'Y0':>10}{'scaled':>9}{'rel':>9}",
    ]

    def pct(v):
        return "-" if v is None else f"{100 * v:.2f}%"

    for m in METRIC_NAMES:
        lines.append(
            f"{m:<14}{getattr(exact, m):>10.2f}"
            f"{getattr(sd.approx, m):>10.2f}{pct(sd.scaled[m]):>9}{pct(sd.relative[m]):>9}"
            f"{getattr(cc.approx, m):>10.2f}{pct(cc.scaled[m]):>9}{pct(cc.relative[m]):>9}"
        )
    if sd.wasserstein is not None:
        lines += ["", f"Wasserstein distance: Stein {sd.wasserstein:.4g}, Y0 {cc.wasserstein:.4g}"]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    params, _, spec = scenario_from_args(args)
    if args.regime is not None or spec is None:
        if args.regime is None:
            raise ConfigError("sweep needs --regime (or a config with a regime)")
        spec = RegimeSpec(
            Regime(args.regime.upper()),
            args.s if args.s is not None else 0.0,
            tuple(args.multipliers or experiments.MULTIPLIERS),
            args.beta,
            args.gamma,
        )
    scenarios = generate_scenarios(spec, params)
    table = experiments.TableSpec(
        f"sweep_{spec.regime.value.lower()}",
        [experiments.Row(p, f"{m:g}") for m, p in zip(spec.load_multipliers, scenarios)],
        set(args.variants),
        title=f"{spec.regime.value} sweep, s={spec.s_exponent:g}",
        label_header="m",
    )
    report = experiments.run_table(table, include_slow=True, jobs=args.jobs,
                                   sim_config=sim.SimConfig(seed=args.seed))
    _emit(_report_text(report, args.format), args.out)
    return EXIT_NUMERIC if any(r.error for r in report.rows) else EXIT_OK


def _report_text(report: experiments.TableReport, fmt: str) -> str:
    if fmt == "csv":
        return report.to_csv()
    if fmt == "json":
        return json.dumps({"table": report.spec.name, "rows": report.to_records()}, indent=2) + "\n"
    return report.render()


def cmd_verify(args) -> int:
    params, arrivals, _ = scenario_from_args(args)
    pmf = markov.solve(params, arrivals)
    checks = [(c.name, c.lhs, c.rhs, c.passed) for c in markov.verify_bounds(pmf, params)]
    total = float(pmf.probs.sum())
    checks.append(("pmf_sums_to_one", total, 1.0, abs(total - 1.0) <= 1e-10))
    busy = markov.exact_metrics(pmf, params).busy
    checks.append(("flow_balance", params.service_prob * busy, params.arrival_rate,
                   abs(params.service_prob * busy - params.arrival_rate) <= 1e-8 * max(1.0, params.arrival_rate)))
    for name, coeffs in (("bar_f=1", (1.0,)), ("bar_f=x", (0.0, 1.0)), ("bar_f=x^2", (0.0, 0.0, 1.0))):
        res = markov.check_bar(pmf, params, arrivals, coeffs)
        checks.append((name, res, 0.0, res < 1e-8))
    ok = all(c[3] for c in checks)
    if args.format == "json":
        text = json.dumps({"params": _params_dict(params), "passed": ok,
                           "checks": [{"name": n, "value": a, "reference": b, "passed": p} for n, a, b, p in checks]},
                          indent=2) + "\n"
    elif args.format == "csv":
        text = _csv([["check", "value", "reference", "passed"]] + [[n, repr(a), repr(b), p] for n, a, b, p in checks])
    else:
        text = "".join(f"{'PASS' if p else 'FAIL'}  {n:<24} {a:.6g}  (reference {b:.6g})\n" for n, a, b, p in checks)
    _emit(text, args.out)
    if not ok:
        print("geoq: verification failed", file=sys.stderr)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_simulate(args) -> int:
    params, arrivals, _ = scenario_from_args(args)
    cfg = sim.SimConfig(args.epochs, args.replications, args.seed, args.warmup)
    res = sim.simulate_census(params, arrivals, cfg)
    if res.overflow:
        print("geoq: warning: census exceeded the histogram range", file=sys.stderr)
    if args.histogram_out:
        sim.write_histogram_csv(res, args.histogram_out)
    if args.format == "json":
        doc = {"params": _params_dict(params), "metrics": res.metrics.as_dict(), "half_width": res.half_width,
               "departure_rate": res.departure_rate, "departure_half_width": res.departure_half_width,
               "seed": cfg.seed, "rng": sim.RNG_ALGORITHM}
        text = json.dumps(doc, indent=2) + "\n"
    elif args.format == "csv":
        text = _csv([["metric", "estimate", "half_width"]]
                    + [[m, repr(getattr(res.metrics, m)), repr(res.half_width[m])] for m in METRIC_NAMES])
    else:
        text = "".join(f"{m:<14}{getattr(res.metrics, m):>12.4f} +/- {res.half_width[m]:.4f}\n" for m in METRIC_NAMES)
        text += f"{'departures':<14}{res.departure_rate:>12.4f} +/- {res.departure_half_width:.4f}  (Lambda {params.arrival_rate:.4f})\n"
    _emit(text, args.out)
    return EXIT_OK


def cmd_tables(args) -> int:
    if args.list:
        for name, spec in experiments.builtin_specs().items():
            print(f"{name:<12} {spec.title}")
        return EXIT_OK
    specs = experiments.resolve(args.names)
    out_dir = args.out_dir or (Path(os.environ["GEOQ_OUT_DIR"]) if os.environ.get("GEOQ_OUT_DIR") else None)
    failed = False
    for spec in specs:
        if args.sim:
            spec = experiments.TableSpec(**{**spec.__dict__, "variants": spec.variants | {experiments.Variant.SIM}})
        report = experiments.run_table(spec, args.include_slow, args.jobs, sim.SimConfig(seed=args.seed))
        failed |= any(r.error for r in report.rows)
        if out_dir is not None:
            d = experiments.write_report(report, out_dir)
            print(f"geoq: wrote {d}", file=sys.stderr)
        sys.stdout.write(_report_text(report, args.format))
        if args.format == "pretty":
            sys.stdout.write("\n")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "solve": cmd_solve, "approx": cmd_approx, "compare": cmd_compare, "sweep": cmd_sweep,
    "verify": cmd_verify, "simulate": cmd_simulate, "tables": cmd_tables,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"geoq: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"geoq: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NUMERIC_ERRORS as exc:
        print(f"geoq: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"geoq: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

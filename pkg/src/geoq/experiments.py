"""Regime sweeps and the builtin reproduction tables.

A :class:`TableSpec` lists scenarios and which variants to evaluate on
each: the exact chain, the state-dependent and constant-coefficient
diffusions, and (optionally) simulation. Rows carry the published values
for the table's headline metric so reports can be diffed by eye.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from . import diffusion, markov, sim
from .metrics import LIPSCHITZ_METRICS, METRIC_NAMES, Metrics, relative_error, scaled_error
from .model import ConfigError, QueueParams, Regime, RegimeSpec

log = logging.getLogger(__name__)

# Exact rows above this N are defined but skipped unless asked for.
SLOW_N = 2000


class Variant(str, enum.Enum):
    EXACT = "exact"
    STATE_DEPENDENT = "state_dependent"
    CONSTANT_COEFF = "constant_coeff"
    SIM = "sim"


APPROX_VARIANTS = (Variant.STATE_DEPENDENT, Variant.CONSTANT_COEFF, Variant.SIM)


@dataclass(frozen=True)
class Row:
    params: QueueParams
    label: str = ""
    reference: dict = field(default_factory=dict, compare=False)

    @property
    def slow(self) -> bool:
        return self.params.n_servers > SLOW_N


@dataclass(frozen=True)
class TableSpec:
    name: str
    rows: tuple
    variants: frozenset = frozenset({Variant.EXACT, Variant.STATE_DEPENDENT})
    metric: str = "queue_len"
    error_kind: str = "scaled"  # or "relative"
    title: str = ""
    label_header: str = ""
    wasserstein: bool = False
    # (regime spec, baseline) the rows were generated from, when they were
    sweep: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "variants", frozenset(Variant(v) for v in self.variants))
        if not self.rows:
            raise ConfigError(f"table {self.name!r} has no scenarios")
        if not self.variants:
            raise ConfigError(f"table {self.name!r} has an empty variant set")
        if self.variants - {Variant.EXACT} and Variant.EXACT not in self.variants:
            raise ConfigError(f"table {self.name!r}: error columns need the exact variant")
        if self.metric not in METRIC_NAMES:
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.error_kind not in ("scaled", "relative"):
            raise ConfigError(f"unknown error kind {self.error_kind!r}")


@dataclass(frozen=True)
class VariantResult:
    metrics: Metrics
    scaled_error: dict = field(default_factory=dict)
    relative_error: dict = field(default_factory=dict)
    wasserstein: Optional[float] = None
    half_width: Optional[dict] = None
    runtime_seconds: float = 0.0


@dataclass(frozen=True)
class RowReport:
    index: int
    row: Row
    results: dict  # Variant -> VariantResult
    error: Optional[str] = None


@dataclass(frozen=True)
class TableReport:
    spec: TableSpec
    rows: tuple

    def column(self, variant=Variant.STATE_DEPENDENT, kind: Optional[str] = None, metric: Optional[str] = None):
        """Per-row values: a metric (kind=None) or its 'scaled'/'relative' error."""
        variant, metric = Variant(variant), metric or self.spec.metric
        out = []
        for r in self.rows:
            res = r.results.get(variant)
            if res is None:
                out.append(None)
            elif kind is None:
                out.append(getattr(res.metrics, metric))
            else:
                out.append(getattr(res, f"{kind}_error").get(metric))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["table", "row", "label", "N", "R", "mu", "Lambda", "variant", *METRIC_NAMES]
        header += [f"scaled_error_{m}" for m in METRIC_NAMES]
        header += [f"relative_error_{m}" for m in METRIC_NAMES]
        header += ["wasserstein", "error"]
        w.writerow(header)
        for r in self.rows:
            p = r.row.params
            base = [self.spec.name, r.index, r.row.label, p.n_servers, _fmt(p.offered_load), _fmt(p.service_prob), _fmt(p.arrival_rate)]
            if r.error:
                w.writerow(base + [""] * (len(header) - len(base) - 1) + [r.error])
                continue
            for v in Variant:
                res = r.results.get(v)
                if res is None:
                    continue
                vals = [_fmt(getattr(res.metrics, m)) for m in METRIC_NAMES]
                vals += [_fmt(res.scaled_error.get(m)) for m in METRIC_NAMES]
                vals += [_fmt(res.relative_error.get(m)) for m in METRIC_NAMES]
                w.writerow(base + [v.value] + vals + [_fmt(res.wasserstein), ""])
        return buf.getvalue()

    def to_records(self) -> list[dict]:
        recs = []
        for r in self.rows:
            p = r.row.params
            rec = {
                "row": r.index, "label": r.row.label, "N": p.n_servers, "R": p.offered_load,
                "mu": p.service_prob, "Lambda": p.arrival_rate, "error": r.error, "variants": {},
            }
            for v, res in r.results.items():
                rec["variants"][v.value] = {
                    "metrics": res.metrics.as_dict(),
                    "scaled_error": res.scaled_error,
                    "relative_error": res.relative_error,
                    "wasserstein": res.wasserstein,
                    "half_width": res.half_width,
                }
            if r.row.reference:
                rec["reference"] = r.row.reference
            recs.append(rec)
        return recs

    def meta(self) -> dict:
        return {
            "table": self.spec.name,
            "title": self.spec.title,
            "metric": self.spec.metric,
            "error_kind": self.spec.error_kind,
            "variants": sorted(v.value for v in self.spec.variants),
            "rng": sim.RNG_ALGORITHM if Variant.SIM in self.spec.variants else None,
            "runtime_seconds": {
                str(r.index): {v.value: res.runtime_seconds for v, res in r.results.items()} for r in self.rows
            },
            "failed_rows": [r.index for r in self.rows if r.error],
        }

    def render(self, reference: bool = True) -> str:
        """Plain-text table laid out like the published one."""
        spec = self.spec
        approx = [v for v in APPROX_VARIANTS if v in spec.variants]
        err_name = "scaled err" if spec.error_kind == "scaled" else "rel err"
        head = [spec.label_header or "row", "N", "R", "mu"]
        for v in approx:
            head += [_short(v), f"{err_name}"]
        if Variant.EXACT in spec.variants:
            head.insert(4, "Exact")
        lines = []
        for r in self.rows:
            p = r.row.params
            cells = [r.row.label or str(r.index), str(p.n_servers), f"{p.offered_load:.2f}", f"{p.service_prob:.3f}"]
            if r.error:
                lines.append(cells + [f"FAILED: {r.error}"])
                continue
            if Variant.EXACT in spec.variants:
                cells.append(_cell(r.results[Variant.EXACT].metrics, spec.metric, r.row.reference.get("exact"), reference))
            for v in approx:
                res = r.results[v]
                cells.append(_cell(res.metrics, spec.metric, r.row.reference.get(v.value), reference))
                err = getattr(res, f"{spec.error_kind}_error").get(spec.metric)
                ref = r.row.reference.get(f"{v.value}_error")
                txt = "-" if err is None else f"{100 * err:.2f}%"
                if reference and ref is not None:
                    txt += f" ({ref:.2f}%)"
                cells.append(txt)
            lines.append(cells)
        widths = [max(len(str(c)) for c in col) for col in zip(head, *[ln for ln in lines if len(ln) == len(head)])]
        out = [spec.title] if spec.title else []
        out.append("  ".join(h.rjust(w) for h, w in zip(head, widths)))
        for ln in lines:
            if len(ln) == len(head):
                out.append("  ".join(c.rjust(w) for c, w in zip(ln, widths)))
            else:
                out.append("  ".join(ln))
        if reference and any(r.row.reference for r in self.rows):
            out.append("(published values in parentheses)")
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _short(v: Variant) -> str:
    return {"state_dependent": "Stein", "constant_coeff": "Y0", "sim": "Sim"}[v.value]


def _cell(m: Metrics, metric: str, ref, reference: bool) -> str:
    txt = f"{getattr(m, metric):.2f}"
    if reference and ref is not None:
        txt += f" ({ref:.2f})"
    return txt


def _errors(exact: Metrics, approx: Metrics, params: QueueParams) -> tuple[dict, dict]:
    scaled, rel = {}, {}
    for m in METRIC_NAMES:
        e, a = getattr(exact, m), getattr(approx, m)
        scaled[m] = scaled_error(e, a, params.offered_load) if m in LIPSCHITZ_METRICS else abs(e - a)
        rel[m] = relative_error(e, a)
    return scaled, rel


def evaluate_row(index: int, row: Row, variants: frozenset, wasserstein: bool = False,
                 sim_config: Optional[sim.SimConfig] = None) -> RowReport:
    """All requested variants for one scenario; failures become a diagnostic."""
    params = row.params
    results = {}
    try:
        pmf = exact = None
        if Variant.EXACT in variants:
            t0 = time.perf_counter()
            pmf = markov.solve(params)
            exact = markov.exact_metrics(pmf, params)
            results[Variant.EXACT] = VariantResult(exact, runtime_seconds=time.perf_counter() - t0)
        for v, dv in ((Variant.STATE_DEPENDENT, diffusion.Variant.STATE_DEPENDENT),
                      (Variant.CONSTANT_COEFF, diffusion.Variant.CONSTANT_COEFF)):
            if v not in variants:
                continue
            t0 = time.perf_counter()
            dens = diffusion.build_density(params, variant=dv)
            approx = diffusion.approx_metrics(dens, params)
            scaled, rel = _errors(exact, approx, params) if exact else ({}, {})
            dw = diffusion.wasserstein(pmf, dens, params) if wasserstein and pmf is not None else None
            results[v] = VariantResult(approx, scaled, rel, dw, runtime_seconds=time.perf_counter() - t0)
        if Variant.SIM in variants:
            t0 = time.perf_counter()
            res = sim.simulate_census(params, cfg=sim_config or sim.SimConfig())
            scaled, rel = _errors(exact, res.metrics, params) if exact else ({}, {})
            results[Variant.SIM] = VariantResult(res.metrics, scaled, rel, None, res.half_width,
                                                 time.perf_counter() - t0)
    except (ArithmeticError, RuntimeError, ValueError, MemoryError) as exc:
        log.warning("row %d (%s) failed: %s", index, row.label, exc)
        return RowReport(index, row, results, f"{type(exc).__name__}: {exc}")
    return RowReport(index, row, results)


def _evaluate_star(args):
    return evaluate_row(*args)


def run_table(spec: TableSpec, include_slow: bool = False, jobs: int = 1,
              sim_config: Optional[sim.SimConfig] = None) -> TableReport:
    """Evaluate every row of ``spec``; row order in the report is stable.

    Rows with N above SLOW_N are skipped unless ``include_slow``.
    """
    rows = [(i, r) for i, r in enumerate(spec.rows) if include_slow or not r.slow]
    if not rows:
        raise ConfigError(f"table {spec.name!r}: every row is marked slow; pass include_slow")
    tasks = [(i, r, spec.variants, spec.wasserstein, sim_config) for i, r in rows]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_evaluate_star, tasks))
    else:
        reports = [_evaluate_star(t) for t in tasks]
    return TableReport(spec, tuple(reports))


def write_report(report: TableReport, out_dir) -> Path:
    """<out_dir>/<table>/report.csv, report.meta (JSON) and report.txt."""
    d = Path(out_dir) / report.spec.name
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.csv").write_text(report.to_csv())
    (d / "report.meta").write_text(json.dumps(report.meta(), indent=2) + "\n")
    (d / "report.txt").write_text(report.render())
    return d


class Trend(str, enum.Enum):
    DECREASING = "decreasing"
    INCREASING = "increasing"
    BELOW_BOUND = "below_bound"


@dataclass(frozen=True)
class TrendResult:
    passed: bool
    values: tuple
    offending: Optional[tuple] = None  # (i, j) row indices, or (i,) for a bound


def trend_check(values, expectation, *, bound: Optional[float] = None, decimals: Optional[int] = None,
                variant=Variant.STATE_DEPENDENT, kind: str = "scaled", metric: Optional[str] = None) -> TrendResult:
    """Strict monotonicity (or a bound) of a column ordered by R.

    ``values`` is a sequence or a :class:`TableReport` (then the ``kind``
    error column of ``variant`` is used). With ``decimals`` the values are
    rounded first, so consecutive equal-at-that-precision values count as
    ties, and ties fail a strict check.
    """
    if isinstance(values, TableReport):
        values = values.column(variant, kind, metric)
    vals = [float(v) for v in values]
    if len(vals) < 3:
        raise ValueError("trend check needs at least 3 rows")
    if decimals is not None:
        vals = [round(v, decimals) for v in vals]
    exp = Trend(expectation)
    if exp is Trend.BELOW_BOUND:
        if bound is None:
            raise ValueError("below_bound needs a bound")
        for i, v in enumerate(vals):
            if not v < bound:
                return TrendResult(False, tuple(vals), (i,))
        return TrendResult(True, tuple(vals))
    for i in range(len(vals) - 1):
        a, b = vals[i], vals[i + 1]
        ok = b < a if exp is Trend.DECREASING else b > a
        if not ok:
            return TrendResult(False, tuple(vals), (i, i + 1))
    return TrendResult(True, tuple(vals))


# --------------------------------------------------------------------------
# builtin tables

MU_BASE = 1 / 5.3
QED_ROWS = ((504, 482.06), (995, 963.97), (1484, 1446.00), (1972, 1928.12), (2946, 2892.25), (3919, 3856.93))
NDS_ROWS = ((495, 482.0), (977, 964.0), (1459, 1446.0), (1941, 1928.0), (2905, 2892.0), (3869, 3856.0))
QD_ROWS = ((530, 482.06), (1061, 965.02), (1591, 1447.08), (2121, 1929.14), (3182, 2894.16), (4242, 3858.28))
MULTIPLIERS = (1, 2, 3, 4, 6, 8)
UTILIZATIONS = (0.88, 0.90, 0.92, 0.94, 0.96)


def _ref(stein, exact, err, key="state_dependent"):
    return [{key: s, "exact": e, f"{key}_error": r} for s, e, r in zip(stein, exact, err)]


def _sweep_table(name, title, rows, gamma, s, refs, regime, beta, metric="queue_len"):
    out = []
    for m, (n, r), ref in zip(MULTIPLIERS, rows, refs):
        mu = MU_BASE if s == 0 else gamma * r ** (-s)
        out.append(Row(QueueParams.from_load(n, r, mu), f"{m}", ref))
    base = QueueParams.from_load(rows[0][0], rows[0][1], MU_BASE)
    sweep = (RegimeSpec(regime, s, MULTIPLIERS, beta, None if s == 0 else gamma), base)
    return TableSpec(name, out, {Variant.EXACT, Variant.STATE_DEPENDENT}, metric, "scaled", title, "m", sweep=sweep)


def _util_table(name, title, n, refs, metric="queue_len"):
    rows = [Row(QueueParams.from_utilization(n, rho, MU_BASE), f"{round(100 * rho)}%", ref)
            for rho, ref in zip(UTILIZATIONS, refs)]
    return TableSpec(name, rows, {Variant.EXACT, Variant.STATE_DEPENDENT, Variant.CONSTANT_COEFF},
                     metric, "relative", title, "rho")


def _mu_table(name, title, n, r, refs):
    rows = [Row(QueueParams.from_load(n, r, 1.0 / d), f"{d}", ref) for d, ref in zip(range(2, 11), refs)]
    return TableSpec(name, rows, {Variant.EXACT, Variant.STATE_DEPENDENT, Variant.CONSTANT_COEFF},
                     "queue_len", "relative", title, "1/mu")


def _two_variant_refs(exact, sd, sd_err, cc, cc_err):
    return [{"exact": e, "state_dependent": a, "state_dependent_error": ae, "constant_coeff": c, "constant_coeff_error": ce}
            for e, a, ae, c, ce in zip(exact, sd, sd_err, cc, cc_err)]


def builtin_specs() -> dict[str, TableSpec]:
    specs = [
        _sweep_table("table1", "QED, beta=0.9994, mu fixed at 1/5.3", QED_ROWS, None, 0,
                     _ref([4.78, 6.71, 8.20, 9.45, 11.55, 13.32], [4.57, 6.44, 7.85, 9.05, 11.05, 12.74],
                          [0.93, 0.89, 0.90, 0.91, 0.92, 0.92]), Regime.QED, 0.9994),
        _sweep_table("table2", "NDS, beta=13, mu fixed at 1/5.3", NDS_ROWS, None, 0,
                     _ref([14.94, 38.23, 63.82, 90.63, 146.38, 203.91], [15.02, 39.00, 65.49, 93.50, 152.56, 214.63],
                          [0.37, 2.46, 4.41, 6.55, 11.48, 17.27]), Regime.NDS, 13.0),
        _sweep_table("table3_s0.5", "QED, beta=0.9994, mu = 4.1426/R^(1/2)", QED_ROWS, 4.1426, 0.5,
                     _ref([4.78, 6.83, 8.39, 9.71, 11.92, 13.79], [4.57, 6.62, 8.18, 9.50, 11.71, 13.57],
                          [0.93, 0.66, 0.55, 0.48, 0.40, 0.35]), Regime.QED, 0.9994),
        _sweep_table("table3_s1", "QED, beta=0.9994, mu = 90.9542/R", QED_ROWS, 90.9542, 1.0,
                     _ref([4.78, 6.90, 8.50, 9.84, 12.07, 13.95], [4.57, 6.76, 8.38, 9.73, 11.98, 13.87],
                          [0.93, 0.48, 0.33, 0.25, 0.17, 0.13]), Regime.QED, 0.9994),
        _sweep_table("table4_s0.5", "NDS, beta=13, mu = 4.1424/R^(1/2)", NDS_ROWS, 4.1424, 0.5,
                     _ref([14.94, 39.46, 66.79, 95.62, 155.91, 218.35], [15.02, 39.60, 67.01, 95.89, 156.23, 218.72],
                          [0.37, 0.45, 0.56, 0.60, 0.60, 0.58]), Regime.NDS, 13.0),
        _sweep_table("table4_s1", "NDS, beta=13, mu = 90.9434/R", NDS_ROWS, 90.9434, 1.0,
                     _ref([15.02, 40.32, 68.51, 98.12, 159.80, 223.46], [14.95, 40.42, 68.63, 98.25, 159.93, 223.58],
                          [0.37, 0.31, 0.31, 0.29, 0.24, 0.20]), Regime.NDS, 13.0),
        _util_table("table5", "N = 18, mu = 1/5.3", 18, _two_variant_refs(
            [3.33, 4.65, 6.67, 9.93, 15.11], [3.32, 4.62, 6.68, 10.23, 17.55], [0.40, 0.51, 0.02, 3.00, 16.11],
            [3.47, 4.91, 7.18, 11.10, 19.19], [4.10, 5.62, 7.51, 11.81, 26.99])),
        _util_table("table6", "N = 66, mu = 1/5.3", 66, _two_variant_refs(
            [1.50, 2.48, 4.18, 7.34, 14.24], [1.57, 2.53, 4.19, 7.30, 14.14], [4.19, 1.72, 0.24, 0.51, 0.70],
            [1.53, 2.58, 4.42, 7.87, 15.45], [1.46, 3.77, 5.69, 7.26, 8.54])),
        _sweep_table("c7", "QD, beta=0.0995, mu fixed at 1/5.3", QD_ROWS, None, 0,
                     _ref([8.80, 12.31, 14.80, 17.08, 20.91, 24.15], [8.91, 12.40, 15.18, 17.52, 21.50, 24.78],
                          [0.48, 0.87, 0.98, 1.01, 1.10, 1.02]), Regime.QD, 0.0995, "adj_queue_len"),
        _sweep_table("c8_s0.5", "QD, beta=0.0995, mu = 4.1426/R^(1/2)", QD_ROWS, 4.1426, 0.5,
                     _ref([8.80, 12.21, 14.97, 17.31, 21.25, 24.57], [8.91, 12.40, 15.18, 17.52, 21.46, 24.78],
                          [0.48, 0.61, 0.55, 0.49, 0.40, 0.34]), Regime.QD, 0.0995, "adj_queue_len"),
        _sweep_table("c8_s1", "QD, beta=0.0995, mu = 90.9542/R", QD_ROWS, 90.9542, 1.0,
                     _ref([8.80, 12.27, 15.06, 17.42, 21.38, 24.71], [8.91, 12.40, 15.18, 17.52, 21.46, 24.78],
                          [0.48, 0.43, 0.32, 0.24, 0.16, 0.12]), Regime.QD, 0.0995, "adj_queue_len"),
        _sweep_table("c9", "QED, beta=0.9994, mu = 1996.9729/R^(3/2)", QED_ROWS, 1996.9729, 1.5,
                     _ref([4.78, 6.96, 8.56, 9.90, 12.13, 14.00], [4.57, 6.85, 8.49, 9.85, 12.09, 13.98],
                          [0.93, 0.34, 0.19, 0.13, 0.07, 0.05]), Regime.QED, 0.9994),
        _sweep_table("c10", "NDS, beta=13, mu = 1996.6166/R^(3/2)", NDS_ROWS, 1996.6166, 1.5,
                     _ref([14.94, 40.93, 69.50, 99.37, 161.39, 225.27], [15.02, 41.00, 69.56, 99.43, 161.44, 225.31],
                          [0.37, 0.21, 0.18, 0.14, 0.10, 0.07]), Regime.NDS, 13.0),
        _util_table("c11", "N = 132, mu = 1/5.3 (adjusted queue length)", 132, _two_variant_refs(
            [4.87, 5.48, 6.65, 9.04, 14.80], [4.86, 5.48, 6.63, 8.99, 14.70], [0.13, 0.03, 0.20, 0.47, 0.72],
            [4.87, 5.52, 6.78, 9.41, 15.79], [0.02, 0.72, 2.07, 4.18, 6.67]), "adj_queue_len"),
        _util_table("c12", "N = 504, mu = 1/5.3 (adjusted queue length)", 504, _two_variant_refs(
            [8.42, 8.58, 8.95, 10.04, 13.69], [8.25, 8.46, 8.89, 10.04, 13.67], [2.02, 1.45, 0.66, 0.03, 0.13],
            [8.42, 8.58, 8.96, 10.12, 14.14], [0.04, 0.05, 0.06, 0.84, 3.30]), "adj_queue_len"),
        _mu_table("c13", "N = 18, R = 16.20, mu varies", 18, 16.2, _two_variant_refs(
            [3.88, 4.29, 4.50, 4.63, 4.71, 4.77, 4.81, 4.85, 4.88],
            [3.76, 4.22, 4.45, 4.59, 4.68, 4.75, 4.80, 4.84, 4.87],
            [3.22, 1.68, 1.06, 0.74, 0.54, 0.40, 0.31, 0.23, 0.18], [4.91] * 9,
            [26.41, 14.34, 9.08, 6.13, 4.25, 2.94, 1.97, 1.24, 0.65])),
        _mu_table("c14", "N = 66, R = 59.40, mu varies", 66, 59.4, _two_variant_refs(
            [2.09, 2.30, 2.41, 2.47, 2.51, 2.54, 2.57, 2.59, 2.60],
            [2.16, 2.36, 2.46, 2.51, 2.55, 2.58, 2.60, 2.62, 2.63],
            [3.26, 2.61, 2.12, 1.79, 1.56, 1.38, 1.25, 1.14, 1.05], [2.58] * 9,
            [23.32, 12.18, 7.21, 4.39, 2.58, 1.32, 0.39, 0.33, 0.89])),
    ]
    return {s.name: s for s in specs}


GROUPS = {
    "table3": ("table3_s0.5", "table3_s1"),
    "table4": ("table4_s0.5", "table4_s1"),
    "c8": ("c8_s0.5", "c8_s1"),
}


def resolve(names: Iterable[str]) -> list[TableSpec]:
    specs = builtin_specs()
    out = []
    for name in names:
        key = name.lower()
        if key == "all":
            return list(specs.values())
        if key in GROUPS:
            out.extend(specs[k] for k in GROUPS[key])
        elif key in specs:
            out.append(specs[key])
        else:
            known = sorted(set(specs) | set(GROUPS))
            raise ConfigError(f"unknown table {name!r}; known: {', '.join(known)}")
    return out

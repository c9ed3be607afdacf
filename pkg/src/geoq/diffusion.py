"""Stationary diffusion densities and their distance to the exact chain.

The density is p(x) proportional to exp(int_0^x 2b/a) / a(x). Both the
exponent and all expectations are computed with Gauss-Legendre panels whose
edges include the kinks of a and b (-sqrt(R), 0, -zeta), so each panel sees
a smooth integrand.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .markov import StationaryPMF, exact_metrics
from .metrics import LIPSCHITZ_METRICS, Metrics, relative_error, scaled_error
from .model import ArrivalKind, ArrivalModel, ConfigError, QueueParams, diffusion_a, drift_b

TAIL_NATS = 40.0
NORM_TOL = 1e-10


class Variant(str, enum.Enum):
    STATE_DEPENDENT = "state_dependent"
    CONSTANT_COEFF = "constant_coeff"


class NormalizationError(RuntimeError):
    pass


def _gauss(m: int):
    xi, wi = np.polynomial.legendre.leggauss(m)
    return (xi + 1.0) / 2.0, wi / 2.0


@dataclass(frozen=True)
class DiffusionDensity:
    params: QueueParams
    variant: Variant
    c_a: float
    grid: np.ndarray = field(repr=False)  # panel edges
    exponent: np.ndarray = field(repr=False)  # int_0^x 2b/a at the edges
    log_kappa: float
    cdf_grid: np.ndarray = field(repr=False)
    order: int = 8

    # -- coefficient functions -------------------------------------------------
    def a(self, x):
        if self.variant is Variant.CONSTANT_COEFF:
            return np.full_like(np.asarray(x, dtype=float), self.c_a * self.params.service_prob)
        return _a_with_ca(x, self.params, self.c_a)

    def ratio(self, x):
        """Integrand 2b(x)/a(x) of the exponent."""
        return 2.0 * drift_b(x, self.params) / self.a(x)

    # -- pointwise evaluation ----------------------------------------------------
    def _panel(self, x: np.ndarray) -> np.ndarray:
        return np.clip(np.searchsorted(self.grid, x, side="right") - 1, 0, self.grid.size - 2)

    def log_unnormalized(self, x) -> np.ndarray:
        """exponent(x) - log a(x), i.e. log p(x) before the constant kappa."""
        x = np.asarray(x, dtype=float)
        i = self._panel(x)
        return self.exponent[i] + _partial_integral(self.ratio, self.grid[i], x, self.order) - np.log(self.a(x))

    def logpdf(self, x) -> np.ndarray:
        return self.log_unnormalized(x) + self.log_kappa

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, self.grid[0], self.grid[-1])
        i = self._panel(xc)
        out = self.cdf_grid[i] + _partial_integral(self.pdf, self.grid[i], xc, self.order)
        return np.clip(out, 0.0, 1.0)

    # -- quadrature --------------------------------------------------------------
    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        xi, wi = _gauss(self.order)
        left, width = self.grid[:-1, None], np.diff(self.grid)[:, None]
        return (left + width * xi).ravel(), (width * wi).ravel()

    def expect(self, h: Callable) -> float:
        x, w = self.nodes()
        return float(np.sum(w * self.pdf(x) * h(x)))

    @property
    def kappa(self) -> float:
        return math.exp(self.log_kappa)

    def total_mass(self) -> float:
        return self.expect(np.ones_like)

    def write_csv(self, path) -> None:
        """Columns x, p(x), F(x) at the panel edges."""
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "pdf", "cdf"])
            for x, p, c in zip(self.grid, self.pdf(self.grid), self.cdf_grid):
                w.writerow([repr(float(x)), repr(float(p)), repr(float(c))])


def _a_with_ca(x, params: QueueParams, c_a: float):
    # Poisson a(x) shifted by c_A - 2 on every piece.
    return diffusion_a(x, params) + params.service_prob * (c_a - 2.0)


def _partial_integral(f: Callable, lo: np.ndarray, hi: np.ndarray, order: int) -> np.ndarray:
    """int_lo^hi f elementwise, with one Gauss-Legendre rule per pair."""
    xi, wi = _gauss(order)
    lo, hi = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float))
    width = (hi - lo)[..., None]
    pts = lo[..., None] + width * xi
    return np.sum(f(pts) * wi * width, axis=-1)


def _edges(breaks: list[float], spacing: float) -> np.ndarray:
    parts = []
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        k = max(1, math.ceil((hi - lo) / spacing))
        parts.append(np.linspace(lo, hi, k + 1)[:-1])
    parts.append(np.array([breaks[-1]]))
    return np.concatenate(parts)


def _assemble(params, variant, c_a, lo, hi, spacing, order) -> tuple[DiffusionDensity, float]:
    zeta, delta = params.zeta, params.delta
    breaks = sorted({lo, 0.0, -zeta, hi} | ({-1.0 / delta} if lo < -1.0 / delta else set()))
    grid = _edges(breaks, spacing)
    proto = DiffusionDensity(params, variant, c_a, grid, np.zeros(grid.size), 0.0, np.zeros(grid.size), order)
    panel = _partial_integral(proto.ratio, grid[:-1], grid[1:], order)
    i0 = int(np.flatnonzero(grid == 0.0)[0])
    expo = np.zeros(grid.size)
    expo[i0 + 1:] = np.cumsum(panel[i0:])
    expo[:i0] = -np.cumsum(panel[:i0][::-1])[::-1]
    proto = DiffusionDensity(params, variant, c_a, grid, expo, 0.0, np.zeros(grid.size), order)

    # Shift by the peak before exponentiating; kappa absorbs it.
    log_edges = expo - np.log(proto.a(grid))
    shift = float(np.max(log_edges))
    proto = DiffusionDensity(params, variant, c_a, grid, expo, -shift, np.zeros(grid.size), order)
    x, w = proto.nodes()
    mass = (w * proto.pdf(x)).reshape(-1, order).sum(axis=1)
    total = float(mass.sum())

    # Same panels, lower order: a cheap estimate of the quadrature error.
    coarse = DiffusionDensity(params, variant, c_a, grid, expo, -shift, np.zeros(grid.size), order - 2)
    xc, wc = coarse.nodes()
    err = abs(float(np.sum(wc * coarse.pdf(xc))) - total) / total

    cdf = np.concatenate([[0.0], np.cumsum(mass)]) / total
    dens = DiffusionDensity(params, variant, c_a, grid, expo, -shift - math.log(total), cdf, order)
    return dens, err


def build_density(
    params: QueueParams,
    arrivals: Optional[ArrivalModel] = None,
    variant: Variant = Variant.STATE_DEPENDENT,
    spacing: float = 0.05,
    order: int = 8,
    max_refine: int = 4,
) -> DiffusionDensity:
    """Normalized stationary density on a panel grid.

    The support is cut where the log-density is 40 nats below its peak.
    ``spacing`` is the panel width; it is halved until two quadrature orders
    agree on the total mass to 1e-10.
    """
    variant = Variant(variant)
    c_a = 2.0
    if arrivals is not None and arrivals.kind is ArrivalKind.GENERAL:
        arrivals.check_paired(params)
        c_a = arrivals.c_a
        if not c_a > 1:
            raise ConfigError(f"diffusion needs c_A > 1, got {c_a:.6g}")
    lo, hi = _support(params, variant, c_a)
    for _ in range(max_refine + 1):
        dens, err = _assemble(params, variant, c_a, lo, hi, spacing, order)
        if err < NORM_TOL:
            return dens
        spacing /= 2
    raise NormalizationError(f"quadrature did not settle (relative mass error {err:.2e})")


def _support(params: QueueParams, variant: Variant, c_a: float) -> tuple[float, float]:
    """Interval outside which log p is more than TAIL_NATS below its peak."""
    probe = DiffusionDensity(params, variant, c_a, np.array([0.0, 1.0]), np.zeros(2), 0.0, np.zeros(2))
    zeta = params.zeta

    def log_drop(x):
        # log p(0) - log p(x), by a fine trapezoid on the exponent
        t = np.linspace(0.0, x, 4001)
        f = probe.ratio(t)
        expo = float(np.sum((f[1:] + f[:-1]) / 2 * np.diff(t)))
        return -(expo - math.log(probe.a(x)) + math.log(probe.a(0.0)))

    lo = -8.0
    while log_drop(lo) < TAIL_NATS + 2:
        lo *= 1.5
    hi = max(8.0, -zeta + 8.0)
    while log_drop(hi) < TAIL_NATS + 2:
        hi = -zeta + 1.5 * (hi + zeta)
    return lo, hi


def approx_metrics(density: DiffusionDensity, params: Optional[QueueParams] = None) -> Metrics:
    params = params or density.params
    zeta, delta = params.zeta, params.delta
    sq = math.sqrt(params.offered_load)
    n_srv = params.n_servers
    return Metrics(
        queue_len=sq * density.expect(lambda x: np.maximum(x + zeta, 0.0)),
        adj_queue_len=sq * density.expect(lambda x: np.maximum(x, 0.0)),
        busy=sq * density.expect(lambda x: delta * n_srv - np.maximum(-(x + zeta), 0.0)),
        idle_prob=float(density.cdf(np.array(-zeta))),
    )


def wasserstein(pmf: StationaryPMF, density: DiffusionDensity, params: Optional[QueueParams] = None) -> float:
    """1-Wasserstein distance between the scaled exact law and the density.

    Computed as the integral of |F_exact - F_density| over the merged
    support. F_exact is a staircase, so each piece between breakpoints
    integrates |c - F(t)| with F monotone; the crossing with c is located
    by Newton steps and the two sides are integrated separately.
    """
    params = params or density.params
    x = params.scaled(pmf.states)
    keep = pmf.probs > 0
    xs, ps = x[keep], pmf.probs[keep]
    pts = np.union1d(xs, density.grid)
    pts = pts[(pts >= min(xs[0], density.grid[0])) & (pts <= max(xs[-1], density.grid[-1]))]
    lo, hi = pts[:-1], pts[1:]
    cum = np.concatenate([[0.0], np.cumsum(ps)])
    level = cum[np.searchsorted(xs, lo, side="right")]
    level = np.minimum(level, 1.0)

    f_lo, f_hi = density.cdf(lo), density.cdf(hi)
    cross = (f_lo < level) & (level < f_hi)
    mid = hi.copy()
    if np.any(cross):
        a, b, c = lo[cross], hi[cross], level[cross]
        t = a + (b - a) * (c - f_lo[cross]) / (f_hi[cross] - f_lo[cross])
        for _ in range(6):
            p = np.maximum(density.pdf(t), 1e-300)
            t = np.clip(t - (density.cdf(t) - c) / p, a, b)
        mid[cross] = t

    def area(a, b, c):
        return np.abs(c * (b - a) - _partial_integral(density.cdf, a, b, density.order))

    return float(np.sum(area(lo, mid, level)) + np.sum(area(mid, hi, level)))


@dataclass(frozen=True)
class DistanceReport:
    exact: Metrics
    approx: Metrics
    scaled: dict
    relative: dict
    wasserstein: Optional[float]


def distance_report(
    pmf: StationaryPMF,
    density: DiffusionDensity,
    params: Optional[QueueParams] = None,
    with_wasserstein: bool = True,
) -> DistanceReport:
    """Scaled and relative errors per metric, plus the Wasserstein distance.

    Scaled error divides by sqrt(R); for idle_prob (not of the sqrt(R)*E[h]
    form) the plain absolute difference is reported in its place.
    """
    params = params or density.params
    ex = exact_metrics(pmf, params)
    ap = approx_metrics(density, params)
    scaled, rel = {}, {}
    for name in ex.as_dict():
        e, a = getattr(ex, name), getattr(ap, name)
        scaled[name] = scaled_error(e, a, params.offered_load) if name in LIPSCHITZ_METRICS else abs(e - a)
        rel[name] = relative_error(e, a)
    dw = wasserstein(pmf, density, params) if with_wasserstein else None
    return DistanceReport(ex, ap, scaled, rel, dw)

"""Monte Carlo simulation of the daily census for cross-checking the solver.

Each replication owns a Philox stream spawned from one SeedSequence, so the
seed alone fixes every histogram. Departures are drawn by inverse CDF from a
precomputed Binomial(z, mu) table; the epoch loop is compiled with numba.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np
from scipy import stats

from .markov import default_top
from .metrics import METRIC_NAMES, Metrics
from .model import ArrivalKind, ArrivalModel, ConfigError, QueueParams, default_arrivals

RNG_ALGORITHM = "numpy Philox4x64-10, streams from SeedSequence.spawn"
CHUNK = 1 << 18


@dataclass(frozen=True)
class SimConfig:
    sample_epochs: int = 100_000
    replications: int = 10
    seed: int = 0
    warmup_epochs: Optional[int] = None  # default 50/mu

    def __post_init__(self):
        if self.sample_epochs < 1000:
            raise ConfigError("sample_epochs must be at least 1000")
        if self.replications < 2:
            raise ConfigError("need at least 2 replications for half-widths")
        if self.warmup_epochs is not None and self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")

    def warmup(self, params: QueueParams) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return int(math.ceil(50.0 / params.service_prob))


@dataclass(frozen=True)
class SimResult:
    probs: np.ndarray = field(repr=False)  # pooled occupancy histogram
    prob_half_width: np.ndarray = field(repr=False)
    metrics: Metrics
    half_width: dict
    departure_rate: float
    departure_half_width: float
    config: SimConfig
    overflow: bool = False  # some state exceeded the histogram range

    @property
    def states(self) -> np.ndarray:
        return np.arange(self.probs.size)


def _departure_table(n_srv: int, mu: float) -> np.ndarray:
    """cdf[z, k] = P(Binomial(z, mu) <= k), padded with ones."""
    kmax = min(n_srv, int(stats.binom.isf(1e-17, n_srv, mu)) + 2)
    k = np.arange(kmax + 1)
    z = np.arange(n_srv + 1)[:, None]
    cdf = stats.binom.cdf(k[None, :], z, mu)
    cdf[:, -1] = 1.0
    return cdf


@numba.njit(cache=True)
def _run_chunk(x, arrivals, uniforms, cdf, n_srv, record, hist, acc):
    # acc: [departures, epochs]
    top = hist.size - 1
    for t in range(arrivals.size):
        z = x if x < n_srv else n_srv
        row = cdf[z]
        u = uniforms[t]
        lo, hi = 0, z
        while lo < hi:  # smallest d with cdf[z, d] >= u
            mid = (lo + hi) // 2
            if row[mid] >= u:
                hi = mid
            else:
                lo = mid + 1
        if record:
            hist[x if x < top else top] += 1
            acc[0] += lo
            acc[1] += 1
        x = x + arrivals[t] - lo
    return x


def _draw_arrivals(rng: np.random.Generator, arrivals: ArrivalModel, size: int) -> np.ndarray:
    if arrivals.kind is ArrivalKind.POISSON:
        return rng.poisson(arrivals.rate, size)
    return rng.choice(len(arrivals.pmf), size=size, p=np.asarray(arrivals.pmf))


def _replicate(params, arrivals, warmup, samples, cdf, rng, cap):
    hist = np.zeros(cap + 1, dtype=np.int64)
    acc = np.zeros(2, dtype=np.int64)
    x = int(round(min(params.offered_load, params.n_servers)))
    for record, total in ((False, warmup), (True, samples)):
        done = 0
        while done < total:
            size = min(CHUNK, total - done)
            a = _draw_arrivals(rng, arrivals, size).astype(np.int64)
            u = rng.random(size)
            x = _run_chunk(x, a, u, cdf, params.n_servers, record, hist, acc)
            done += size
    return hist, acc[0] / acc[1]


def simulate_census(
    params: QueueParams,
    arrivals: Optional[ArrivalModel] = None,
    cfg: SimConfig = SimConfig(),
) -> SimResult:
    """Time-average census histogram and metric estimates with 95% half-widths.

    Half-widths come from the spread across independent replications
    (Student t with replications-1 degrees of freedom).
    """
    arrivals = arrivals or default_arrivals(params)
    arrivals.check_paired(params)
    cdf = _departure_table(params.n_servers, params.service_prob)
    cap = 2 * default_top(params, arrivals)
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.replications)

    hists, rates = [], []
    for ss in streams:
        rng = np.random.Generator(np.random.Philox(ss))
        h, rate = _replicate(params, arrivals, cfg.warmup(params), cfg.sample_epochs, cdf, rng, cap)
        hists.append(h)
        rates.append(rate)
    hists = np.array(hists, dtype=float) / cfg.sample_epochs
    overflow = bool(np.any(hists[:, -1] > 0))
    last = int(np.max(np.nonzero(hists.sum(axis=0))[0]))
    hists = hists[:, : last + 1]

    n = np.arange(hists.shape[1], dtype=float)
    n_srv, r = params.n_servers, params.offered_load
    per_rep = {
        "queue_len": hists @ np.maximum(n - n_srv, 0.0),
        "adj_queue_len": hists @ np.maximum(n - r, 0.0),
        "busy": hists @ np.minimum(n, n_srv),
        "idle_prob": hists[:, : n_srv + 1].sum(axis=1),
    }
    tq = stats.t.ppf(0.975, cfg.replications - 1) / math.sqrt(cfg.replications)
    est = {k: float(v.mean()) for k, v in per_rep.items()}
    hw = {k: float(tq * v.std(ddof=1)) for k, v in per_rep.items()}
    rates = np.array(rates)
    return SimResult(
        probs=hists.mean(axis=0),
        prob_half_width=tq * hists.std(axis=0, ddof=1),
        metrics=Metrics(**{k: est[k] for k in METRIC_NAMES}),
        half_width=hw,
        departure_rate=float(rates.mean()),
        departure_half_width=float(tq * rates.std(ddof=1)),
        config=cfg,
        overflow=overflow,
    )


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    size = max(p.size, q.size)
    return 0.5 * float(np.abs(np.pad(p, (0, size - p.size)) - np.pad(q, (0, size - q.size))).sum())


def write_histogram_csv(result: SimResult, path) -> None:
    """The StationaryPMF CSV layout plus a half_width column."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "probability", "half_width"])
        for n, (p, h) in enumerate(zip(result.probs, result.prob_half_width)):
            w.writerow([n, repr(float(p)), repr(float(h))])

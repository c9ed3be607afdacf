"""Exact customer-count chain: transition kernel, stationary solve, metrics.

The chain moves as X' = X + A - D with D ~ Binomial(min(X, N), mu). It is
truncated to states 0..K; mass that would leave the top is lumped into K.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, sparse, stats

from .metrics import Metrics
from .model import (
    ArrivalModel,
    ConfigError,
    QueueParams,
    binomial_raw_moment,
    default_arrivals,
)

log = logging.getLogger(__name__)

ENTRY_CUTOFF = 1e-16
DEFAULT_TOL = 1e-12
TOP_MASS_TARGET = 1e-12
DENSE_LIMIT = 2000


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class TruncationPolicy(str, enum.Enum):
    LUMP_TOP = "lump_top"
    RENORMALIZE = "renormalize"


@dataclass(frozen=True)
class TransitionKernel:
    params: QueueParams
    arrivals: ArrivalModel
    matrix: sparse.csr_matrix = field(repr=False)
    truncation_policy: TruncationPolicy
    # Largest per-row probability mass moved by truncation (window tails,
    # dropped entries, overflow beyond K).
    tail_bound: float
    lower: int  # max downward jump (departures)
    upper: int  # max upward jump (arrivals)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def top(self) -> int:
        return self.size - 1


@dataclass(frozen=True)
class StationaryPMF:
    probs: np.ndarray = field(repr=False)
    residual: float
    tolerance: float
    method: str
    iterations: int = 0

    @property
    def truncation_mass(self) -> float:
        return float(self.probs[-1])

    @property
    def top(self) -> int:
        return self.probs.size - 1

    @property
    def states(self) -> np.ndarray:
        return np.arange(self.probs.size)


def _binomial_window(z: int, mu: float) -> tuple[int, np.ndarray]:
    if z == 0:
        return 0, np.ones(1)
    binom = stats.binom
    lo = max(int(binom.ppf(ENTRY_CUTOFF, z, mu)) - 1, 0)
    hi = min(int(binom.isf(ENTRY_CUTOFF, z, mu)) + 1, z)
    k = np.arange(lo, hi + 1)
    return lo, binom.pmf(k, z, mu)


def _jump_distribution(a_lo: int, pa: np.ndarray, z: int, mu: float) -> tuple[int, np.ndarray]:
    """pmf of A - D as (lowest jump, probabilities)."""
    d_lo, pd = _binomial_window(z, mu)
    d_hi = d_lo + pd.size - 1
    return a_lo - d_hi, np.convolve(pa, pd[::-1])


def default_top(params: QueueParams, arrivals: Optional[ArrivalModel] = None) -> int:
    """Initial truncation level, before growth on the top-mass certificate."""
    r, n = params.offered_load, params.n_servers
    sq = math.sqrt(r)
    extra = max(10.0 * sq, 20.0 / abs(params.zeta) * sq)
    arrivals = arrivals or default_arrivals(params)
    a_lo, pa = arrivals.pmf_vector(1e-14)
    return n + max(math.ceil(extra), a_lo + pa.size)


def build_kernel(
    params: QueueParams,
    arrivals: Optional[ArrivalModel] = None,
    top: Optional[int] = None,
    policy: TruncationPolicy = TruncationPolicy.LUMP_TOP,
) -> TransitionKernel:
    """Transition matrix of the chain truncated to states 0..top."""
    arrivals = arrivals or default_arrivals(params)
    arrivals.check_paired(params)
    n_srv, mu = params.n_servers, params.service_prob
    if top is None:
        top = default_top(params, arrivals)
    if top <= n_srv:
        raise ConfigError(f"truncation level K={top} must exceed N={n_srv}")
    policy = TruncationPolicy(policy)
    a_lo, pa = arrivals.pmf_vector(ENTRY_CUTOFF)

    rows, cols, vals = [], [], []
    worst_moved = 0.0
    lower = upper = 0
    cached = None
    for n in range(top + 1):
        z = min(n, n_srv)
        if z < n_srv or cached is None:
            w_lo, pw = _jump_distribution(a_lo, pa, z, mu)
            keep = np.flatnonzero(pw >= ENTRY_CUTOFF)
            w_lo, pw = w_lo + keep[0], pw[keep[0]: keep[-1] + 1]
            if z == n_srv:
                cached = (w_lo, pw)
        else:
            w_lo, pw = cached
        dest = n + w_lo + np.arange(pw.size)
        p = np.where(pw >= ENTRY_CUTOFF, pw, 0.0)
        over = dest > top
        overflow = math.fsum(p[over])
        dest, p = dest[~over], p[~over].copy()
        # dropped tail/entry mass, i.e. whatever keeps the row from summing to 1
        deficit = 1.0 - math.fsum(p) - overflow
        if policy is TruncationPolicy.LUMP_TOP:
            if overflow > 0:
                if dest[-1] == top:
                    p[-1] += overflow
                else:
                    dest = np.append(dest, top)
                    p = np.append(p, overflow)
            mode = int(np.argmax(p))
            p[mode] = 0.0
            p[mode] = 1.0 - math.fsum(p)
        else:
            p = p / math.fsum(p)
        worst_moved = max(worst_moved, overflow + abs(deficit))
        nz = p > 0
        dest, p = dest[nz], p[nz]
        lower = max(lower, n - int(dest[0]))
        upper = max(upper, int(dest[-1]) - n)
        rows.append(np.full(dest.size, n))
        cols.append(dest)
        vals.append(p)

    mat = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(top + 1, top + 1),
    )
    return TransitionKernel(params, arrivals, mat, policy, worst_moved, lower, upper)


def _residual(kernel: TransitionKernel, pi: np.ndarray) -> float:
    return float(np.max(np.abs(kernel.matrix.T @ pi - pi)))


def _solve_banded(kernel: TransitionKernel) -> np.ndarray:
    """Direct solve of pi (P - I) = 0 using the band structure of P.

    One balance equation is replaced by pi[m] = 1 at a state near the mode;
    the row swap keeps the band intact.
    """
    size = kernel.size
    lo, up = kernel.upper, kernel.lower  # bands of P^T - I
    coo = kernel.matrix.tocoo()
    # M[t, n] = P[n, t]  ->  ab[up + t - n, n]
    ab = np.zeros((lo + up + 1, size))
    ab[up + coo.col - coo.row, coo.row] = coo.data
    ab[up, :] -= 1.0
    m = min(int(round(kernel.params.offered_load)), kernel.top)
    j = np.arange(max(0, m - lo), min(size, m + up + 1))
    ab[up + m - j, j] = 0.0
    ab[up, m] = 1.0
    rhs = np.zeros(size)
    rhs[m] = 1.0
    x = linalg.solve_banded((lo, up), ab, rhs, check_finite=False)
    return x


def _solve_dense(kernel: TransitionKernel) -> np.ndarray:
    if kernel.size > DENSE_LIMIT:
        raise ConfigError(f"dense solve limited to K < {DENSE_LIMIT}, got {kernel.size}")
    a = kernel.matrix.toarray().T - np.eye(kernel.size)
    a[-1, :] = 1.0
    rhs = np.zeros(kernel.size)
    rhs[-1] = 1.0
    return np.linalg.solve(a, rhs)


def _initial_guess(kernel: TransitionKernel) -> np.ndarray:
    r = kernel.params.offered_load
    guess = stats.poisson(r).pmf(np.arange(kernel.size)) + 1e-300
    return guess / guess.sum()


def _power(kernel: TransitionKernel, pi: np.ndarray, tol: float, max_iters: int) -> tuple[np.ndarray, float, int]:
    pt = kernel.matrix.T.tocsr()
    res = math.inf
    for it in range(1, max_iters + 1):
        nxt = pt @ pi
        res = float(np.max(np.abs(nxt - pi)))
        pi = nxt / nxt.sum()
        if res <= tol:
            return pi, res, it
    return pi, res, max_iters


def solve_stationary(
    kernel: TransitionKernel,
    tol: float = DEFAULT_TOL,
    max_iters: int = 100_000,
    method: str = "banded",
) -> StationaryPMF:
    """Stationary distribution of a truncated kernel.

    ``banded`` (default) is a direct banded LU solve polished by power steps
    if needed; ``power`` is plain power iteration; ``dense`` is a full linear
    solve kept as an independent oracle for small K.
    """
    iters = 0
    if method == "banded":
        pi = _solve_banded(kernel)
    elif method == "dense":
        pi = _solve_dense(kernel)
    elif method == "power":
        pi = _initial_guess(kernel)
    else:
        raise ConfigError(f"unknown solver method {method!r}")
    if method != "power":
        pi = np.where(pi < 0, 0.0, pi) if np.all(pi > -1e-13 * np.max(pi)) else pi
        pi = pi / pi.sum()
        res = _residual(kernel, pi)
    if method == "power" or res > tol:
        pi, _, iters = _power(kernel, pi, tol, max_iters)
        res = _residual(kernel, pi)
        if res > tol:
            raise ConvergenceError(f"stationary solve ({method}) did not reach tol {tol:.1e} in {iters} iterations", res)
    if np.any(pi < 0):
        raise ConvergenceError("stationary solve produced negative probabilities", res)
    return StationaryPMF(pi, res, tol, method, iters)


def solve(
    params: QueueParams,
    arrivals: Optional[ArrivalModel] = None,
    top: Optional[int] = None,
    tol: float = DEFAULT_TOL,
    method: str = "banded",
    top_mass: float = TOP_MASS_TARGET,
    max_grow: int = 8,
) -> StationaryPMF:
    """Build and solve, growing K geometrically until pi(K) < ``top_mass``.

    An explicit ``top`` disables growth.
    """
    arrivals = arrivals or default_arrivals(params)
    grow = top is None
    k = default_top(params, arrivals) if top is None else top
    for _ in range(max_grow + 1):
        kernel = build_kernel(params, arrivals, k)
        pmf = solve_stationary(kernel, tol=tol, method=method)
        if not grow or pmf.truncation_mass < top_mass:
            return pmf
        excess = k - params.n_servers
        log.debug("pi(K=%d) = %.2e, growing truncation", k, pmf.truncation_mass)
        k = params.n_servers + int(math.ceil(1.5 * excess))
    raise ConvergenceError(f"pi(K) still above {top_mass:.0e} at K={k}", pmf.truncation_mass)


def exact_metrics(pmf: StationaryPMF, params: QueueParams) -> Metrics:
    n = pmf.states.astype(float)
    pi = pmf.probs
    n_srv, r = params.n_servers, params.offered_load
    return Metrics(
        queue_len=float(np.dot(pi, np.maximum(n - n_srv, 0.0))),
        adj_queue_len=float(np.dot(pi, np.maximum(n - r, 0.0))),
        busy=float(np.dot(pi, np.minimum(n, n_srv))),
        idle_prob=float(pi[: n_srv + 1].sum()),
    )


def jump_moments(params: QueueParams, arrivals: ArrivalModel, states: np.ndarray, order: int) -> np.ndarray:
    """E_n[(A - D)^j] for j = 0..order, shape (order+1, len(states))."""
    z = np.minimum(states, params.n_servers)
    mu = params.service_prob
    ea = [arrivals.raw_moment(i) for i in range(order + 1)]
    ed = [binomial_raw_moment(z, mu, i) for i in range(order + 1)]
    out = np.zeros((order + 1, states.size))
    for j in range(order + 1):
        for i in range(j + 1):
            out[j] += math.comb(j, i) * ea[i] * (-1) ** (j - i) * ed[j - i]
    return out


def check_bar(
    pmf: StationaryPMF,
    params: QueueParams,
    arrivals: Optional[ArrivalModel] = None,
    coeffs: Sequence[float] = (0.0, 1.0),
) -> float:
    """|E[G f(X~)]| for the polynomial f(x) = sum coeffs[k] x**k.

    The one-step generator of the scaled chain is summed exactly against
    pmf; a stationary pmf gives zero up to truncation and rounding.
    """
    arrivals = arrivals or default_arrivals(params)
    deg = len(coeffs) - 1
    if deg > 4:
        raise ConfigError("polynomial degree must be <= 4")
    states = pmf.states
    x = params.scaled(states)
    d = params.delta
    w = jump_moments(params, arrivals, states.astype(float), max(deg, 1))
    gen = np.zeros(states.size)
    for k, c in enumerate(coeffs):
        for j in range(1, k + 1):
            gen += c * math.comb(k, j) * x ** (k - j) * d**j * w[j]
    return abs(float(np.dot(pmf.probs, gen)))


@dataclass(frozen=True)
class BoundCheck:
    name: str
    lhs: float
    rhs: float
    kind: str  # "le" or "eq"
    tol: float = 0.0

    @property
    def passed(self) -> bool:
        if self.kind == "eq":
            return abs(self.lhs - self.rhs) <= self.tol
        return self.lhs <= self.rhs + self.tol


def verify_bounds(pmf: StationaryPMF, params: QueueParams, eq_tol: float = 1e-6) -> list[BoundCheck]:
    """Evaluate the idle-probability bound and the moment bounds on pi."""
    pi = pmf.probs
    x = params.scaled(pmf.states)
    d, zeta, mu, r = params.delta, params.zeta, params.service_prob, params.offered_load
    left = x <= -zeta
    m2 = 4.0 / 3.0 + 8.0 / 3.0 * d * d
    idle = float(pi[: params.n_servers + 1].sum())
    return [
        BoundCheck("idle_prob", idle, (2 + d) * (abs(zeta) + mu * math.sqrt(r)) / (1 - mu), "le"),
        BoundCheck("second_moment_left", float(np.dot(pi, np.where(left, x * x, 0.0))), m2, "le"),
        BoundCheck(
            "abs_moment_left",
            float(np.dot(pi, np.where(left, np.abs(x), 0.0))),
            min(math.sqrt(m2), 2 * abs(zeta)),
            "le",
        ),
        BoundCheck(
            "abs_moment_right",
            float(np.dot(pi, np.where(x >= -zeta, np.abs(x), 0.0))),
            (d * d + 1) / abs(zeta) + d,
            "le",
        ),
        BoundCheck(
            "idle_capacity_identity",
            float(np.dot(pi, np.where(left, np.abs(x + zeta), 0.0))),
            abs(zeta),
            "eq",
            eq_tol,
        ),
    ]


def write_pmf_csv(pmf: StationaryPMF, path, extra: Optional[dict] = None) -> None:
    """Two-column CSV (state, probability) plus a JSON sidecar ``<path>.meta``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "probability"])
        for n, p in enumerate(pmf.probs):
            w.writerow([n, repr(float(p))])
    meta = {
        "K": pmf.top,
        "residual": pmf.residual,
        "tolerance": pmf.tolerance,
        "method": pmf.method,
        "truncation_mass": pmf.truncation_mass,
    }
    meta.update(extra or {})
    path.with_name(path.name + ".meta").write_text(json.dumps(meta, indent=2) + "\n")


def read_pmf_csv(path) -> np.ndarray:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["probability"]) for r in rows])

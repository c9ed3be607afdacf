"""Queue parameters, arrival laws, drift/diffusion coefficients and regime sweeps.

Time is measured in epochs of one day. A scenario is the triple
``(N, Lambda, mu)``: number of servers, mean arrivals per day, and the
per-day departure probability of a customer in service.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, stats

# R this close to N makes the chain numerically unusable (mixing blows up).
MIN_SPARE_CAPACITY = 1e-9


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class UnstableError(ConfigError):
    """Offered load R = Lambda/mu is not below N."""


@dataclass(frozen=True)
class QueueParams:
    n_servers: int
    arrival_rate: float
    service_prob: float

    def __post_init__(self):
        if int(self.n_servers) != self.n_servers or self.n_servers < 1:
            raise ConfigError(f"n_servers must be a positive integer, got {self.n_servers!r}")
        object.__setattr__(self, "n_servers", int(self.n_servers))
        if not self.arrival_rate > 0 or not math.isfinite(self.arrival_rate):
            raise ConfigError(f"arrival_rate must be positive, got {self.arrival_rate!r}")
        if not 0 < self.service_prob < 1:
            raise ConfigError(f"service_prob must lie in (0, 1), got {self.service_prob!r}")
        r = self.offered_load
        if not r < self.n_servers - MIN_SPARE_CAPACITY:
            raise UnstableError(
                f"unstable: offered load R = Lambda/mu = {r:.6g} must satisfy R < N = {self.n_servers}"
            )

    @classmethod
    def from_load(cls, n_servers: int, offered_load: float, service_prob: float) -> "QueueParams":
        """Build from R instead of Lambda (Lambda = R * mu)."""
        return cls(n_servers, offered_load * service_prob, service_prob)

    @classmethod
    def from_utilization(cls, n_servers: int, rho: float, service_prob: float) -> "QueueParams":
        return cls(n_servers, rho * n_servers * service_prob, service_prob)

    @property
    def offered_load(self) -> float:
        return self.arrival_rate / self.service_prob

    @property
    def utilization(self) -> float:
        return self.offered_load / self.n_servers

    @property
    def delta(self) -> float:
        return 1.0 / math.sqrt(self.offered_load)

    @property
    def zeta(self) -> float:
        return (self.offered_load - self.n_servers) * self.delta

    def scaled(self, n):
        """Map customer counts to the diffusion scale x = (n - R)/sqrt(R)."""
        return (np.asarray(n, dtype=float) - self.offered_load) * self.delta


class ArrivalKind(str, enum.Enum):
    POISSON = "poisson"
    GENERAL = "general"


@dataclass(frozen=True)
class ArrivalModel:
    """Distribution of the number of arrivals in one epoch.

    Poisson arrivals are handled analytically. A general law is a finite
    pmf over counts ``0..len(pmf)-1``.
    """

    kind: ArrivalKind = ArrivalKind.POISSON
    rate: Optional[float] = None
    pmf: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        kind = ArrivalKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ArrivalKind.POISSON:
            if self.rate is None or not self.rate > 0:
                raise ConfigError("Poisson arrivals need a positive rate")
            return
        if self.pmf is None:
            raise ConfigError("general arrivals need a pmf")
        p = np.asarray(self.pmf, dtype=float)
        if p.ndim != 1 or p.size < 2:
            raise ConfigError("pmf must be a 1-d vector with at least two entries")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError(f"pmf must be nonnegative and sum to 1 (sum={p.sum():.15g})")
        object.__setattr__(self, "pmf", tuple(float(v) for v in p))
        object.__setattr__(self, "rate", float(np.dot(np.arange(p.size), p)))

    @classmethod
    def poisson(cls, rate: float) -> "ArrivalModel":
        return cls(ArrivalKind.POISSON, rate=float(rate))

    @classmethod
    def general(cls, pmf: Sequence[float]) -> "ArrivalModel":
        return cls(ArrivalKind.GENERAL, pmf=tuple(pmf))

    @property
    def mean(self) -> float:
        return float(self.rate)

    def raw_moment(self, k: int) -> float:
        lam = self.rate
        if self.kind is ArrivalKind.POISSON:
            return poisson_raw_moment(lam, k)
        p = np.asarray(self.pmf)
        return float(np.dot(np.arange(p.size, dtype=float) ** k, p))

    @property
    def variance(self) -> float:
        if self.kind is ArrivalKind.POISSON:
            return float(self.rate)
        return self.raw_moment(2) - self.rate**2

    @property
    def c_a(self) -> float:
        """Variance-to-mean ratio plus one (2 for Poisson)."""
        return self.variance / self.rate + 1.0

    @property
    def v_a(self) -> float:
        """Third raw moment divided by the mean."""
        return self.raw_moment(3) / self.rate

    def pmf_vector(self, tail: float = 1e-16) -> tuple[int, np.ndarray]:
        """Return ``(lo, probs)`` with probs[i] = P(A = lo + i).

        Poisson mass outside the returned window is below ``tail`` on each side.
        """
        if self.kind is ArrivalKind.GENERAL:
            return 0, np.asarray(self.pmf, dtype=float)
        dist = stats.poisson(self.rate)
        lo = int(dist.ppf(tail)) if tail > 0 else 0
        lo = max(lo - 1, 0)
        hi = int(dist.isf(tail)) + 1
        k = np.arange(lo, hi + 1)
        return lo, dist.pmf(k)

    def check_paired(self, params: QueueParams, rtol: float = 1e-9) -> None:
        if not math.isclose(self.rate, params.arrival_rate, rel_tol=rtol):
            raise ConfigError(
                f"arrival mean {self.rate:.10g} does not match arrival_rate {params.arrival_rate:.10g}"
            )


def poisson_raw_moment(lam: float, k: int) -> float:
    if k == 0:
        return 1.0
    if k == 1:
        return lam
    if k == 2:
        return lam + lam**2
    if k == 3:
        return lam + 3 * lam**2 + lam**3
    if k == 4:
        return lam + 7 * lam**2 + 6 * lam**3 + lam**4
    raise ValueError("moments above order 4 are not needed")


def binomial_raw_moment(m, r: float, k: int):
    """Raw moments E[D^k] of D ~ Binomial(m, r); ``m`` may be an array."""
    m = np.asarray(m, dtype=float)
    if k == 0:
        return np.ones_like(m)
    mr = m * r
    if k == 1:
        return mr
    if k == 2:
        return mr * (1 - r + mr)
    if k == 3:
        return mr * (1 - 3 * r + 3 * mr + 2 * r**2 - 3 * mr * r + mr**2)
    if k == 4:
        return mr * (
            1 - 7 * r + 7 * mr + 12 * r**2 - 18 * mr * r + 6 * mr**2
            - 6 * r**3 + 11 * mr * r**2 - 6 * mr**2 * r + mr**3
        )
    raise ValueError("moments above order 4 are not needed")


def default_arrivals(params: QueueParams) -> ArrivalModel:
    return ArrivalModel.poisson(params.arrival_rate)


def drift_b(x, params: QueueParams):
    """Piecewise-linear drift: -mu*x left of -zeta, mu*zeta to the right."""
    mu, zeta = params.service_prob, params.zeta
    x = np.asarray(x, dtype=float)
    out = np.where(x <= -zeta, -mu * x, mu * zeta)
    return out if out.ndim else float(out)


def diffusion_a(x, params: QueueParams, arrivals: Optional[ArrivalModel] = None):
    """State-dependent diffusion coefficient.

    Constant below -sqrt(R), quadratic on [-sqrt(R), -zeta], constant
    above -zeta. For general arrivals the leading 2 becomes c_A.
    """
    mu, delta, zeta = params.service_prob, params.delta, params.zeta
    c_a = 2.0 if arrivals is None or arrivals.kind is ArrivalKind.POISSON else arrivals.c_a
    x = np.asarray(x, dtype=float)
    xc = np.clip(x, -1.0 / delta, -zeta)
    out = mu * (c_a - mu + delta * (1 - mu) * xc + mu * xc**2)
    return out if out.ndim else float(out)


class Regime(str, enum.Enum):
    QD = "QD"
    QED = "QED"
    NDS = "NDS"

    @property
    def q(self) -> float:
        return {"QD": 1.0, "QED": 0.5, "NDS": 0.0}[self.value]


@dataclass(frozen=True)
class RegimeSpec:
    """Sweep description: N - R = beta * R**q and mu = gamma * R**(-s).

    ``beta`` and ``gamma`` default to the values implied by the baseline
    scenario passed to :func:`generate_scenarios`.
    """

    regime: Regime
    s_exponent: float = 0.0
    load_multipliers: tuple = (1.0,)
    beta: Optional[float] = None
    gamma: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        object.__setattr__(self, "load_multipliers", tuple(float(m) for m in self.load_multipliers))
        if self.s_exponent < 0:
            raise ConfigError("s_exponent must be >= 0")
        if not self.load_multipliers or any(m <= 0 for m in self.load_multipliers):
            raise ConfigError("load_multipliers must be a nonempty list of positive reals")
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")


def regime_beta(regime: Regime, params: QueueParams) -> float:
    r = params.offered_load
    return (params.n_servers - r) / r ** Regime(regime).q


def _load_from_servers(n: int, beta: float, q: float) -> float:
    """Solve N = R + beta * R**q for R."""
    if q == 0.0:
        return n - beta
    if q == 1.0:
        return n / (1.0 + beta)
    if q == 0.5:
        root = (-beta + math.sqrt(beta * beta + 4.0 * n)) / 2.0
        return root * root
    return optimize.brentq(lambda r: r + beta * r**q - n, 1e-12, float(n))


def generate_scenarios(spec: RegimeSpec, base: QueueParams) -> list[QueueParams]:
    """Scale a baseline scenario along a load regime.

    For each multiplier m the target load m*R_base fixes N by rounding
    ``m*R_base + beta*(m*R_base)**q``; R is then re-solved from that integer
    N so the regime equation holds exactly, and mu = gamma * R**(-s).
    """
    q = spec.regime.q
    r_base = base.offered_load
    beta = spec.beta if spec.beta is not None else regime_beta(spec.regime, base)
    gamma = spec.gamma if spec.gamma is not None else base.service_prob * r_base**spec.s_exponent
    out = []
    for m in spec.load_multipliers:
        target = m * r_base
        n = int(round(target + beta * target**q))
        r = _load_from_servers(n, beta, q)
        mu = base.service_prob if spec.s_exponent == 0 and spec.gamma is None else gamma * r ** (-spec.s_exponent)
        if not 0 < mu < 1:
            raise ConfigError(f"multiplier {m}: generated mu = {mu:.6g} outside (0, 1)")
        try:
            out.append(QueueParams(n, r * mu, mu))
        except UnstableError as exc:
            raise UnstableError(f"multiplier {m}: {exc}") from None
    return out


CONFIG_FIELDS = {
    "n_servers", "arrival_rate", "service_prob", "arrival_kind", "pmf",
    "regime", "beta", "gamma", "s", "multipliers",
}


def parse_scenario_config(doc: dict) -> tuple[QueueParams, ArrivalModel, Optional[RegimeSpec]]:
    """Scenario from a config mapping; regime fields are optional."""
    unknown = set(doc) - CONFIG_FIELDS
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
    try:
        n, mu = doc["n_servers"], float(doc["service_prob"])
    except KeyError as exc:
        raise ConfigError(f"config is missing {exc.args[0]!r}") from None
    kind = ArrivalKind(doc.get("arrival_kind", "poisson"))
    if kind is ArrivalKind.GENERAL:
        arrivals = ArrivalModel.general(doc.get("pmf") or ())
        lam = doc.get("arrival_rate", arrivals.rate)
    else:
        if "arrival_rate" not in doc:
            raise ConfigError("config is missing 'arrival_rate'")
        lam = float(doc["arrival_rate"])
        arrivals = ArrivalModel.poisson(lam)
    params = QueueParams(n, float(lam), mu)
    arrivals.check_paired(params)
    spec = None
    if "regime" in doc:
        spec = RegimeSpec(
            regime=Regime(str(doc["regime"]).upper()),
            s_exponent=float(doc.get("s", 0.0)),
            load_multipliers=tuple(doc.get("multipliers", (1.0,))),
            beta=doc.get("beta"),
            gamma=doc.get("gamma"),
        )
    return params, arrivals, spec


def load_scenario_config(path) -> tuple[QueueParams, ArrivalModel, Optional[RegimeSpec]]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return parse_scenario_config(doc)

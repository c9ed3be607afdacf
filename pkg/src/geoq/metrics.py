"""Performance measures shared by the exact, diffusion and simulation paths."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

METRIC_NAMES = ("queue_len", "adj_queue_len", "busy", "idle_prob")

# Measures written as sqrt(R) * E[h(X~)] with h Lipschitz(1); their absolute
# error divided by sqrt(R) is the scaled error.
LIPSCHITZ_METRICS = ("queue_len", "adj_queue_len", "busy")


@dataclass(frozen=True)
class Metrics:
    """E(X-N)+, E(X-R)+, E(X^N) and P(X<=N) for one distribution."""

    queue_len: float
    adj_queue_len: float
    busy: float
    idle_prob: float

    def as_dict(self) -> dict:
        return asdict(self)


def scaled_error(exact: float, approx: float, offered_load: float) -> float:
    return abs(exact - approx) / offered_load**0.5


def relative_error(exact: float, approx: float) -> Optional[float]:
    """None when the exact value is zero (the ratio is undefined)."""
    if exact == 0:
        return None
    return abs(exact - approx) / abs(exact)

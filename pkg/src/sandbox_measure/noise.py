"""Discrete Laplace noise, plain and truncated.

``DLap(a)`` puts mass proportional to ``exp(-a|x|)`` on every integer;
``DLap_tau(a)`` restricts that to ``[-tau, tau]`` and renormalizes.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from typing import Optional, Union

import mpmath
import numpy as np

INF = math.inf
Tau = Union[int, float]

_HP_DIGITS = 50


@dataclasses.dataclass(frozen=True)
class DLapParam:
    """Scale exponent ``a`` and truncation bound ``tau`` (``math.inf`` = none)."""
    a: float
    tau: Tau = INF

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"a must be positive, got {self.a}")
        if self.tau != INF:
            if int(self.tau) != self.tau or self.tau < 1:
                raise ValueError(f"tau must be a positive integer or inf, got {self.tau}")
            object.__setattr__(self, "tau", int(self.tau))

    @property
    def truncated(self) -> bool:
        return self.tau != INF


@functools.lru_cache(maxsize=256)
def _normalizer(a: float, tau: Tau) -> float:
    if tau == INF:
        # sum_x e^{-a|x|} = (1 + e^{-a}) / (1 - e^{-a})
        return (1.0 + math.exp(-a)) / -math.expm1(-a)
    return 1.0 + 2.0 * math.fsum(math.exp(-a * y) for y in range(1, tau + 1))


def dlap_pmf(p: DLapParam, x: int) -> float:
    if p.truncated and abs(x) > p.tau:
        return 0.0
    return math.exp(-p.a * abs(x)) / _normalizer(p.a, p.tau)


@functools.lru_cache(maxsize=64)
def _table(a: float, tau: int):
    support = np.arange(-tau, tau + 1)
    probs = np.exp(-a * np.abs(support)) / _normalizer(a, tau)
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    support.setflags(write=False)
    probs.setflags(write=False)
    cdf.setflags(write=False)
    return support, probs, cdf


def pmf_table(p: DLapParam):
    """Returns ``(support, probs)`` arrays over ``[-tau, tau]``."""
    if not p.truncated:
        raise ValueError("pmf_table needs a finite tau")
    support, probs, _ = _table(p.a, p.tau)
    return support, probs


def sample_dlap(p: DLapParam, rng: np.random.Generator,
                size: Optional[int] = None):
    """Draws from ``DLap_tau(a)``.

    Truncated noise uses inverse-CDF over the finite support; untruncated
    noise is the difference of two i.i.d. geometric variables.
    """
    if p.truncated:
        support, _, cdf = _table(p.a, p.tau)
        u = rng.random(size)
        idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
        out = support[idx]
    else:
        q = -math.expm1(-p.a)
        out = rng.geometric(q, size) - rng.geometric(q, size)
    if size is None:
        return int(out)
    return out.astype(np.int64)


def compute_tau(contribution_budget: int, sparsity_budget: int, eps: float,
                delta: float) -> Tau:
    """Truncation bound for key discovery.

    ``ceil(A1 * (1 + ln(A0 / delta) / eps))``, or ``inf`` when ``delta == 0``.
    The formula is evaluated in 50-digit arithmetic on the exact float
    inputs before taking the ceiling.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if delta < 0 or delta > 1:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    if contribution_budget < 1 or sparsity_budget < 1:
        raise ValueError("budgets must be positive integers")
    if delta == 0:
        return INF
    with mpmath.workdps(_HP_DIGITS):
        a1 = mpmath.mpf(contribution_budget)
        val = a1 * (1 + mpmath.log(mpmath.mpf(sparsity_budget) / mpmath.mpf(delta))
                    / mpmath.mpf(eps))
        return int(mpmath.ceil(val))


def tdlap_tail(p: DLapParam, delta_shift: int) -> mpmath.mpf:
    """Pr[X > tau - delta_shift] for X ~ DLap_tau(a), in 50-digit arithmetic."""
    if not p.truncated:
        raise ValueError("tail is only defined here for finite tau")
    if not 1 <= delta_shift <= 2 * p.tau:
        raise ValueError("delta_shift must lie in [1, 2*tau]")
    with mpmath.workdps(_HP_DIGITS):
        a = mpmath.mpf(p.a)
        weight = lambda x: mpmath.exp(-a * abs(x))
        z = mpmath.fsum(weight(x) for x in range(-p.tau, p.tau + 1))
        num = mpmath.fsum(weight(x) for x in range(p.tau - delta_shift + 1, p.tau + 1))
        return +(num / z)

"""Exact privacy audits on finite supports.

Everything here enumerates; nothing samples. A failed check is therefore a
certain counterexample rather than a statistical fluke.

The decision quantity is the symmetric hockey-stick divergence
``max(H(P||Q), H(Q||P))`` with ``H(P||Q) = sum_w max(P(w) - e^eps Q(w), 0)``;
on a finite support, ``P`` and ``Q`` are ``(eps, delta)``-indistinguishable iff
this value is at most ``delta``.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
import os
from fractions import Fraction
from typing import (Any, Callable, Dict, Hashable, Iterable, List, Mapping,
                    Optional, Sequence, TextIO, Tuple, Union)

import numpy as np

from sandbox_measure.interactive import (HALT, AdversaryDistribution,
                                         InteractiveMechanism)
from sandbox_measure.noise import INF, DLapParam, compute_tau, dlap_pmf, pmf_table, tdlap_tail
from sandbox_measure.summary_mechanism import read_trace, rollout_account

SLACK = 1e-12
DEFAULT_SPACE_BOUND = 1_000_000
MAX_TDLAP_DIM = 4
MAX_TDLAP_L1 = 8


class SpaceTooLarge(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class FiniteDistribution:
    """Outcome -> probability, normalized within 1e-12."""
    probs: Mapping[Hashable, float]

    def __post_init__(self):
        probs = dict(self.probs)
        if any(p < 0 for p in probs.values()):
            raise ValueError("probabilities must be non-negative")
        total = math.fsum(probs.values())
        if abs(total - 1.0) > SLACK:
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "probs", probs)

    def __getitem__(self, w) -> float:
        return self.probs.get(w, 0.0)

    def support(self):
        return {w for w, p in self.probs.items() if p > 0}

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[float, Hashable]]) -> "FiniteDistribution":
        acc: Dict[Hashable, List[float]] = {}
        for p, w in pairs:
            acc.setdefault(w, []).append(p)
        return cls({w: math.fsum(ps) for w, ps in acc.items()})


def _one_way(P: Mapping, Q: Mapping, e: float) -> float:
    return math.fsum(max(p - e * Q.get(w, 0.0), 0.0) for w, p in P.items())


def hockey_stick_delta(P: FiniteDistribution, Q: FiniteDistribution, eps: float) -> float:
    """Smallest delta with ``P`` and ``Q`` (eps, delta)-indistinguishable."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    e = math.exp(eps)
    return max(_one_way(P.probs, Q.probs, e), _one_way(Q.probs, P.probs, e))


def total_variation(P: FiniteDistribution, Q: FiniteDistribution) -> float:
    keys = set(P.probs) | set(Q.probs)
    return 0.5 * math.fsum(abs(P[w] - Q[w]) for w in keys)


def mixture(weights: Sequence[float], components: Sequence[FiniteDistribution]
            ) -> FiniteDistribution:
    """Convex combination of distributions."""
    if len(weights) != len(components):
        raise ValueError("need one weight per component")
    return FiniteDistribution.from_pairs(
        (w * p, o) for w, c in zip(weights, components) for o, p in c.probs.items())


# --- structured audit records ----------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class AuditRecord:
    check: str
    params: Mapping[str, Any]
    delta: float
    bound: float
    passed: bool

    def to_json(self) -> dict:
        return {"check": self.check, "params": dict(self.params),
                "delta": self.delta, "bound": self.bound,
                "verdict": "pass" if self.passed else "fail"}


def write_audit_report(records: Iterable[AuditRecord], out: TextIO) -> None:
    for r in records:
        out.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


# --- truncated discrete Laplace -------------------------------------------------------

def _marginal(p: DLapParam, lo: int, hi: int, shift: int) -> np.ndarray:
    """pmf of ``shift + xi`` on the integer range [lo, hi]."""
    out = np.zeros(hi - lo + 1)
    support, probs = pmf_table(p)
    idx = support + shift - lo
    keep = (idx >= 0) & (idx < out.size)
    out[idx[keep]] = probs[keep]
    return out


def _product(vectors: Sequence[np.ndarray]) -> np.ndarray:
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def _hockey_arrays(P: np.ndarray, Q: np.ndarray, eps: float) -> float:
    e = math.exp(eps)
    return max(math.fsum(np.maximum(P - e * Q, 0.0).ravel()),
               math.fsum(np.maximum(Q - e * P, 0.0).ravel()))


def audit_tdlap(u: Sequence[int], v: Sequence[int], eps: float, delta: float,
                contribution_budget: int, sparsity_budget: int, *,
                tau: Optional[float] = None, window: Optional[int] = None) -> AuditRecord:
    """Checks that ``u + xi`` and ``v + xi`` are (eps, delta)-indistinguishable.

    ``xi`` has i.i.d. coordinates with scale ``eps / contribution_budget`` and
    truncation ``tau`` (from :func:`compute_tau` unless given). With
    ``delta == 0`` the noise is untruncated; the check then runs on the window
    ``[-window, window]`` around the inputs and reports the mass outside it.
    """
    u, v = [int(x) for x in u], [int(x) for x in v]
    if len(u) != len(v) or not u:
        raise ValueError("u and v need the same positive dimension")
    diff = [b - a for a, b in zip(u, v)]
    l1, l0 = sum(map(abs, diff)), sum(1 for x in diff if x)
    if len(u) > MAX_TDLAP_DIM or l1 > MAX_TDLAP_L1:
        raise SpaceTooLarge(f"instance exceeds dimension {MAX_TDLAP_DIM} or l1 {MAX_TDLAP_L1}")
    if l1 > contribution_budget or l0 > sparsity_budget:
        raise ValueError("u - v exceeds the declared sensitivity")
    if tau is None:
        tau = compute_tau(contribution_budget, sparsity_budget, eps, delta)
    a = eps / contribution_budget
    params = {"u": u, "v": v, "eps": eps, "delta": delta, "A1": contribution_budget,
              "A0": sparsity_budget, "tau": None if tau == INF else tau}
    if tau == INF:
        W = window if window is not None else int(math.ceil(40 / a))
        p = DLapParam(a, W)  # windowed stand-in; rescaled to the true pmf below
        tail = 1.0 - math.fsum(dlap_pmf(DLapParam(a), z) for z in range(-W, W + 1))
        scale = 1.0 - tail
    else:
        W, p, tail, scale = int(tau), DLapParam(a, tau), 0.0, 1.0
    if (2 * W + 2 * MAX_TDLAP_L1 + 1) ** len(u) > 4 * DEFAULT_SPACE_BOUND:
        raise SpaceTooLarge("enumeration grid too large")
    Ps, Qs = [], []
    for a_i, b_i in zip(u, v):
        lo, hi = min(a_i, b_i) - W, max(a_i, b_i) + W
        Ps.append(_marginal(p, lo, hi, a_i) * scale)
        Qs.append(_marginal(p, lo, hi, b_i) * scale)
    d = _hockey_arrays(_product(Ps), _product(Qs), eps)
    params["window_tail"] = tail * len(u)
    # Outside the window at most the escaped mass can add to the divergence.
    return AuditRecord("tdlap", params, d, delta, d <= delta + SLACK)


def audit_tail(eps: float, delta: float, contribution_budget: int, sparsity_budget: int,
               shift: int) -> AuditRecord:
    """Tail bound: ``Pr[xi > tau - shift] <= delta`` when ``tau >= ln(1/delta)/a + shift``."""
    tau = compute_tau(contribution_budget, sparsity_budget, eps, delta)
    a = eps / contribution_budget
    params = {"eps": eps, "delta": delta, "A1": contribution_budget,
              "A0": sparsity_budget, "shift": shift, "tau": tau}
    applies = tau >= math.log(1 / delta) / a + shift
    params["applies"] = applies
    t = float(tdlap_tail(DLapParam(a, tau), shift))
    return AuditRecord("tdlap_tail", params, t, delta, (not applies) or t <= delta)


def compositions(total: int, parts: int) -> List[Tuple[int, ...]]:
    """Ordered tuples of ``parts`` positive integers summing to ``total``."""
    if parts <= 0 or total < parts:
        return []
    return [tuple(b - a for a, b in zip((0,) + cut, cut + (total,)))
            for cut in itertools.combinations(range(1, total), parts - 1)]


def tdlap_grid(dims=(1, 2, 3), shifts=(1, 2, 3, 4), sparsities=(1, 2),
               epsilons=(0.5, 1.0, 2.0), deltas=(0.1, 0.01)) -> List[AuditRecord]:
    """Runs both truncated-noise checks over a parameter grid.

    For each ``(d, shift, s)`` the difference vectors are every composition of
    ``shift`` into ``min(s, d, shift)`` parts, placed in the leading
    coordinates, with alternating signs in a second variant.
    """
    records = []
    for d, shift, s, eps, delta in itertools.product(dims, shifts, sparsities, epsilons, deltas):
        k = min(s, d, shift)
        for comp in compositions(shift, k):
            for signed in (False, True):
                diff = [c * (-1 if signed and i % 2 else 1) for i, c in enumerate(comp)]
                diff += [0] * (d - k)
                records.append(audit_tdlap([0] * d, diff, eps, delta, shift, s))
        records.append(audit_tail(eps, delta, shift, s, shift))
    return records


# --- transcript distributions -----------------------------------------------------------

def exact_mechanism_distribution(mechanism: InteractiveMechanism, adversary,
                                 transform: Optional[Callable[[Any], Any]] = None,
                                 bound: int = DEFAULT_SPACE_BOUND, *,
                                 max_steps: int = 1000) -> FiniteDistribution:
    """Exact distribution over response transcripts.

    ``adversary`` is a deterministic function of the response history or an
    :class:`AdversaryDistribution`. ``transform`` maps each database before
    the mechanism sees it; pass ``lambda d: remove_unit(d, x)`` for the
    ``D^{-x}`` variant.
    """
    if isinstance(adversary, AdversaryDistribution):
        parts = [exact_mechanism_distribution(mechanism, a, transform, bound,
                                              max_steps=max_steps)
                 for a in adversary.adversaries]
        return mixture(adversary.weights, parts)

    out: List[Tuple[float, Tuple]] = []
    frontier = [(1.0, mechanism.initial_state(), ())]
    while frontier:
        p, state, hist = frontier.pop()
        move = adversary(hist)
        if move is HALT:
            out.append((p, hist))
            continue
        if len(hist) >= max_steps:
            raise SpaceTooLarge(f"adversary did not halt within {max_steps} turns")
        db, query = move
        if transform is not None:
            db = transform(db)
        for q, nxt, resp in mechanism.exact_step(state, db, query):
            if q > 0:
                frontier.append((p * q, nxt, hist + (resp,)))
        if len(frontier) + len(out) > bound:
            raise SpaceTooLarge(f"transcript space exceeds {bound}")
    return FiniteDistribution.from_pairs(out)


def audit_unit_removal(mechanism: InteractiveMechanism, adversary, remove: Callable,
                       eps: float, delta: float, *, label: str = "removal",
                       params: Optional[Mapping[str, Any]] = None,
                       bound: int = DEFAULT_SPACE_BOUND) -> AuditRecord:
    """Hockey-stick between transcripts on ``D`` and on ``remove(D)``."""
    P = exact_mechanism_distribution(mechanism, adversary, None, bound)
    Q = exact_mechanism_distribution(mechanism, adversary, remove, bound)
    d = hockey_stick_delta(P, Q, eps)
    return AuditRecord(label, dict(params or {}, eps=eps), d, delta, d <= delta + SLACK)


# --- rollouts --------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class RolloutAudit:
    passed: bool
    per_unit: Mapping[Hashable, Tuple[Fraction, Fraction]]
    failing: Tuple[Hashable, ...]
    caps: Tuple[Fraction, Fraction]


def audit_rollout(trace: Union[str, os.PathLike, Iterable[str]],
                  caps: Optional[Tuple[Any, Any]] = None) -> RolloutAudit:
    """Replays a trace and checks every unit's summed rollout against the caps.

    ``caps`` defaults to the ``(eps_star, delta_star)`` in the trace header.
    Raises ValueError on a malformed trace.
    """
    if isinstance(trace, (str, os.PathLike)):
        with open(trace) as f:
            header, log = read_trace(f)
    else:
        header, log = read_trace(trace)
    if not log:
        zero = (Fraction(0), Fraction(0))
        c = tuple(Fraction(str(x)) for x in caps) if caps else zero
        return RolloutAudit(True, {}, (), c)
    if caps is None:
        caps = (header["eps_star"], header["delta_star"])
    eps_cap, delta_cap = (Fraction(str(c)) for c in caps)
    units = sorted({u for t in log for u, _, _ in t.admitted}, key=repr)
    per_unit = {u: rollout_account(log, u, header["A1"], header["A0"]) for u in units}
    failing = tuple(u for u, (e, d) in per_unit.items() if e > eps_cap or d > delta_cap)
    return RolloutAudit(not failing, per_unit, failing, (eps_cap, delta_cap))

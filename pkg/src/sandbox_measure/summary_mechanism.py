"""End-to-end summary-report mechanism over (unit, report) databases.

One step of :class:`SummaryMechanism` performs, in order:

1. contribution bounding per privacy unit (what the clients enforce),
2. per-report privacy budget bounding (what the budget service enforces),
   returning :data:`ABORT` if any queried report would exceed its cap,
3. noisy summation per key with discrete Laplace noise of scale ``eps / A1``,
   truncated at ``tau`` and thresholded when ``delta > 0``.

Databases come in two flavors. In ARA databases the unit is a source and
removing a unit moves its records to the dummy source ``X_BOT``. In PAA
databases the unit is a ``(device, window)`` pair and removing it replaces the
attached shared-storage states with the empty storage ``Y_BOT``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from decimal import Decimal
from fractions import Fraction
from typing import (Any, Callable, Dict, FrozenSet, Hashable, Iterable, List,
                    Mapping, Optional, Sequence, TextIO, Tuple, Union)

import numpy as np

from sandbox_measure.aggregation import Number, as_decimal
from sandbox_measure.interactive import InteractiveMechanism
from sandbox_measure.noise import INF, DLapParam, compute_tau, pmf_table, sample_dlap

ARA = "ara"
PAA = "paa"


class _Sentinel:
    def __init__(self, name):
        self.name = name

    def __repr__(self):
        return self.name

    def __reduce__(self):
        return (_sentinel, (self.name,))


_SENTINELS: Dict[str, _Sentinel] = {}


def _sentinel(name):
    return _SENTINELS.setdefault(name, _Sentinel(name))


X_BOT = _sentinel("X_BOT")
Y_BOT = _sentinel("Y_BOT")
ABORT = _sentinel("ABORT")


@dataclasses.dataclass(frozen=True)
class Record:
    """One record ``(x, y)``.

    ``y`` identifies the trigger, equivalently the report id. ``payload``
    holds whatever the contribution function reads besides the unit: the
    shared-storage state for PAA, trigger data for event-level records.
    """
    unit: Hashable
    y: Hashable
    payload: Hashable = None


@dataclasses.dataclass(frozen=True)
class MeasurementDatabase:
    records: Tuple[Record, ...]
    flavor: str = ARA

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.flavor not in (ARA, PAA):
            raise ValueError(f"unknown flavor {self.flavor!r}")
        ys = [r.y for r in self.records]
        if len(set(ys)) != len(ys):
            raise ValueError("each y may appear in at most one record")

    def units(self) -> FrozenSet[Hashable]:
        return frozenset(r.unit for r in self.records)

    def __len__(self):
        return len(self.records)


@dataclasses.dataclass(frozen=True)
class UnitRange:
    """All PAA units ``(device, t)`` with ``t > after``."""
    device: Hashable
    after: int


def remove_unit(db: MeasurementDatabase, target) -> MeasurementDatabase:
    """Returns ``D^{-x}``; the record count never changes."""
    if isinstance(target, UnitRange):
        if db.flavor != PAA:
            raise ValueError("unit ranges only apply to PAA databases")
        hit = lambda u: (isinstance(u, tuple) and len(u) == 2
                         and u[0] == target.device and u[1] > target.after)
    else:
        hit = lambda u: u == target
    if db.flavor == ARA:
        recs = (dataclasses.replace(r, unit=X_BOT) if hit(r.unit) else r
                for r in db.records)
    else:
        recs = (dataclasses.replace(r, payload=Y_BOT) if hit(r.unit) else r
                for r in db.records)
    return MeasurementDatabase(tuple(recs), db.flavor)


ContributionFn = Callable[[Record], Tuple[int, int]]


@dataclasses.dataclass(frozen=True)
class MsrQuery:
    eps: Number
    delta: Number
    Y: FrozenSet[Hashable]
    f: ContributionFn

    def __post_init__(self):
        object.__setattr__(self, "eps", as_decimal(self.eps))
        object.__setattr__(self, "delta", as_decimal(self.delta))
        object.__setattr__(self, "Y", frozenset(self.Y))
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")


@dataclasses.dataclass(frozen=True)
class TurnRecord:
    eps: Decimal
    delta: Decimal
    Y: FrozenSet[Hashable]
    aborted: bool
    admitted: Tuple[Tuple[Hashable, Hashable, int], ...]  # (unit, y, value)


@dataclasses.dataclass(frozen=True)
class MsrState:
    accum: Mapping[Hashable, Tuple[int, int]]           # unit -> (L_x, s_x)
    budgets: Mapping[Hashable, Tuple[Decimal, Decimal]]  # y -> (eps_y, delta_y)
    reports: Mapping[Hashable, Tuple[Hashable, int, int]]  # y -> (unit, key, value)
    log: Tuple[TurnRecord, ...] = ()


class SummaryMechanism(InteractiveMechanism):
    """The summary-report mechanism.

    Args:
      contribution_budget: A1.
      sparsity_budget: A0.
      eps_star, delta_star: per-report caps.
      key_universe: keys considered in the noisy summation besides those that
        received contributions. With ``delta == 0`` every key here is released.
      zero_noise: audit hook; replaces every noise draw by 0.
    """

    def __init__(self, contribution_budget: int, sparsity_budget: int,
                 eps_star: Number, delta_star: Number,
                 key_universe: Iterable[int] = (), *, zero_noise: bool = False):
        self.a1 = contribution_budget
        self.a0 = sparsity_budget
        self.eps_star = as_decimal(eps_star)
        self.delta_star = as_decimal(delta_star)
        self.key_universe = frozenset(key_universe)
        self.zero_noise = zero_noise

    def initial_state(self) -> MsrState:
        return MsrState({}, {}, {})

    # phases 1 and 2, shared by the sampling and the exact step
    def _bound(self, state: MsrState, db: MeasurementDatabase, q: MsrQuery):
        accum = dict(state.accum)
        reports = dict(state.reports)
        admitted = []
        for rec in db.records:
            # The dummy source never produces a contribution.
            if rec.unit is X_BOT or rec.y in reports:
                continue
            k, v = q.f(rec)
            if v < 0:
                raise ValueError("contributions must be non-negative")
            lx, sx = accum.get(rec.unit, (0, 0))
            if lx + v <= self.a1 and sx + 1 <= self.a0:
                accum[rec.unit] = (lx + v, sx + 1)
                reports[rec.y] = (rec.unit, k, v)
                admitted.append((rec.unit, rec.y, v))

        zero = (Decimal(0), Decimal(0))
        over = any(
            state.budgets.get(y, zero)[0] + q.eps > self.eps_star
            or state.budgets.get(y, zero)[1] + q.delta > self.delta_star
            for y in q.Y)
        budgets = dict(state.budgets)
        if not over:
            for y in q.Y:
                e, d = budgets.get(y, zero)
                budgets[y] = (e + q.eps, d + q.delta)
        turn = TurnRecord(q.eps, q.delta, q.Y, over, tuple(admitted))
        return MsrState(accum, budgets, reports, state.log + (turn,)), over

    def _sums(self, state: MsrState, q: MsrQuery) -> Dict[int, int]:
        sums = {k: 0 for k in self.key_universe}
        for y in q.Y:
            if y in state.reports:
                _, k, v = state.reports[y]
                sums[k] = sums.get(k, 0) + v
        return sums

    def tau(self, q: MsrQuery):
        return compute_tau(self.a1, self.a0, float(q.eps), float(q.delta))

    def step(self, state, database, query, rng):
        state, aborted = self._bound(state, database, query)
        if aborted:
            return state, ABORT
        tau = self.tau(query)
        sums = self._sums(state, query)
        keys = sorted(sums)
        if self.zero_noise or not keys:
            noise = [0] * len(keys)
        else:
            noise = sample_dlap(DLapParam(float(query.eps) / self.a1, tau), rng,
                                len(keys)).tolist()
        out = []
        for k, z in zip(keys, noise):
            c = sums[k] + int(z)
            if tau == INF or c > tau:
                out.append((k, c))
        return state, tuple(out)

    def exact_step(self, state, database, query):
        state, aborted = self._bound(state, database, query)
        if aborted:
            return [(1.0, state, ABORT)]
        tau = self.tau(query)
        sums = self._sums(state, query)
        if self.zero_noise:
            out = tuple((k, c) for k, c in sorted(sums.items())
                        if tau == INF or c > tau)
            return [(1.0, state, out)]
        if tau == INF:
            raise ValueError("exact enumeration needs truncated noise (delta > 0)")
        support, probs = pmf_table(DLapParam(float(query.eps) / self.a1, tau))
        # Per key: either suppressed, or released with value c > tau.
        per_key = []
        for k in sorted(sums):
            s = sums[k]
            released = [(float(p), (k, int(s + z))) for z, p in zip(support, probs)
                        if s + z > tau]
            hidden = math.fsum(float(p) for z, p in zip(support, probs) if s + z <= tau)
            per_key.append([(hidden, None)] + released)
        combos = [(1.0, ())]
        for options in per_key:
            combos = [(pc * po, out + ((o,) if o is not None else ()))
                      for pc, out in combos for po, o in options if po > 0]
        return [(p, state, out) for p, out in combos]


def msr_step(state: MsrState, db: MeasurementDatabase, q: MsrQuery,
             rng: np.random.Generator, mechanism: SummaryMechanism):
    return mechanism.step(state, db, q, rng)


# --- rollout accounting ----------------------------------------------------------

def rollout(log: Sequence[TurnRecord], unit: Hashable, contribution_budget: int,
            sparsity_budget: int) -> List[Tuple[Fraction, Fraction]]:
    """Per-turn ``(eps_{x,t}, delta_{x,t})`` for ``unit``, as exact fractions.

    ``eps_{x,t} = eps_t / A1 * sum of v_y`` and ``delta_{x,t} = delta_t / A0 *
    |Y_{x,t}|`` over queried reports attributed to the unit; aborted turns
    release nothing and consume nothing.
    """
    owner: Dict[Hashable, Tuple[Hashable, int]] = {}
    out = []
    for turn in log:
        for u, y, v in turn.admitted:
            owner[y] = (u, v)
        if turn.aborted:
            out.append((Fraction(0), Fraction(0)))
            continue
        mine = [owner[y][1] for y in turn.Y if y in owner and owner[y][0] == unit]
        out.append((Fraction(turn.eps) * sum(mine) / contribution_budget,
                    Fraction(turn.delta) * len(mine) / sparsity_budget))
    return out


def rollout_account(log: Sequence[TurnRecord], unit: Hashable,
                    contribution_budget: int, sparsity_budget: int) -> Tuple[Fraction, Fraction]:
    per_turn = rollout(log, unit, contribution_budget, sparsity_budget)
    return (sum((e for e, _ in per_turn), Fraction(0)),
            sum((d for _, d in per_turn), Fraction(0)))


def _label(x) -> Any:
    if isinstance(x, (str, int)) and not isinstance(x, bool):
        return x
    if isinstance(x, tuple):
        return [_label(i) for i in x]
    return repr(x)


def write_trace(out: TextIO, log: Sequence[TurnRecord], contribution_budget: int,
                sparsity_budget: int, eps_star: Number, delta_star: Number) -> None:
    """Writes a line-delimited trace: a header, then per turn its admitted
    reports followed by one turn marker (carrying the abort flag)."""
    header = {"kind": "header", "A1": contribution_budget, "A0": sparsity_budget,
              "eps_star": str(as_decimal(eps_star)), "delta_star": str(as_decimal(delta_star))}
    out.write(json.dumps(header) + "\n")
    for t, turn in enumerate(log):
        for u, y, v in turn.admitted:
            out.write(json.dumps({"kind": "report", "turn": t, "unit": _label(u),
                                  "y": _label(y), "value": v}) + "\n")
        out.write(json.dumps({
            "kind": "turn", "turn": t, "eps": str(turn.eps), "delta": str(turn.delta),
            "Y": sorted((_label(y) for y in turn.Y), key=json.dumps),
            "aborted": turn.aborted}) + "\n")


def _hashable(x):
    return tuple(_hashable(i) for i in x) if isinstance(x, list) else x


def read_trace(lines: Iterable[str]):
    """Parses :func:`write_trace` output into ``(header, log)``.

    Raises ValueError on malformed input.
    """
    header = None
    log: List[TurnRecord] = []
    pending: List[Tuple[Hashable, Hashable, int]] = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            kind = rec["kind"]
            if kind == "header":
                header = {"A1": int(rec["A1"]), "A0": int(rec["A0"]),
                          "eps_star": Decimal(rec["eps_star"]),
                          "delta_star": Decimal(rec["delta_star"])}
            elif kind == "report":
                if int(rec["turn"]) != len(log):
                    raise ValueError("report line out of turn order")
                pending.append((_hashable(rec["unit"]), _hashable(rec["y"]), int(rec["value"])))
            elif kind == "turn":
                if int(rec["turn"]) != len(log):
                    raise ValueError("turn numbers must be consecutive")
                log.append(TurnRecord(Decimal(rec["eps"]), Decimal(rec["delta"]),
                                      frozenset(_hashable(y) for y in rec["Y"]),
                                      bool(rec["aborted"]), tuple(pending)))
                pending = []
            else:
                raise ValueError(f"unknown record kind {kind!r}")
        except (KeyError, TypeError, ArithmeticError, json.JSONDecodeError) as e:
            raise ValueError(f"malformed trace line {n}: {e}") from e
    if pending:
        raise ValueError("trailing report lines without a turn marker")
    if header is None and log:
        raise ValueError("trace has no header")
    return header, log


# --- parameter arithmetic ------------------------------------------------------------

def group_privacy(eps: float, delta: float, k: int) -> Tuple[float, float]:
    """Parameters for inputs ``k`` adjacency steps apart."""
    if k < 1 or int(k) != k:
        raise ValueError("k must be a positive integer")
    if not eps > 0:
        raise ValueError("eps must be positive")
    if k == 1:
        return eps, delta
    return k * eps, delta * (math.expm1(k * eps) / math.expm1(eps))


def gradual_expiration(eps: float, delta: float, t1: int, t2: int) -> Tuple[float, float]:
    """Guarantee between removing a device after window ``t1`` vs after ``t2``."""
    if not t1 < t2:
        raise ValueError("need t1 < t2")
    return group_privacy(eps, delta, t2 - t1)

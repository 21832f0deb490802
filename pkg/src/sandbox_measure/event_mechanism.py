"""Event-level reports.

:class:`EventLevelClient` is the noiseless client: triggers add value to the
most recent matching source, and at each reporting window every newly crossed
summary bucket produces a report while the source is below ``max_rep``.

The noisy variant is interactive randomized response: once per source, commit
either to answering truthfully (probability ``(e^eps - 1) / (e^eps + |O| - 1)``)
or to a uniformly drawn member of the output set ``O``, then answer every
reporting step accordingly.

Output configurations are count tuples, one count per (trigger data, window)
slot in step order. Buckets cross in increasing order, so the counts determine
which buckets were reported.
"""

from __future__ import annotations

import copy
import dataclasses
import itertools
import math
from typing import (Any, Callable, Dict, FrozenSet, Hashable, Iterable, List,
                    Mapping, Optional, Sequence, Tuple, Union)

import numpy as np

from sandbox_measure.core import filters_match
from sandbox_measure.interactive import InteractiveMechanism
from sandbox_measure.summary_mechanism import X_BOT, MeasurementDatabase

MAX_SPEC_ENTRIES = 32
MAX_WINDOWS = 5
TRIG_DATA_BITS = 5
DEFAULT_OUTPUT_LIMIT = 1_000_000


@dataclasses.dataclass(frozen=True)
class SpecEntry:
    trig_data: int
    windows: Tuple[int, ...]   # tick offsets from source registration
    buckets: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(self.windows))
        object.__setattr__(self, "buckets", tuple(self.buckets))
        if not 0 <= self.trig_data < (1 << TRIG_DATA_BITS):
            raise ValueError(f"trigData must be a {TRIG_DATA_BITS}-bit integer")
        if not 1 <= len(self.windows) <= MAX_WINDOWS:
            raise ValueError(f"need 1 to {MAX_WINDOWS} reporting windows")
        if any(b <= a for a, b in zip(self.windows, self.windows[1:])) or self.windows[0] <= 0:
            raise ValueError("windows must be positive and strictly increasing")
        if not self.buckets or self.buckets[0] <= 0 or any(
                b <= a for a, b in zip(self.buckets, self.buckets[1:])):
            raise ValueError("buckets must be positive and strictly increasing")


@dataclasses.dataclass(frozen=True)
class TriggerSpec:
    entries: Tuple[SpecEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not 1 <= len(self.entries) <= MAX_SPEC_ENTRIES:
            raise ValueError(f"a trigger spec has 1 to {MAX_SPEC_ENTRIES} entries")
        data = [e.trig_data for e in self.entries]
        if len(set(data)) != len(data):
            raise ValueError("trigData values must be distinct")

    def entry(self, trig_data: int) -> Optional[SpecEntry]:
        for e in self.entries:
            if e.trig_data == trig_data:
                return e
        return None

    def step_ticks(self) -> Tuple[int, ...]:
        return tuple(sorted({w for e in self.entries for w in e.windows}))

    def slots(self) -> Tuple[Tuple[int, int], ...]:
        """``(trig_data, window_index)`` per output coordinate, in step order."""
        out = []
        for tick in self.step_ticks():
            for e in self.entries:
                if tick in e.windows:
                    out.append((e.trig_data, e.windows.index(tick)))
        return tuple(out)

    def step_slots(self) -> Tuple[Tuple[int, ...], ...]:
        """Coordinate indices reported at each step (1 step per distinct tick)."""
        slots = self.slots()
        ticks = self.step_ticks()
        out = []
        pos = 0
        for tick in ticks:
            n = sum(1 for e in self.entries if tick in e.windows)
            out.append(tuple(range(pos, pos + n)))
            pos += n
        assert pos == len(slots)
        return tuple(out)


class OutputSetTooLarge(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class OutputSet:
    spec: TriggerSpec
    max_rep: int
    outputs: Tuple[Tuple[int, ...], ...]

    def __len__(self):
        return len(self.outputs)

    def __contains__(self, o):
        return tuple(o) in self._members

    @property
    def _members(self):
        try:
            return self.__dict__["_member_set"]
        except KeyError:
            s = frozenset(self.outputs)
            object.__setattr__(self, "_member_set", s)
            return s

    @property
    def n_steps(self) -> int:
        return len(self.spec.step_ticks())

    def project(self, o: Sequence[int], i: int) -> Tuple[int, ...]:
        """The part of ``o`` reported at step ``i`` (1-based)."""
        return tuple(o[j] for j in self.spec.step_slots()[i - 1])

    def step_options(self, i: int) -> FrozenSet[Tuple[int, ...]]:
        return frozenset(self.project(o, i) for o in self.outputs)

    def per_trig_data_options(self) -> Dict[int, int]:
        """Number of count patterns per trigData ignoring the max_rep cap."""
        return {e.trig_data: math.comb(len(e.buckets) + len(e.windows), len(e.windows))
                for e in self.spec.entries}


def _entry_options(e: SpecEntry):
    b = len(e.buckets)
    return [c for c in itertools.product(range(b + 1), repeat=len(e.windows)) if sum(c) <= b]


def enumerate_outputs(spec: TriggerSpec, max_rep: int,
                      limit: int = DEFAULT_OUTPUT_LIMIT) -> OutputSet:
    """All valid report configurations for one source.

    Each trigData reports at most one count per window with at most as many
    reports in total as it has buckets; the grand total is capped at max_rep.
    """
    if max_rep < 0:
        raise ValueError("max_rep must be non-negative")
    per_entry = [_entry_options(e) for e in spec.entries]
    if math.prod(len(o) for o in per_entry) > limit:
        raise OutputSetTooLarge(f"output set exceeds {limit} candidates")
    slots = spec.slots()
    where = {}
    for pos, (td, w) in enumerate(slots):
        where[(td, w)] = pos
    outputs = []
    for combo in itertools.product(*per_entry):
        if sum(map(sum, combo)) > max_rep:
            continue
        o = [0] * len(slots)
        for e, counts in zip(spec.entries, combo):
            for w, c in enumerate(counts):
                o[where[(e.trig_data, w)]] = c
        outputs.append(tuple(o))
    return OutputSet(spec, max_rep, tuple(sorted(set(outputs))))


# --- noiseless client ---------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class EventSource:
    src_id: str
    dest: str
    exp_date: int
    src_filt: FrozenSet[str]
    max_rep: int
    trig_spec: TriggerSpec
    reg_time: int = 0
    seq: int = 0

    def __post_init__(self):
        object.__setattr__(self, "src_filt", frozenset(self.src_filt))


@dataclasses.dataclass(frozen=True)
class EventTrigger:
    dest: str
    trig_id: str
    trig_filt: FrozenSet[str]
    trig_data: int
    trig_value: int
    time: int

    def __post_init__(self):
        object.__setattr__(self, "trig_filt", frozenset(self.trig_filt))


@dataclasses.dataclass(frozen=True)
class WindowPass:
    src_id: str
    trig_data: int
    window_index: int


@dataclasses.dataclass(frozen=True)
class EventReport:
    src_id: str
    trig_data: int
    bucket: int
    window_index: int

    def to_json(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class EventSourceState:
    sources: List[EventSource] = dataclasses.field(default_factory=list)
    V: Dict[Tuple[str, int], int] = dataclasses.field(default_factory=dict)
    U: Dict[Tuple[str, int], int] = dataclasses.field(default_factory=dict)
    N: Dict[str, int] = dataclasses.field(default_factory=dict)
    passed: set = dataclasses.field(default_factory=set)   # WindowPass already applied
    retired: set = dataclasses.field(default_factory=set)  # srcIds no longer attributable

    def source(self, src_id: str) -> EventSource:
        for s in self.sources:
            if s.src_id == src_id:
                return s
        raise KeyError(src_id)


def _attributable(state: EventSourceState, s: EventSource, now: int) -> bool:
    return s.reg_time <= now <= s.exp_date and s.src_id not in state.retired


def _last_tick(s: EventSource) -> int:
    return max(w for e in s.trig_spec.entries for w in e.windows)


def _apply(state: EventSourceState, event) -> List[EventReport]:
    if isinstance(event, EventSource):
        if any(s.src_id == event.src_id for s in state.sources):
            raise ValueError(f"duplicate srcId {event.src_id!r}")
        state.sources.append(event)
        state.N[event.src_id] = 0
        for e in event.trig_spec.entries:
            state.V[(event.src_id, e.trig_data)] = 0
            state.U[(event.src_id, e.trig_data)] = 0
        return []
    if isinstance(event, EventTrigger):
        if event.trig_value <= 0:
            return []
        for s in sorted(state.sources, key=lambda s: (s.reg_time, s.seq), reverse=True):
            if not _attributable(state, s, event.time):
                continue
            if event.dest != s.dest or not filters_match(s.src_filt, event.trig_filt):
                continue
            if s.trig_spec.entry(event.trig_data) is not None:
                state.V[(s.src_id, event.trig_data)] += event.trig_value
                break
        return []
    if isinstance(event, WindowPass):
        s = state.source(event.src_id)
        entry = s.trig_spec.entry(event.trig_data)
        if entry is None or (event.src_id, event.trig_data, event.window_index) in state.passed:
            return []
        state.passed.add((event.src_id, event.trig_data, event.window_index))
        key = (s.src_id, event.trig_data)
        # A window that passes with the cap already reached retires the source,
        # as does its final window.
        if (state.N[s.src_id] >= s.max_rep
                or entry.windows[event.window_index] == _last_tick(s)):
            state.retired.add(s.src_id)
        reports = []
        for b in entry.buckets:
            if state.U[key] < b <= state.V[key]:
                state.U[key] = b
                if state.N[s.src_id] < s.max_rep:
                    state.N[s.src_id] += 1
                    reports.append(EventReport(s.src_id, event.trig_data, b, event.window_index))
        return reports
    raise TypeError(f"unknown event {event!r}")


def el_apply(state: EventSourceState, event) -> Tuple[EventSourceState, List[EventReport]]:
    """Functional form: returns a new state and the reports this event emits."""
    new = copy.deepcopy(state)
    return new, _apply(new, event)


def due_windows(state: EventSourceState, now: int) -> List[Tuple[int, WindowPass]]:
    """Window passings with absolute tick <= now not yet applied, in time order."""
    due = []
    for s in state.sources:
        for e in s.trig_spec.entries:
            for w, off in enumerate(e.windows):
                tick = s.reg_time + off
                if tick <= now and (s.src_id, e.trig_data, w) not in state.passed:
                    due.append((tick, s.seq, e.trig_data, WindowPass(s.src_id, e.trig_data, w)))
    due.sort(key=lambda t: t[:3])
    return [(t[0], t[3]) for t in due]


class EventLevelClient:
    """Noiseless event-level client driven by logical time."""

    def __init__(self):
        self.state = EventSourceState()
        self.log: List[Tuple[int, EventReport]] = []   # (window tick, report)

    def advance_to(self, now: int) -> List[EventReport]:
        out = []
        for tick, wp in due_windows(self.state, now):
            reps = _apply(self.state, wp)
            self.log.extend((tick, r) for r in reps)
            out.extend(reps)
        return out

    def register_source(self, s: EventSource) -> List[EventReport]:
        out = self.advance_to(s.reg_time)
        _apply(self.state, s)
        return out

    def register_trigger(self, t: EventTrigger) -> List[EventReport]:
        out = self.advance_to(t.time)
        _apply(self.state, t)
        return out


def reports_to_output(spec: TriggerSpec, reports: Iterable[EventReport]) -> Tuple[int, ...]:
    """Count tuple (slot order) of one source's reports."""
    slots = spec.slots()
    counts = [0] * len(slots)
    for r in reports:
        counts[slots.index((r.trig_data, r.window_index))] += 1
    return tuple(counts)


def output_to_reports(source: EventSource, o: Sequence[int]) -> List[EventReport]:
    """Reports a fixed configuration ``o`` stands for, buckets taken in order."""
    seen: Dict[int, int] = {}
    out = []
    for (td, w), c in zip(source.trig_spec.slots(), o):
        buckets = source.trig_spec.entry(td).buckets
        for _ in range(c):
            j = seen.get(td, 0)
            out.append(EventReport(source.src_id, td, buckets[j], w))
            seen[td] = j + 1
    return out


# --- interactive randomized response --------------------------------------------------

class _Truthful:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "TRUTHFUL"

    def __reduce__(self):
        return (_Truthful, ())


TRUTHFUL = _Truthful()


def truthful_probability(eps: float, n_outputs: int) -> float:
    """``(e^eps - 1) / (e^eps + n - 1)``."""
    em1 = math.expm1(eps)
    return em1 / (em1 + n_outputs)


def sample_commitment(eps: float, outputs: OutputSet, rng: np.random.Generator):
    """TRUTHFUL, or a uniformly drawn member of ``outputs``."""
    if rng.random() < truthful_probability(eps, len(outputs)):
        return TRUTHFUL
    return outputs.outputs[int(rng.integers(len(outputs)))]


def commitment_distribution(eps: float, outputs: OutputSet):
    em1 = math.expm1(eps)
    z = em1 + len(outputs)
    return [(em1 / z, TRUTHFUL)] + [(1.0 / z, o) for o in outputs.outputs]


@dataclasses.dataclass(frozen=True)
class IrrState:
    i: int = 1
    s_star: Any = None   # None until the first step draws it


def irr_step(state: IrrState, events, query: Callable[[Any], Tuple[int, ...]],
             eps: float, outputs: OutputSet, rng: np.random.Generator):
    """One step: returns ``(next_state, output for step i)``."""
    s_star = state.s_star
    if state.i == 1 or s_star is None:
        s_star = sample_commitment(eps, outputs, rng)
    return _irr_respond(IrrState(state.i, s_star), events, query, outputs)


def _irr_respond(state: IrrState, events, query, outputs: OutputSet):
    if state.s_star is TRUTHFUL:
        out = tuple(query(events))
    else:
        out = outputs.project(state.s_star, state.i) if state.i <= outputs.n_steps else ()
    return IrrState(state.i + 1, state.s_star), out


# --- per-unit mechanism ------------------------------------------------------------------

UnitQuery = Callable[[Tuple[Tuple[int, Any], ...], int], Tuple[int, ...]]


def bucket_query(spec: TriggerSpec, max_rep: int) -> UnitQuery:
    """Truthful step output: replay the noiseless client over the unit's events.

    ``events`` are ``(arrival_step, (trig_data, value))`` pairs; triggers that
    arrive at step ``j`` count before step ``j``'s windows pass.
    """
    entries = {e.trig_data: e for e in spec.entries}
    ticks = spec.step_ticks()

    def query(events, i):
        V = {td: 0 for td in entries}
        U = {td: 0 for td in entries}
        n = 0
        step_out = ()
        for step in range(1, min(i, len(ticks)) + 1):
            for arrived, (td, value) in events:
                if arrived == step and td in V and value > 0:
                    V[td] += value
            tick = ticks[step - 1]
            counts = []
            for e in spec.entries:
                if tick not in e.windows:
                    continue
                c = 0
                for b in e.buckets:
                    if U[e.trig_data] < b <= V[e.trig_data]:
                        U[e.trig_data] = b
                        if n < max_rep:
                            n += 1
                            c += 1
                counts.append(c)
            step_out = tuple(counts)
        return step_out if i <= len(ticks) else ()
    return query


@dataclasses.dataclass(frozen=True)
class MerState:
    i: int
    s_star: Tuple[Tuple[Hashable, Any], ...]           # (unit, commitment), sorted
    events: Tuple[Tuple[Hashable, Tuple[Tuple[int, Any], ...]], ...]

    def commitment(self, unit):
        return dict(self.s_star).get(unit)

    def unit_events(self, unit):
        return dict(self.events).get(unit, ())


def _unit_order(units):
    return sorted(units, key=repr)


class EventMechanism(InteractiveMechanism):
    """Runs randomized response independently per unit on that unit's events.

    Args:
      eps: privacy parameter.
      outputs: unit -> OutputSet.

    A step's query is a mapping unit -> :data:`UnitQuery`, or ``None`` to use
    :func:`bucket_query` for every unit. Database records are
    ``Record(unit, y, (trig_data, value))``; records of ``X_BOT`` are ignored.
    """

    def __init__(self, eps: float, outputs: Mapping[Hashable, OutputSet]):
        self.eps = eps
        self.outputs = dict(outputs)
        self.units = tuple(_unit_order(self.outputs))
        self._default = {u: bucket_query(o.spec, o.max_rep) for u, o in self.outputs.items()}

    def initial_state(self):
        return MerState(1, (), tuple((u, ()) for u in self.units))

    def _ingest(self, state: MerState, db: MeasurementDatabase):
        ev = dict(state.events)
        for rec in db.records:
            if rec.unit is X_BOT or rec.unit not in self.outputs:
                continue
            ev[rec.unit] = ev[rec.unit] + ((state.i, rec.payload),)
        return tuple((u, ev[u]) for u in self.units)

    def _respond(self, state: MerState, events, s_star, queries):
        queries = queries or {}
        out = []
        for u in self.units:
            q = queries.get(u, self._default[u])
            unit_state = IrrState(state.i, s_star[u])
            _, r = _irr_respond(unit_state, dict(events)[u], lambda ev: q(ev, state.i),
                                self.outputs[u])
            out.append((u, r))
        nxt = MerState(state.i + 1, tuple((u, s_star[u]) for u in self.units), events)
        return nxt, tuple(out)

    def step(self, state, database, query, rng):
        events = self._ingest(state, database)
        if state.i == 1:
            s_star = {u: sample_commitment(self.eps, self.outputs[u], rng) for u in self.units}
        else:
            s_star = dict(state.s_star)
        return self._respond(state, events, s_star, query)

    def exact_step(self, state, database, query):
        events = self._ingest(state, database)
        if state.i != 1:
            nxt, r = self._respond(state, events, dict(state.s_star), query)
            return [(1.0, nxt, r)]
        per_unit = [commitment_distribution(self.eps, self.outputs[u]) for u in self.units]
        result = []
        for combo in itertools.product(*per_unit):
            p = math.prod(c[0] for c in combo)
            s_star = {u: c[1] for u, c in zip(self.units, combo)}
            nxt, r = self._respond(state, events, s_star, query)
            result.append((p, nxt, r))
        return result


def mer_step(state: MerState, db: MeasurementDatabase, queries, mechanism: EventMechanism,
             rng: np.random.Generator):
    return mechanism.step(state, db, queries, rng)


class NoisyEventClient(EventLevelClient):
    """Event-level client with randomized response per source.

    The commitment for each source is drawn at registration from a substream
    keyed by the source's ``seq``, so replays are exact.
    """

    def __init__(self, eps: float, seed: int, *, force_truthful: bool = False):
        super().__init__()
        self.eps = eps
        self.seed = seed
        self.force_truthful = force_truthful
        self.commitments: Dict[str, Any] = {}
        self.outputs: Dict[str, OutputSet] = {}
        self._emitted: Dict[str, int] = {}

    def _rng_for(self, s: EventSource) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(s.seq,)))

    def register_source(self, s: EventSource) -> List[EventReport]:
        out = super().register_source(s)
        o = enumerate_outputs(s.trig_spec, s.max_rep)
        self.outputs[s.src_id] = o
        self.commitments[s.src_id] = (TRUTHFUL if self.force_truthful
                                      else sample_commitment(self.eps, o, self._rng_for(s)))
        return out

    def advance_to(self, now: int) -> List[EventReport]:
        out = []
        for tick, wp in due_windows(self.state, now):
            truthful = _apply(self.state, wp)
            c = self.commitments.get(wp.src_id, TRUTHFUL)
            reps = truthful if c is TRUTHFUL else self._fixed_reports(wp, c)
            self.log.extend((tick, r) for r in reps)
            out.extend(reps)
        return out

    def _fixed_reports(self, wp: WindowPass, o) -> List[EventReport]:
        s = self.state.source(wp.src_id)
        slots = s.trig_spec.slots()
        pos = slots.index((wp.trig_data, wp.window_index))
        before = sum(c for (td, _), c in zip(slots[:pos], o) if td == wp.trig_data)
        buckets = s.trig_spec.entry(wp.trig_data).buckets
        return [EventReport(s.src_id, wp.trig_data, buckets[before + j], wp.window_index)
                for j in range(o[pos])]

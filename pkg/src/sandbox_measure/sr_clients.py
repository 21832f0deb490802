"""Browser-side generators of aggregatable reports.

``AraClient`` does last-touch attribution of triggers to registered sources
with per-source contribution (L1) and sparsity (L0) budgets. ``PaaClient``
runs contribution programs against per-device shared storage and budgets per
(device, time window).

Every trigger or event produces exactly one report; when nothing may be
contributed the report is null, so the mere presence of a report leaks nothing.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Dict, Hashable, List, Mapping, Optional, Tuple

import numpy as np

from sandbox_measure.core import (
    AggregatableReport,
    SourceRegistration,
    TriggerRegistration,
    combine_keys,
    filters_match,
    key_from_hex,
    new_report_id,
    source_active,
)

logger = logging.getLogger(__name__)

DEFAULT_CONTRIBUTION_BUDGET = 1 << 16
DEFAULT_WINDOW_LENGTH = 600


class RegistrationError(ValueError):
    pass


@dataclasses.dataclass
class AraClientState:
    sources: List[SourceRegistration] = dataclasses.field(default_factory=list)
    l0: Dict[str, int] = dataclasses.field(default_factory=dict)
    l1: Dict[str, int] = dataclasses.field(default_factory=dict)

    def newest_first(self):
        return sorted(self.sources, key=lambda s: (s.reg_time, s.seq), reverse=True)


class AraClient:
    """ARA summary-report client for one device.

    Args:
      contribution_budget: A1, cap on the summed value per source.
      sparsity_budget: A0, cap on the number of non-zero contributions per source.
      rng: seeded stream used for report ids.
      strict_halt: if True, a source whose filters match but whose budget is
        exhausted ends the attribution scan (null report) instead of letting
        older sources be tried.
    """

    def __init__(self, contribution_budget: int = DEFAULT_CONTRIBUTION_BUDGET,
                 sparsity_budget: int = 1, *, rng: np.random.Generator,
                 strict_halt: bool = False):
        self.contribution_budget = contribution_budget
        self.sparsity_budget = sparsity_budget
        self.rng = rng
        self.strict_halt = strict_halt
        self.state = AraClientState()
        # report id -> srcId, kept so rollout traces can name the privacy unit.
        self.attribution: Dict[int, str] = {}

    def register_source(self, s: SourceRegistration) -> None:
        self.state = ara_register_source(self.state, s)

    def register_trigger(self, trig: TriggerRegistration,
                         now: Optional[int] = None) -> AggregatableReport:
        now = trig.time if now is None else now
        self.state, report, src = _ara_trigger(
            self.state, trig, now, self.rng, self.contribution_budget,
            self.sparsity_budget, self.strict_halt)
        if src is not None:
            self.attribution[report.report_id] = src.src_id
        return report


def ara_register_source(state: AraClientState, s: SourceRegistration) -> AraClientState:
    if any(t.src_id == s.src_id for t in state.sources):
        raise RegistrationError(f"duplicate srcId {s.src_id!r}")
    if state.sources and s.seq <= max(t.seq for t in state.sources):
        raise RegistrationError("registration seq must increase")
    return AraClientState(
        sources=state.sources + [s],
        l0={**state.l0, s.src_id: 0},
        l1={**state.l1, s.src_id: 0},
    )


def ara_register_trigger(state: AraClientState, trig: TriggerRegistration, now: int,
                         rng: np.random.Generator,
                         contribution_budget: int = DEFAULT_CONTRIBUTION_BUDGET,
                         sparsity_budget: int = 1, strict_halt: bool = False,
                         ) -> Tuple[AraClientState, AggregatableReport]:
    state, report, _ = _ara_trigger(state, trig, now, rng, contribution_budget,
                                    sparsity_budget, strict_halt)
    return state, report


def _ara_trigger(state, trig, now, rng, a1, a0, strict_halt):
    r = new_report_id(rng)
    if trig.trig_value > 0:
        for s in state.newest_first():
            if not source_active(s, now):
                continue
            if trig.dest != s.dest or not filters_match(s.src_filt, trig.trig_filt):
                continue
            if (state.l0[s.src_id] + 1 <= a0
                    and state.l1[s.src_id] + trig.trig_value <= a1):
                new_state = AraClientState(
                    sources=list(state.sources),
                    l0={**state.l0, s.src_id: state.l0[s.src_id] + 1},
                    l1={**state.l1, s.src_id: state.l1[s.src_id] + trig.trig_value},
                )
                k = combine_keys(s.src_key, trig.trig_key)
                return new_state, AggregatableReport(r, k, trig.trig_value), s
            if strict_halt:
                break
    return state, AggregatableReport.null(r), None


# --- PAA ---------------------------------------------------------------------

# Storage state of one device: an immutable mapping of storage keys to values.
Storage = Tuple[Tuple[str, str], ...]
EMPTY_STORAGE: Storage = ()

# pi: storage -> (next storage, key, value)
ContributionProgram = Callable[[Storage], Tuple[Storage, int, int]]


def storage_get(storage: Storage, key: str) -> Optional[str]:
    return dict(storage).get(key)


def storage_set(storage: Storage, updates: Mapping[str, str]) -> Storage:
    merged = dict(storage)
    merged.update(updates)
    return tuple(sorted(merged.items()))


@dataclasses.dataclass(frozen=True)
class Branch:
    key: int
    value: int
    writes: Tuple[Tuple[str, str], ...] = ()


@dataclasses.dataclass(frozen=True)
class DeclarativeProgram:
    """Read one storage key, compare it, write storage, emit ``(key, value)``.

    ``equals=None`` tests for absence of the storage key. Enough to express
    "first view of this campaign contributes A1/2, repeats contribute 0".
    """
    read: str
    equals: Optional[str]
    then: Branch
    otherwise: Branch

    def __call__(self, storage: Storage) -> Tuple[Storage, int, int]:
        branch = self.then if storage_get(storage, self.read) == self.equals else self.otherwise
        return storage_set(storage, dict(branch.writes)), branch.key, branch.value

    @classmethod
    def from_json(cls, d: dict) -> "DeclarativeProgram":
        def branch(b):
            return Branch(key_from_hex(b["key"]), int(b["value"]),
                          tuple(sorted(b.get("write", {}).items())))
        return cls(d["read"], d.get("equals"), branch(d["then"]), branch(d["else"]))


def first_view_program(campaign: str, key: int, value: int) -> DeclarativeProgram:
    marker = f"seen:{campaign}"
    return DeclarativeProgram(
        read=marker, equals=None,
        then=Branch(key, value, ((marker, "1"),)),
        otherwise=Branch(key, 0),
    )


@dataclasses.dataclass
class PaaClientState:
    storage: Dict[Hashable, Storage] = dataclasses.field(default_factory=dict)
    l0: Dict[Tuple[Hashable, int], int] = dataclasses.field(default_factory=dict)
    l1: Dict[Tuple[Hashable, int], int] = dataclasses.field(default_factory=dict)
    last_window: Dict[Hashable, int] = dataclasses.field(default_factory=dict)


def paa_register_event(state: PaaClientState, device: Hashable, window: int,
                       prog: ContributionProgram, rng: np.random.Generator,
                       contribution_budget: int = DEFAULT_CONTRIBUTION_BUDGET,
                       sparsity_budget: int = 1,
                       ) -> Tuple[PaaClientState, AggregatableReport]:
    """Runs ``prog`` on the device's storage and emits one report.

    Storage is updated whatever the budget outcome.
    """
    last = state.last_window.get(device)
    if last is not None and window < last:
        raise RegistrationError(f"time went backwards for device {device!r}")
    storage, k, v = prog(state.storage.get(device, EMPTY_STORAGE))
    new_state = PaaClientState(
        storage={**state.storage, device: storage},
        l0=dict(state.l0), l1=dict(state.l1),
        last_window={**state.last_window, device: window},
    )
    r = new_report_id(rng)
    unit = (device, window)
    if v > 0:
        l0, l1 = new_state.l0.get(unit, 0), new_state.l1.get(unit, 0)
        if l0 + 1 <= sparsity_budget and l1 + v <= contribution_budget:
            new_state.l0[unit] = l0 + 1
            new_state.l1[unit] = l1 + v
            return new_state, AggregatableReport(r, k, v)
    return new_state, AggregatableReport.null(r)


class PaaClient:
    """Stateful wrapper around :func:`paa_register_event` keyed by logical time."""

    def __init__(self, contribution_budget: int = DEFAULT_CONTRIBUTION_BUDGET,
                 sparsity_budget: int = 1, *, rng: np.random.Generator,
                 window_length: int = DEFAULT_WINDOW_LENGTH):
        self.contribution_budget = contribution_budget
        self.sparsity_budget = sparsity_budget
        self.window_length = window_length
        self.rng = rng
        self.state = PaaClientState()
        self.attribution: Dict[int, Tuple[Hashable, int]] = {}

    def window_of(self, now: int) -> int:
        return now // self.window_length

    def register_event(self, device: Hashable, now: int,
                       prog: ContributionProgram) -> AggregatableReport:
        window = self.window_of(now)
        self.state, report = paa_register_event(
            self.state, device, window, prog, self.rng,
            self.contribution_budget, self.sparsity_budget)
        if not report.is_null:
            self.attribution[report.report_id] = (device, window)
        return report

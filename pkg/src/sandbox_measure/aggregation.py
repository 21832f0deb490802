"""Aggregation service and privacy budget service.

A request either charges every (non-null, distinct) report in its batch or
aborts without touching the ledger. Budgets are held as ``Decimal`` so the
cap comparison and the persisted file agree bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import os
import threading
from decimal import Decimal
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from sandbox_measure.core import AggregatableReport, key_from_hex, key_to_hex
from sandbox_measure.noise import INF, DLapParam, compute_tau, sample_dlap

LEDGER_FORMAT = "sandbox-measure/ledger@1"
DEFAULT_EPS_STAR = Decimal(64)
DEFAULT_DELTA_STAR = Decimal("1e-6")

Number = Union[int, float, str, Decimal]


def as_decimal(x: Number) -> Decimal:
    """Exact decimal for ints/strings; shortest round-trip repr for floats."""
    if isinstance(x, Decimal):
        return x
    if isinstance(x, float):
        return Decimal(repr(x))
    return Decimal(x)


class AggregationAborted(Exception):
    """Some report in the batch would exceed its privacy budget."""

    def __init__(self, report_ids: Sequence[int]):
        self.report_ids = list(report_ids)
        super().__init__(f"privacy budget violated for {len(self.report_ids)} report(s)")


class MalformedRequest(ValueError):
    pass


class LedgerFileError(Exception):
    pass


class PrivacyBudgetLedger:
    """Per-report accumulated (eps, delta) with global caps.

    ``try_charge`` is the only mutator and is linearizable: the check over the
    whole batch and the commit happen under one lock.
    """

    def __init__(self, eps_star: Number = DEFAULT_EPS_STAR,
                 delta_star: Number = DEFAULT_DELTA_STAR):
        self.eps_star = as_decimal(eps_star)
        self.delta_star = as_decimal(delta_star)
        self._eps: Dict[int, Decimal] = {}
        self._delta: Dict[int, Decimal] = {}
        self._lock = threading.Lock()

    def consumed(self, r: int) -> Tuple[Decimal, Decimal]:
        with self._lock:
            return self._eps.get(r, Decimal(0)), self._delta.get(r, Decimal(0))

    def remaining(self, r: int) -> Tuple[Decimal, Decimal]:
        e, d = self.consumed(r)
        return self.eps_star - e, self.delta_star - d

    def try_charge(self, report_ids: Iterable[int], eps: Number,
                   delta: Number = 0) -> List[int]:
        """Charges ``(eps, delta)`` to every id, or to none.

        Returns the list of ids that would exceed a cap; empty means committed.
        """
        eps, delta = as_decimal(eps), as_decimal(delta)
        ids = list(dict.fromkeys(report_ids))
        with self._lock:
            violators = [
                r for r in ids
                if self._eps.get(r, 0) + eps > self.eps_star
                or self._delta.get(r, 0) + delta > self.delta_star
            ]
            if violators:
                return violators
            for r in ids:
                self._eps[r] = self._eps.get(r, Decimal(0)) + eps
                if delta:
                    self._delta[r] = self._delta.get(r, Decimal(0)) + delta
            return []

    def report_ids(self) -> List[int]:
        with self._lock:
            return sorted(set(self._eps) | set(self._delta))

    def snapshot(self) -> Dict[int, Tuple[Decimal, Decimal]]:
        with self._lock:
            ids = set(self._eps) | set(self._delta)
            return {r: (self._eps.get(r, Decimal(0)), self._delta.get(r, Decimal(0)))
                    for r in ids}

    # persistence

    def to_json(self) -> dict:
        snap = self.snapshot()
        return {
            "format": LEDGER_FORMAT,
            "eps_star": str(self.eps_star),
            "delta_star": str(self.delta_star),
            "reports": [
                {"r": key_to_hex(r), "eps": str(e), "delta": str(d)}
                for r, (e, d) in sorted(snap.items())
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PrivacyBudgetLedger":
        if doc.get("format") != LEDGER_FORMAT:
            raise LedgerFileError(f"unsupported ledger format {doc.get('format')!r}")
        ledger = cls(Decimal(doc["eps_star"]), Decimal(doc["delta_star"]))
        for rec in doc["reports"]:
            r = key_from_hex(rec["r"])
            e, d = Decimal(rec["eps"]), Decimal(rec["delta"])
            if e < 0 or d < 0 or e > ledger.eps_star or d > ledger.delta_star:
                raise LedgerFileError(f"ledger record for {rec['r']} violates caps")
            if r in ledger._eps:
                raise LedgerFileError(f"duplicate ledger record {rec['r']}")
            ledger._eps[r] = e
            if d:
                ledger._delta[r] = d
        return ledger

    def save(self, path: Union[str, os.PathLike]) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "PrivacyBudgetLedger":
        try:
            with open(path) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise LedgerFileError(f"cannot read ledger {path}: {e}") from e
        return cls.from_json(doc)


def budget_remaining(ledger: PrivacyBudgetLedger, r: int) -> Tuple[Decimal, Decimal]:
    return ledger.remaining(r)


@dataclasses.dataclass(frozen=True)
class Listed:
    keys: frozenset

    def __init__(self, keys: Iterable[int]):
        object.__setattr__(self, "keys", frozenset(keys))


class KeyDiscovery:
    def __repr__(self):
        return "KeyDiscovery()"

    def __eq__(self, other):
        return isinstance(other, KeyDiscovery)

    def __hash__(self):
        return hash(KeyDiscovery)


@dataclasses.dataclass(frozen=True)
class AggregationRequest:
    batch: Tuple[AggregatableReport, ...]
    eps: Number
    delta: Number = 0
    mode: Union[Listed, KeyDiscovery] = dataclasses.field(default_factory=KeyDiscovery)

    def __post_init__(self):
        object.__setattr__(self, "batch", tuple(self.batch))


@dataclasses.dataclass(frozen=True)
class SummaryReport:
    entries: Tuple[Tuple[int, int], ...]
    tau: Union[int, float] = INF

    def as_dict(self) -> Dict[int, int]:
        return dict(self.entries)

    def to_json(self) -> dict:
        return {
            "tau": None if self.tau == INF else self.tau,
            "entries": [{"k": key_to_hex(k), "w": w} for k, w in self.entries],
        }


class AggregationService:
    """Batch aggregation with discrete Laplace noise.

    Args:
      ledger: shared privacy budget ledger.
      contribution_budget: A1; noise scale is ``eps / A1``.
      sparsity_budget: A0; enters the key-discovery threshold.
    """

    def __init__(self, ledger: PrivacyBudgetLedger, contribution_budget: int = 1 << 16,
                 sparsity_budget: int = 1):
        self.ledger = ledger
        self.contribution_budget = contribution_budget
        self.sparsity_budget = sparsity_budget

    def aggregate(self, req: AggregationRequest, rng: np.random.Generator, *,
                  zero_noise: bool = False) -> SummaryReport:
        """Runs one request; raises :class:`AggregationAborted` on a budget violation.

        ``zero_noise`` replaces every noise draw by 0. It exists for exact-sum
        audits only and is never exposed by the simulation CLI.
        """
        eps, delta = as_decimal(req.eps), as_decimal(req.delta)
        if not eps > 0:
            raise MalformedRequest("eps must be positive")
        if delta < 0 or delta > 1:
            raise MalformedRequest("delta must lie in [0, 1]")
        discovery = isinstance(req.mode, KeyDiscovery)
        if discovery and delta == 0:
            raise MalformedRequest("key discovery needs delta > 0")

        reports = _distinct_non_null(req.batch)
        # delta is tracked only by the key-discovery service.
        violators = self.ledger.try_charge(
            [r.report_id for r in reports], eps, delta if discovery else 0)
        if violators:
            raise AggregationAborted(violators)

        sums: Dict[int, int] = {}
        for rep in reports:
            sums[rep.key] = sums.get(rep.key, 0) + rep.value

        if discovery:
            tau = compute_tau(self.contribution_budget, self.sparsity_budget,
                              float(eps), float(delta))
            keys = sorted(sums)
        else:
            tau = INF
            keys = sorted(req.mode.keys)
        noise = _draw(DLapParam(float(eps) / self.contribution_budget, tau), rng,
                      len(keys), zero_noise)
        entries = []
        for k, z in zip(keys, noise):
            w = sums.get(k, 0) + int(z)
            if not discovery or w > tau:
                entries.append((k, w))
        return SummaryReport(tuple(entries), tau)


def aggregate(ledger: PrivacyBudgetLedger, req: AggregationRequest,
              rng: np.random.Generator, *, contribution_budget: int = 1 << 16,
              sparsity_budget: int = 1, zero_noise: bool = False) -> SummaryReport:
    service = AggregationService(ledger, contribution_budget, sparsity_budget)
    return service.aggregate(req, rng, zero_noise=zero_noise)


def _distinct_non_null(batch: Iterable[AggregatableReport]) -> List[AggregatableReport]:
    # A report id seen twice in one batch is the same report; count it once.
    seen = set()
    out = []
    for rep in batch:
        if rep.is_null or rep.report_id in seen:
            continue
        seen.add(rep.report_id)
        out.append(rep)
    return out


def _draw(p: DLapParam, rng: np.random.Generator, n: int, zero_noise: bool):
    if zero_noise or n == 0:
        return [0] * n
    return sample_dlap(p, rng, n).tolist()

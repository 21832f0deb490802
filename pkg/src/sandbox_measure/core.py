"""Domain types shared by the clients, the aggregation service and the mechanisms.

Keys and report ids are 128-bit unsigned integers. Time is a logical tick
counter (1 tick = 1 simulated second), so scenarios replay exactly.
"""

from __future__ import annotations

import dataclasses
from typing import AbstractSet, FrozenSet, Optional

import numpy as np

KEY_BITS = 128
KEY_MASK = (1 << KEY_BITS) - 1

DAY = 86_400
MINUTE = 60


def check_key(k: int) -> int:
    if not isinstance(k, int) or k < 0 or k > KEY_MASK:
        raise ValueError(f"key must be a 128-bit unsigned integer, got {k!r}")
    return k


def key_to_hex(k: int) -> str:
    """Serializes a key or report id as 32 lowercase hex digits."""
    return format(check_key(k), "032x")


def key_from_hex(s: str) -> int:
    if len(s) != 32:
        raise ValueError(f"expected 32 hex digits, got {s!r}")
    return check_key(int(s, 16))


def new_report_id(rng: np.random.Generator) -> int:
    """Draws a fresh 128-bit report id from the scenario's seeded stream."""
    return int.from_bytes(rng.bytes(16), "big")


@dataclasses.dataclass(frozen=True)
class AggregatableReport:
    """A report (r, k, v), or a null report (r, None, None).

    Null reports carry no key and no value; the aggregation service drops them.
    """
    report_id: int
    key: Optional[int] = None
    value: Optional[int] = None

    def __post_init__(self):
        check_key(self.report_id)
        if (self.key is None) != (self.value is None):
            raise ValueError("a report carries both key and value, or neither")
        if self.key is not None:
            check_key(self.key)
            if self.value < 0:
                raise ValueError("contribution value must be non-negative")

    @property
    def is_null(self) -> bool:
        return self.key is None

    @classmethod
    def null(cls, report_id: int) -> "AggregatableReport":
        return cls(report_id)

    def to_json(self) -> dict:
        if self.is_null:
            return {"r": key_to_hex(self.report_id), "k": None, "v": None}
        return {"r": key_to_hex(self.report_id), "k": key_to_hex(self.key),
                "v": self.value}

    @classmethod
    def from_json(cls, d: dict) -> "AggregatableReport":
        if d.get("k") is None:
            return cls.null(key_from_hex(d["r"]))
        return cls(key_from_hex(d["r"]), key_from_hex(d["k"]), int(d["v"]))


@dataclasses.dataclass(frozen=True)
class SourceRegistration:
    src_id: str
    dest: str
    exp_date: int
    src_filt: FrozenSet[str]
    src_key: int
    reg_time: int
    seq: int

    def __post_init__(self):
        object.__setattr__(self, "src_filt", frozenset(self.src_filt))
        check_key(self.src_key)
        if self.exp_date < self.reg_time:
            raise ValueError("expDate precedes registration time")


@dataclasses.dataclass(frozen=True)
class TriggerRegistration:
    dest: str
    trig_id: str
    trig_filt: FrozenSet[str]
    trig_key: int
    trig_value: int
    time: int

    def __post_init__(self):
        object.__setattr__(self, "trig_filt", frozenset(self.trig_filt))
        check_key(self.trig_key)
        if self.trig_value < 0:
            raise ValueError("trigValue must be non-negative")


def combine_keys(src_key: int, trig_key: int) -> int:
    """Bitwise OR of the source and trigger keys."""
    return check_key(src_key) | check_key(trig_key)


def filters_match(src_filt: AbstractSet[str], trig_filt: AbstractSet[str]) -> bool:
    return not set(src_filt).isdisjoint(trig_filt)


def source_active(s: SourceRegistration, now: int) -> bool:
    # Both ends inclusive: a source is still active at exactly exp_date.
    return s.reg_time <= now <= s.exp_date

import json
from decimal import Decimal

import numpy as np
import pytest

from sandbox_measure.aggregation import (AggregationAborted, AggregationRequest,
                                         AggregationService, KeyDiscovery, LedgerFileError,
                                         Listed, MalformedRequest, PrivacyBudgetLedger,
                                         aggregate, budget_remaining)
from sandbox_measure.core import AggregatableReport


def _svc(eps_star=64, delta_star="1e-6", a1=1 << 16, a0=1):
    return AggregationService(PrivacyBudgetLedger(eps_star, delta_star), a1, a0)


def test_abort_leaves_ledger_unchanged():
    ledger = PrivacyBudgetLedger(1, "0.1")
    assert ledger.try_charge([1], 0.5) == []
    with pytest.raises(AggregationAborted) as err:
        aggregate(ledger, AggregationRequest([AggregatableReport(1, 5, 3)], 0.6,
                                             mode=Listed([5])), np.random.default_rng(0))
    assert err.value.report_ids == [1]
    assert ledger.consumed(1) == (Decimal("0.5"), Decimal(0))


def test_listed_exact_sum_without_noise():
    svc = _svc()
    batch = [AggregatableReport(1, 9, 3), AggregatableReport(2, 9, 4)]
    out = svc.aggregate(AggregationRequest(batch, 1, mode=Listed([9])),
                        np.random.default_rng(0), zero_noise=True)
    assert out.as_dict() == {9: 7}


def test_listed_releases_exactly_the_listed_keys():
    svc = _svc()
    batch = [AggregatableReport(1, 9, 3)]
    out = svc.aggregate(AggregationRequest(batch, 1, mode=Listed([4, 5])),
                        np.random.default_rng(0))
    assert set(out.as_dict()) == {4, 5}


def test_key_discovery_threshold():
    # tau = ceil(1 * (1 + ln(1 / delta) / 1)) = 10 for delta = e^-9
    import math
    svc = _svc(delta_star=1, a1=1, a0=1)
    delta = math.exp(-9)
    out = svc.aggregate(AggregationRequest([AggregatableReport(1, 2, 5)], 1.0, delta),
                        np.random.default_rng(0), zero_noise=True)
    assert out.tau == 10 and out.entries == ()
    out = svc.aggregate(AggregationRequest([AggregatableReport(3, 2, 11)], 1.0, delta),
                        np.random.default_rng(0), zero_noise=True)
    assert out.as_dict() == {2: 11}


def test_key_discovery_needs_delta():
    with pytest.raises(MalformedRequest):
        _svc().aggregate(AggregationRequest([], 1, 0), np.random.default_rng(0))


def test_delta_charged_only_in_key_discovery():
    svc = _svc()
    rep = AggregatableReport(1, 2, 3)
    svc.aggregate(AggregationRequest([rep], 1, mode=Listed([2])), np.random.default_rng(0))
    assert svc.ledger.consumed(1) == (Decimal(1), Decimal(0))
    svc.aggregate(AggregationRequest([rep], 1, "1e-7"), np.random.default_rng(0))
    assert svc.ledger.consumed(1) == (Decimal(2), Decimal("1e-7"))


def test_nulls_ignored_and_duplicates_counted_once():
    svc = _svc()
    rep = AggregatableReport(1, 2, 3)
    out = svc.aggregate(AggregationRequest([rep, rep, AggregatableReport.null(7)], 1,
                                           mode=Listed([2])),
                        np.random.default_rng(0), zero_noise=True)
    assert out.as_dict() == {2: 3}
    assert svc.ledger.consumed(1) == (Decimal(1), Decimal(0))
    assert svc.ledger.consumed(7) == (Decimal(0), Decimal(0))


def test_requery_cap_with_full_delta():
    svc = _svc()
    rep = AggregatableReport(1, 2, 3)
    svc.aggregate(AggregationRequest([rep], 1, "1e-6"), np.random.default_rng(0))
    with pytest.raises(AggregationAborted):
        svc.aggregate(AggregationRequest([rep], 1, "1e-6"), np.random.default_rng(0))


def test_budget_remaining_examples():
    ledger = PrivacyBudgetLedger(64, "0.5")
    assert budget_remaining(ledger, 9) == (Decimal(64), Decimal("0.5"))
    ledger.try_charge([9], 1, "0.01")
    assert budget_remaining(ledger, 9) == (Decimal(63), Decimal("0.49"))
    assert ledger.try_charge([9], 64, 0) == [9]
    assert budget_remaining(ledger, 9) == (Decimal(63), Decimal("0.49"))


def test_brute_force_sums():
    rng = np.random.default_rng(3)
    batch = [AggregatableReport(i, int(rng.integers(0, 4)), int(rng.integers(0, 50)))
             for i in range(1, 40)]
    want = {}
    for r in batch:
        want[r.key] = want.get(r.key, 0) + r.value
    out = _svc().aggregate(AggregationRequest(batch, 1, mode=Listed(range(4))),
                           rng, zero_noise=True)
    assert out.as_dict() == {k: want.get(k, 0) for k in range(4)}


def test_ledger_round_trip(tmp_path):
    ledger = PrivacyBudgetLedger(64, "1e-6")
    ledger.try_charge([1, 2 ** 127], 0.1, "3e-7")
    ledger.try_charge([1], "0.2")
    path = tmp_path / "l.json"
    ledger.save(path)
    again = PrivacyBudgetLedger.load(path)
    assert again.snapshot() == ledger.snapshot()
    assert again.consumed(1) == (Decimal("0.3"), Decimal("3e-7"))


def test_ledger_rejects_bad_files(tmp_path):
    doc = PrivacyBudgetLedger(1, "0.1").to_json()
    doc["reports"] = [{"r": "0" * 32, "eps": "2", "delta": "0"}]
    with pytest.raises(LedgerFileError):
        PrivacyBudgetLedger.from_json(doc)
    bad = tmp_path / "x.json"
    bad.write_text("{")
    with pytest.raises(LedgerFileError):
        PrivacyBudgetLedger.load(bad)

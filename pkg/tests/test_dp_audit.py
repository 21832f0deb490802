import io
import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sandbox_measure.dp_audit import (FiniteDistribution, SpaceTooLarge, audit_rollout,
                                      audit_tail, audit_tdlap, compositions,
                                      exact_mechanism_distribution, hockey_stick_delta,
                                      mixture, total_variation, write_audit_report)
from sandbox_measure.event_mechanism import (EventMechanism, SpecEntry, TriggerSpec,
                                             enumerate_outputs)
from sandbox_measure.interactive import HALT, scripted_adversary
from sandbox_measure.summary_mechanism import (MeasurementDatabase, MsrQuery, Record,
                                               SummaryMechanism, TurnRecord, remove_unit,
                                               write_trace)


def _rand_dist(rng, n):
    p = rng.random(n)
    return FiniteDistribution(dict(enumerate(p / p.sum())))


def test_hockey_stick_basics():
    P = FiniteDistribution({"a": 0.3, "b": 0.7})
    assert hockey_stick_delta(P, P, 0.0) == 0
    assert hockey_stick_delta(FiniteDistribution({0: 1.0}), FiniteDistribution({1: 1.0}), 5.0) == 1
    eps = 0.9
    flip = 1 / (math.exp(eps) + 1)
    rr0 = FiniteDistribution({0: 1 - flip, 1: flip})
    rr1 = FiniteDistribution({0: flip, 1: 1 - flip})
    assert hockey_stick_delta(rr0, rr1, eps) < 1e-15
    assert hockey_stick_delta(rr0, rr1, eps - 0.1) > 0


def test_distribution_normalization_enforced():
    with pytest.raises(ValueError):
        FiniteDistribution({0: 0.5})
    with pytest.raises(ValueError):
        FiniteDistribution({0: 1.5, 1: -0.5})


def test_zero_eps_is_total_variation():
    rng = np.random.default_rng(0)
    for _ in range(50):
        P, Q = _rand_dist(rng, 6), _rand_dist(rng, 6)
        assert hockey_stick_delta(P, Q, 0) == pytest.approx(total_variation(P, Q), abs=1e-14)


def test_monotone_in_eps():
    rng = np.random.default_rng(1)
    P, Q = _rand_dist(rng, 8), _rand_dist(rng, 8)
    vals = [hockey_stick_delta(P, Q, e) for e in np.linspace(0, 3, 25)]
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 4), st.floats(0.1, 2.0))
def test_joint_convexity(seed, k, eps):
    rng = np.random.default_rng(seed)
    Ps = [_rand_dist(rng, 5) for _ in range(k)]
    Qs = [_rand_dist(rng, 5) for _ in range(k)]
    delta = max(hockey_stick_delta(P, Q, eps) for P, Q in zip(Ps, Qs))
    w = rng.random(k)
    w = list(w / w.sum())
    assert hockey_stick_delta(mixture(w, Ps), mixture(w, Qs), eps) <= delta + 1e-12


def test_tdlap_examples():
    assert audit_tdlap([0, 3], [0, 3], 1.0, 0.05, 2, 1).delta == 0
    assert audit_tdlap([0], [2], 1.0, 0.05, 2, 1).passed
    assert audit_tdlap([0, 0], [1, 1], 1.0, 0.05, 2, 2).passed
    assert not audit_tdlap([0], [2], 1.0, 0.05, 2, 1, tau=3).passed


def test_tdlap_untruncated_window():
    rec = audit_tdlap([0, 0], [1, -1], 0.8, 0.0, 2, 2, window=120)
    assert rec.passed and rec.params["window_tail"] < 1e-12
    # A larger eps budget for the same shift leaves slack: ratio bound e^{a*l1} holds.
    assert audit_tdlap([0], [3], 1.0, 0.0, 3, 1, window=150).passed


def test_tdlap_guards():
    with pytest.raises(SpaceTooLarge):
        audit_tdlap([0] * 5, [1] * 5, 1.0, 0.1, 5, 5)
    with pytest.raises(ValueError):
        audit_tdlap([0], [3], 1.0, 0.1, 2, 1)


def test_tail_check():
    assert audit_tail(1.0, 0.01, 2, 1, 2).passed


def test_compositions():
    assert compositions(4, 2) == [(1, 3), (2, 2), (3, 1)]
    assert compositions(3, 1) == [(3,)]
    assert compositions(1, 2) == []


def test_exact_distribution_point_mass_when_truthful_certain():
    # |O| = 1 leaves only the truthful branch or the single fixed output, which agree.
    spec = TriggerSpec((SpecEntry(0, (1,), (5,)),))
    o = enumerate_outputs(spec, 0)
    assert len(o) == 1
    mech = EventMechanism(1.0, {"x": o})
    db = MeasurementDatabase((Record("x", "y", (0, 9)),))
    P = exact_mechanism_distribution(mech, scripted_adversary([(db, None)]))
    assert P.probs == {((("x", (0,)),),): pytest.approx(1.0)}


def test_exact_distribution_support_in_output_set():
    spec = TriggerSpec((SpecEntry(0, (2, 7), (20, 70)), SpecEntry(1, (1, 5), (10, 50))))
    o = enumerate_outputs(spec, 3)
    mech = EventMechanism(0.5, {"s": o})
    steps = [(MeasurementDatabase((Record("s", f"y{i}", (i % 2, 40)),)), None) for i in range(4)]
    P = exact_mechanism_distribution(mech, scripted_adversary(steps))
    assert abs(math.fsum(P.probs.values()) - 1) < 1e-12
    for transcript in P.support():
        flat = tuple(c for step in transcript for c in dict(step)["s"])
        assert flat in o


def test_exact_distribution_space_guard():
    spec = TriggerSpec((SpecEntry(0, (2, 7), (20, 70)), SpecEntry(1, (1, 5), (10, 50))))
    mech = EventMechanism(0.5, {"s": enumerate_outputs(spec, 3)})
    db = MeasurementDatabase(())
    with pytest.raises(SpaceTooLarge):
        exact_mechanism_distribution(mech, scripted_adversary([(db, None)]), bound=5)


def _trace(log, a1=10, a0=1, eps_star=1, delta_star="0.1"):
    buf = io.StringIO()
    write_trace(buf, log, a1, a0, eps_star, delta_star)
    return buf.getvalue().splitlines()


def test_audit_rollout_cases():
    assert audit_rollout([]).passed
    over = [TurnRecord(Decimal("0.8"), Decimal(0), frozenset({"y"}), False, (("x", "y", 10),)),
            TurnRecord(Decimal("0.8"), Decimal(0), frozenset({"y"}), False, ())]
    res = audit_rollout(_trace(over))
    assert not res.passed and res.failing == ("x",)
    with pytest.raises(ValueError):
        audit_rollout(["not json"])


def test_audit_rollout_on_mechanism_trace():
    rng = np.random.default_rng(3)
    f = lambda rec: rec.payload
    mech = SummaryMechanism(10, 2, 1, "0.1", key_universe=(0, 1), zero_noise=True)
    db = MeasurementDatabase(tuple(Record(f"x{i % 3}", f"y{i}", (i % 2, int(rng.integers(6))))
                                   for i in range(9)))
    state = mech.initial_state()
    for _ in range(12):
        Y = {f"y{i}" for i in range(9) if rng.random() < 0.6}
        state, _ = mech.step(state, db, MsrQuery(float(rng.choice([0.2, 0.3])),
                                                 float(rng.choice([0, 0.01])), Y, f), rng)
    assert audit_rollout(_trace(list(state.log), 10, 2)).passed


def test_audit_report_format():
    buf = io.StringIO()
    write_audit_report([audit_tdlap([0], [1], 1.0, 0.1, 1, 1)], buf)
    assert '"verdict": "pass"' in buf.getvalue()

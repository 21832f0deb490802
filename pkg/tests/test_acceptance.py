"""Acceptance suite: one test per criterion, each with its runtime bound.

Run ``pytest -v tests/test_acceptance.py``; each line reads PASSED or FAILED.
"""

import io
import itertools
import math
import threading
import time
from decimal import Decimal
from fractions import Fraction

import numpy as np
import pytest

from sandbox_measure.aggregation import (DEFAULT_EPS_STAR, AggregationAborted,
                                         AggregationRequest, AggregationService, Listed,
                                         PrivacyBudgetLedger)
from sandbox_measure.core import DAY, AggregatableReport, SourceRegistration, TriggerRegistration
from sandbox_measure.dp_audit import (SLACK, audit_rollout, exact_mechanism_distribution,
                                      hockey_stick_delta, tdlap_grid)
from sandbox_measure.event_mechanism import (TRUTHFUL, EventLevelClient, EventMechanism,
                                             EventSource, EventTrigger, NoisyEventClient,
                                             OutputSetTooLarge, SpecEntry, TriggerSpec,
                                             enumerate_outputs)
from sandbox_measure.interactive import HALT, run_transcript
from sandbox_measure.noise import DLapParam, dlap_pmf, sample_dlap
from sandbox_measure.sr_clients import AraClient, PaaClient, first_view_program
from sandbox_measure.summary_mechanism import (ABORT, MeasurementDatabase, MsrQuery, Record,
                                               SummaryMechanism, gradual_expiration,
                                               group_privacy, remove_unit, write_trace)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# --- 1 ------------------------------------------------------------------------------

def test_criterion_1_output_set_counts():
    with Timer() as t:
        sandals = TriggerSpec((SpecEntry(1, (DAY, 5 * DAY), (10, 50)),))
        table = enumerate_outputs(sandals, 3)
        fig3 = TriggerSpec((SpecEntry(0, (2 * DAY, 7 * DAY), (20, 70)),
                            SpecEntry(1, (DAY, 5 * DAY), (10, 50))))
        full = enumerate_outputs(fig3, 3)
    assert set(table.outputs) == {(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (2, 0)}
    assert full.per_trig_data_options() == {0: 6, 1: 6}
    assert len(full) == 27
    # 36 pairs minus the 9 that send four reports
    assert 6 * 6 - sum(1 for a, b in itertools.product(table.outputs, repeat=2)
                       if sum(a) + sum(b) > 3) == 27
    assert t.elapsed < 1.0


# --- 2 ------------------------------------------------------------------------------

def test_criterion_2_walkthroughs():
    # Fig. 1: one attributed sneaker purchase.
    with Timer() as t1:
        src_key, trig_key = 0x5448 << 112, 0xA1CE
        ara = AraClient(1 << 16, 1, rng=np.random.default_rng(0))
        ara.register_source(SourceRegistration(
            "ad", "shoes.example", 3 * DAY, {"sneakers", "sandals", "flip-flops"},
            src_key, 0, 0))
        rep = ara.register_trigger(TriggerRegistration(
            "shoes.example", "buy", {"sneakers"}, trig_key, 70, DAY))
    assert rep.value == 70 and rep.key == src_key | trig_key
    assert t1.elapsed < 1.0

    # Fig. 2: report, report, null, report, null.
    with Timer() as t2:
        a1 = 1 << 16
        paa = PaaClient(a1, 4, rng=np.random.default_rng(0), window_length=600)
        progs = {c: first_view_program(c, k, a1 // 2)
                 for c, k in [("shoes", 1), ("pants", 2), ("jacket", 3), ("shirt", 4)]}
        seq = [paa.register_event("dev", t, progs[c])
               for c, t in [("shoes", 0), ("pants", 60), ("jacket", 120),
                            ("shirt", 700), ("shoes", 760)]]
    assert [r.is_null for r in seq] == [False, False, True, False, True]
    assert t2.elapsed < 1.0

    # Fig. 3: reports on days 2 and 5 only, none on day 7; noiseless and s* truthful.
    spec = TriggerSpec((SpecEntry(0, (2 * DAY, 7 * DAY), (20, 70)),
                        SpecEntry(1, (DAY, 5 * DAY), (10, 50))))
    for client in (EventLevelClient(), NoisyEventClient(1.0, 0, force_truthful=True)):
        with Timer() as t3:
            client.register_source(EventSource("s", "shoes.example", 30 * DAY,
                                               {"sneakers", "sandals"}, 3, spec))
            for td, v, day in [(0, 30, 1), (1, 60, 2), (0, 65, 4), (0, 10, 6)]:
                client.register_trigger(EventTrigger(
                    "shoes.example", f"d{day}", {"sneakers" if td == 0 else "sandals"},
                    td, v, int((day - 0.5) * DAY)))
            client.advance_to(8 * DAY)
        got = [(tick // DAY, r.bucket) for tick, r in client.log]
        assert got == [(2, 20), (5, 10), (5, 50)]
        assert client.state.V[("s", 0)] == 105
        assert t3.elapsed < 1.0


# --- 3 ------------------------------------------------------------------------------

def _random_spec(rng):
    while True:
        entries = []
        for td in rng.choice(32, size=int(rng.integers(1, 3)), replace=False):
            nw, nb = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            windows = tuple(sorted(int(w) for w in rng.choice(np.arange(1, 8), nw, replace=False)))
            buckets = tuple(sorted(int(b) for b in rng.choice(np.arange(1, 60), nb, replace=False)))
            entries.append(SpecEntry(int(td), windows, buckets))
        spec = TriggerSpec(tuple(entries))
        max_rep = int(rng.integers(1, 4))
        try:
            o = enumerate_outputs(spec, max_rep, limit=5000)
        except OutputSetTooLarge:
            continue
        if 2 <= len(o) <= 50:
            return o


def _event_adversaries(rng, o, n):
    """Scripted adversaries; half of them branch on x's previous response."""
    tds = [e.trig_data for e in o.spec.entries]
    steps = o.n_steps + 1
    advs = []
    for j in range(n):
        plan = [[(("x" if rng.random() < 0.8 else "z"), int(rng.choice(tds + [31])),
                  int(rng.integers(1, 60))) for _ in range(int(rng.integers(0, 3)))]
                for _ in range(steps)]
        alt = [[("x", int(rng.choice(tds)), int(rng.integers(1, 60)))] for _ in range(steps)]
        adaptive = j % 2 == 1

        def adv(hist, plan=plan, alt=alt, adaptive=adaptive, tag=j):
            i = len(hist)
            if i >= steps:
                return HALT
            recs = plan[i]
            if adaptive and hist and any(dict(hist[-1])["x"]):
                recs = alt[i]
            return MeasurementDatabase(tuple(
                Record(u, f"a{tag}-{i}-{k}", (td, v)) for k, (u, td, v) in enumerate(recs))), None
        advs.append(adv)
    return advs


def test_criterion_3_event_level_exact_dp():
    rng = np.random.default_rng(2024)
    tiny = enumerate_outputs(TriggerSpec((SpecEntry(31, (3,), (5,)),)), 1)
    checked = 0
    worst = 0.0
    with Timer() as t:
        for _ in range(20):
            o = _random_spec(rng)
            eps = float(rng.choice([0.25, 0.7, 1.5]))
            mech = EventMechanism(eps, {"x": o, "z": tiny})
            for adv in _event_adversaries(rng, o, 5):
                P = exact_mechanism_distribution(mech, adv)
                for unit in ("x", "z"):
                    Q = exact_mechanism_distribution(mech, adv, lambda d, u=unit: remove_unit(d, u))
                    worst = max(worst, hockey_stick_delta(P, Q, eps))
                    checked += 1
    assert checked >= 200
    assert worst <= 1e-12, worst
    assert t.elapsed < 120


# --- 4 ------------------------------------------------------------------------------

def test_criterion_4_truncated_laplace_grid():
    with Timer() as t:
        records = tdlap_grid(dims=(1, 2, 3), shifts=(1, 2, 3, 4), sparsities=(1, 2),
                             epsilons=(0.5, 1.0, 2.0), deltas=(0.1, 0.01))
    hs = [r for r in records if r.check == "tdlap"]
    tails = [r for r in records if r.check == "tdlap_tail"]
    assert len(tails) == 3 * 4 * 2 * 3 * 2
    assert all(r.passed for r in hs), [r for r in hs if not r.passed][:3]
    assert all(r.passed for r in tails)
    assert sum(r.params["applies"] for r in tails) == len(tails)
    assert t.elapsed < 120


# --- 5 ------------------------------------------------------------------------------

def _summary_adversary(rng):
    """Each turn adds fresh records and picks Y and eps from the last response."""
    n_turns = int(rng.integers(2, 7))
    units = [f"x{i}" for i in range(int(rng.integers(1, 4)))]
    fresh = [[(str(rng.choice(units)), int(rng.integers(0, 3)), int(rng.integers(0, 6)))
              for _ in range(int(rng.integers(0, 4)))] for _ in range(n_turns)]
    picks = rng.random((n_turns, 32))
    eps_a = [float(x) for x in rng.choice([0.1, 0.25, 0.4], n_turns)]
    eps_b = [float(x) for x in rng.choice([0.3, 0.5], n_turns)]
    deltas = [float(x) for x in rng.choice([0.0, 0.01, 0.02], n_turns)]

    def adv(hist):
        i = len(hist)
        if i >= n_turns:
            return HALT
        db = MeasurementDatabase(tuple(Record(u, f"y{i}-{k}", (key, v))
                                       for k, (u, key, v) in enumerate(fresh[i])))
        ys = [f"y{j}-{k}" for j in range(i + 1) for k in range(len(fresh[j]))]
        quiet = bool(hist) and (hist[-1] is ABORT or len(hist[-1]) == 0)
        Y = {y for y, p in zip(ys, picks[i]) if p < (0.8 if quiet else 0.5)}
        eps = eps_a[i] if quiet else eps_b[i]
        return db, MsrQuery(eps, deltas[i], Y, lambda rec: rec.payload)
    return adv, units


def test_criterion_5_rollout_accounting():
    rng = np.random.default_rng(77)
    with Timer() as t:
        for n in range(100):
            a1, a0 = int(rng.integers(3, 10)), int(rng.integers(1, 3))
            mech = SummaryMechanism(a1, a0, 1, "0.05", key_universe=(0, 1, 2))
            adv, units = _summary_adversary(rng)
            tr = run_transcript(mech, adv, n)
            state = mech.initial_state()
            for db, q in zip(tr.databases, tr.queries):
                state, _ = mech.step(state, db, q, np.random.default_rng(n))
            buf = io.StringIO()
            write_trace(buf, state.log, a1, a0, 1, "0.05")
            res = audit_rollout(buf.getvalue().splitlines())
            assert res.passed, (n, res.failing)
            pattern = [turn.aborted for turn in state.log]
            assert pattern == [r is ABORT for r in tr.responses]
            for x in units:
                st = mech.initial_state()
                flags = []
                for db, q in zip(tr.databases, tr.queries):
                    st, r = mech.step(st, remove_unit(db, x), q, np.random.default_rng(n))
                    flags.append(r is ABORT)
                assert flags == pattern
    assert t.elapsed < 60


# --- 6 ------------------------------------------------------------------------------

def test_criterion_6_budget_service_concurrency():
    ledger = PrivacyBudgetLedger()
    assert ledger.eps_star == DEFAULT_EPS_STAR == 64
    svc = AggregationService(ledger, 1 << 16, 1)
    reports = [AggregatableReport(i, i % 4, 1) for i in range(1, 25)]
    successes = [[] for _ in range(8)]
    aborted = [0] * 8
    over_cap = []
    stop = threading.Event()

    def stream(i):
        rng = np.random.default_rng(i)
        for _ in range(400):
            idx = rng.choice(len(reports), size=int(rng.integers(1, 8)), replace=False)
            batch = [reports[j] for j in idx]
            eps = Decimal(str(rng.choice(["0.5", "1", "2.5", "4"])))
            try:
                svc.aggregate(AggregationRequest(batch, eps, mode=Listed([0])), rng,
                              zero_noise=True)
                successes[i].append(({r.report_id for r in batch}, eps))
            except AggregationAborted:
                aborted[i] += 1

    def monitor():
        while not stop.is_set():
            for e, _ in ledger.snapshot().values():
                if e > ledger.eps_star:
                    over_cap.append(e)

    with Timer() as t:
        mon = threading.Thread(target=monitor)
        mon.start()
        threads = [threading.Thread(target=stream, args=(i,)) for i in range(8)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        stop.set()
        mon.join()

    assert not over_cap
    assert sum(aborted) > 0
    # Reconcile: every report's consumption equals the sum over committed requests only.
    want = {r.report_id: Decimal(0) for r in reports}
    for per_thread in successes:
        for ids, eps in per_thread:
            for r in ids:
                want[r] += eps
    for r in reports:
        got = ledger.consumed(r.report_id)[0]
        assert got == want[r.report_id] <= 64
    assert t.elapsed < 30


# --- 7 ------------------------------------------------------------------------------

def test_criterion_7_sampler():
    p = DLapParam(1.0, 20)
    with Timer() as t:
        x = sample_dlap(p, np.random.default_rng(123), 10 ** 6)
        counts = np.bincount(x + 20, minlength=41) / x.size
        exact = np.array([dlap_pmf(p, k) for k in range(-20, 21)])
        tv = 0.5 * np.abs(counts - exact).sum()
        y = sample_dlap(p, np.random.default_rng(123), 10 ** 6)
    assert tv <= 0.01, tv
    assert x.tobytes() == y.tobytes()
    assert t.elapsed < 30


# --- 8 ------------------------------------------------------------------------------

def test_criterion_8_group_privacy():
    eps, delta = group_privacy(math.log(2), 0.01, 2)
    assert eps == math.log(4)
    assert delta == 0.03
    for e, d in [(0.3, 0.0), (1.7, 1e-6), (math.log(2), 0.01)]:
        assert group_privacy(e, d, 1) == (e, d)
    assert gradual_expiration(math.log(2), 0.01, 4, 6) == (math.log(4), 0.03)


# --- 9 ------------------------------------------------------------------------------

def _tiny_adversaries():
    """Adaptive two-turn adversaries; turn 2 depends on what turn 1 released."""
    f = lambda rec: rec.payload
    db = MeasurementDatabase((Record("x1", "y1", (1, 2)), Record("x2", "y2", (2, 1))))

    def adv_a(hist):
        if len(hist) == 0:
            return db, MsrQuery("0.5", "0.05", {"y1", "y2"}, f)
        if len(hist) == 1:
            Y = {"y1"} if hist[0] == () else {"y1", "y2"}
            return db, MsrQuery("0.5", "0.05", Y, f)
        return HALT

    def adv_b(hist):
        if len(hist) == 0:
            return db, MsrQuery("0.5", "0.05", {"y1"}, f)
        if len(hist) == 1:
            released = {k for k, _ in hist[0]}
            return (db, MsrQuery("0.5", "0.05", {"y2"}, f) if released
                    else MsrQuery("0.5", "0.05", {"y1", "y2"}, f))
        return HALT

    def adv_c(hist):
        # A turn that would exceed the caps aborts for both databases alike.
        if len(hist) == 0:
            return db, MsrQuery("0.5", "0.1", {"y1", "y2"}, f)
        if len(hist) == 1:
            return db, MsrQuery("0.5", "0.05" if hist[0] else "0.01", {"y1", "y2"}, f)
        return HALT

    return [adv_a, adv_b, adv_c]


def test_criterion_9_small_summary_mechanism():
    worst = 0.0
    with Timer() as t:
        for a1, a0 in [(2, 1), (2, 2), (3, 1)]:
            mech = SummaryMechanism(a1, a0, 1, "0.1", key_universe=(1, 2))
            for adv in _tiny_adversaries():
                P = exact_mechanism_distribution(mech, adv)
                for x in ("x1", "x2"):
                    Q = exact_mechanism_distribution(mech, adv, lambda d, x=x: remove_unit(d, x))
                    d = hockey_stick_delta(P, Q, 1.0)
                    worst = max(worst, d)
                    assert d <= 0.1 + SLACK, (a1, a0, x, d)
    assert 0 < worst <= 0.1
    assert t.elapsed < 300

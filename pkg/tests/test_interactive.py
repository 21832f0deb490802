import numpy as np
import pytest
from hypothesis import given, strategies as st

from sandbox_measure.interactive import (BOTTOM, HALT, ZERO, AdversaryDistribution,
                                         IndividualFilterMechanism, IndividualQuery,
                                         InteractiveMechanism, NonHaltingAdversary,
                                         UniversalFilterMechanism, UniversalQuery,
                                         filter_eps_delta, filter_rho_delta, is_stable,
                                         masked_database, run_transcript, scripted_adversary,
                                         universal_individual_step, universal_step,
                                         unit_history)


class Counter(InteractiveMechanism):
    """Returns the database size plus a coin flip."""

    def initial_state(self):
        return 0

    def step(self, state, db, query, rng):
        return state + 1, len(db) + int(rng.integers(2))


def _count_query(theta):
    return UniversalQuery(theta, lambda units, rng: len(units),
                          lambda units: [(1.0, len(units))])


def test_transcript_lengths_and_determinism():
    assert len(run_transcript(Counter(), lambda h: HALT, 0)) == 0
    adv = scripted_adversary([({1, 2}, None), ({1}, None)])
    t = run_transcript(Counter(), adv, 4)
    assert len(t) == 2
    assert run_transcript(Counter(), adv, 4) == t


def test_step_guard():
    with pytest.raises(NonHaltingAdversary):
        run_transcript(Counter(), lambda h: ({1}, None), 0, max_steps=50)


def test_adversary_distribution():
    d = AdversaryDistribution((0.5, 0.5), (lambda h: HALT, scripted_adversary([({1}, None)])))
    lengths = {len(run_transcript(Counter(), d, s)) for s in range(20)}
    assert lengths == {0, 1}
    with pytest.raises(ValueError):
        AdversaryDistribution((0.3, 0.3), (None, None))


def test_stability():
    t = run_transcript(Counter(), scripted_adversary([({1}, None)] * 3), 0)
    assert is_stable(t)
    t = run_transcript(Counter(), scripted_adversary([({1}, None), ({2}, None)]), 0)
    assert not is_stable(t)


def test_filter_examples():
    assert filter_eps_delta([(0.5, 0)], (0.5, 0), (1, 0))
    assert not filter_eps_delta([(0.5, 0)], (0.6, 0), (1, 0))
    assert filter_eps_delta([], (0.2, 0.1), (1, 0.1))
    assert filter_rho_delta([(0.1, 0)], (0.1, 0), (0.2, 0))
    assert not filter_rho_delta([(0.1, 0)], (0.2, 0), (0.2, 0))
    assert filter_rho_delta([], (0.1, 0), (0.2, 0))


pos = st.floats(0, 2, allow_nan=False)


@given(st.lists(st.tuples(pos, pos), max_size=5), pos, pos, pos, pos)
def test_filter_monotone(hist, e, d, de, dd):
    caps = (3.0, 3.0)
    if not filter_eps_delta(hist, (e, d), caps):
        assert not filter_eps_delta(hist, (e + de, d + dd), caps)


def test_universal_step_paths():
    rng = np.random.default_rng(0)
    st1, r = universal_step((), {1, 2}, _count_query((0.6, 0)), (1, 0), rng)
    assert r == 2 and st1 == ((0.6, 0),)
    st2, r = universal_step(st1, {1, 2}, _count_query((0.6, 0)), (1, 0), rng)
    assert r is BOTTOM and st2[-1] == ZERO
    st3, r = universal_step(st2, {1, 2}, _count_query((0.3, 0)), (1, 0), rng)
    assert r == 2


def test_universal_mechanism_cap_safety():
    rng = np.random.default_rng(1)
    thetas = [(float(rng.uniform(0, 0.5)), 0.0) for _ in range(30)]
    adv = scripted_adversary([({1}, _count_query(t)) for t in thetas])
    mech = UniversalFilterMechanism((1.0, 0.0))
    state = mech.initial_state()
    for db, q in [adv(tuple([None] * i)) for i in range(30)]:
        state, _ = mech.step(state, db, q, rng)
        assert sum(e for e, _ in state) <= 1.0


def _ind_query(p):
    return IndividualQuery(p, lambda units, rng: frozenset(units),
                           lambda units: [(1.0, frozenset(units))])


def test_individual_masking():
    caps = (1.0, 0.0)
    st0 = ()
    st1, out = universal_individual_step(st0, frozenset({1, 2}),
                                         _ind_query({1: (0.9, 0), 2: (0.1, 0)}), caps,
                                         np.random.default_rng(0))
    assert out == {1, 2}
    q = _ind_query({1: (0.5, 0), 2: (0.5, 0)})
    assert masked_database(st1, frozenset({1, 2}), q, caps) == {2}
    st2, out = universal_individual_step(st1, frozenset({1, 2}), q, caps,
                                         np.random.default_rng(0))
    assert out == {2}
    assert unit_history(st2, 1)[-1] == ZERO
    assert unit_history(st2, 2) == [(0.1, 0), (0.5, 0)]


def test_individual_mechanism_cap_safety():
    rng = np.random.default_rng(2)
    mech = IndividualFilterMechanism((1.0, 0.1))
    state = mech.initial_state()
    for _ in range(40):
        p = {u: (float(rng.uniform(0, 0.4)), float(rng.uniform(0, 0.04))) for u in range(4)}
        state, _ = mech.step(state, frozenset(range(4)), _ind_query(p), rng)
    for u in range(4):
        h = unit_history(state, u)
        assert sum(e for e, _ in h) <= 1.0 and sum(d for _, d in h) <= 0.1

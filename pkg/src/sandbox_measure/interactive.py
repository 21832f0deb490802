"""Interactive mechanisms, adversaries, transcripts and privacy filters.

A mechanism maps ``(state, database, query)`` to a next state and a response
drawn from some distribution. An adversary maps the history of responses to
the next ``(database, query)`` or to :data:`HALT`. :func:`run_transcript`
plays the two against each other.

Mechanisms that can list their response distribution exactly implement
``exact_step``; the audit module enumerates transcripts through it.
"""

from __future__ import annotations

import abc
import dataclasses
import math
from typing import (Any, Callable, Dict, FrozenSet, Hashable, Iterable, List,
                    Mapping, Optional, Sequence, Tuple, Union)

import numpy as np

DEFAULT_MAX_STEPS = 100_000


class _Halt:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "HALT"


HALT = _Halt()


class _Bottom:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "BOTTOM"

    def __reduce__(self):
        return (_Bottom, ())


BOTTOM = _Bottom()

History = Tuple[Any, ...]
Adversary = Callable[[History], Any]  # -> (database, query) or HALT


class NonHaltingAdversary(RuntimeError):
    pass


class InteractiveMechanism(abc.ABC):
    """Initial state plus a step function."""

    @abc.abstractmethod
    def initial_state(self) -> Any:
        ...

    @abc.abstractmethod
    def step(self, state, database, query, rng: np.random.Generator) -> Tuple[Any, Any]:
        """Returns ``(next_state, response)``."""

    def exact_step(self, state, database, query) -> List[Tuple[float, Any, Any]]:
        """Lists ``(probability, next_state, response)`` triples."""
        raise NotImplementedError(f"{type(self).__name__} has no exact step")


@dataclasses.dataclass(frozen=True)
class Transcript:
    responses: Tuple[Any, ...]
    databases: Tuple[Any, ...] = ()
    queries: Tuple[Any, ...] = ()

    def __len__(self):
        return len(self.responses)


@dataclasses.dataclass(frozen=True)
class AdversaryDistribution:
    """Finite mixture over adversaries."""
    weights: Tuple[float, ...]
    adversaries: Tuple[Adversary, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.adversaries) or not self.weights:
            raise ValueError("need one weight per adversary")
        if any(w < 0 for w in self.weights) or not math.isclose(math.fsum(self.weights), 1.0):
            raise ValueError("weights must be a probability vector")

    def sample(self, rng: np.random.Generator) -> Adversary:
        return self.adversaries[int(rng.choice(len(self.adversaries), p=self.weights))]


def run_transcript(mechanism: InteractiveMechanism,
                   adversary: Union[Adversary, AdversaryDistribution],
                   seed: Union[int, np.random.Generator, None] = None, *,
                   transform: Optional[Callable[[Any], Any]] = None,
                   max_steps: int = DEFAULT_MAX_STEPS,
                   state: Any = None) -> Transcript:
    """Plays ``adversary`` against ``mechanism`` until it halts.

    ``transform`` is applied to each database before the mechanism sees it;
    passing ``lambda d: remove_unit(d, x)`` runs the ``M^{-x}`` variant.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(adversary, AdversaryDistribution):
        adversary = adversary.sample(rng)
    state = mechanism.initial_state() if state is None else state
    responses, databases, queries = [], [], []
    while True:
        move = adversary(tuple(responses))
        if move is HALT:
            break
        if len(responses) >= max_steps:
            raise NonHaltingAdversary(f"adversary did not halt within {max_steps} turns")
        database, query = move
        if transform is not None:
            database = transform(database)
        state, response = mechanism.step(state, database, query, rng)
        responses.append(response)
        databases.append(database)
        queries.append(query)
    return Transcript(tuple(responses), tuple(databases), tuple(queries))


def is_stable(transcript: Transcript) -> bool:
    """True when every turn used the same database."""
    return all(d == transcript.databases[0] for d in transcript.databases[1:])


def scripted_adversary(turns: Sequence[Tuple[Any, Any]]) -> Adversary:
    """Issues ``turns`` in order, ignoring responses, then halts."""
    turns = list(turns)

    def adversary(history):
        if len(history) >= len(turns):
            return HALT
        return turns[len(history)]
    return adversary


# --- filters -------------------------------------------------------------------

Theta = Tuple[float, float]
ZERO: Theta = (0.0, 0.0)


def _sums_within(hist: Iterable[Theta], theta: Theta, caps: Theta) -> bool:
    entries = list(hist) + [theta]
    if any(x < 0 for e in entries for x in e):
        raise ValueError("filter entries must be non-negative")
    first = math.fsum(e[0] for e in entries)
    second = math.fsum(e[1] for e in entries)
    return first <= caps[0] and second <= caps[1]


def filter_eps_delta(hist: Sequence[Theta], theta: Theta, caps: Theta) -> bool:
    """Accepts iff the summed eps and summed delta, including ``theta``, stay within caps."""
    return _sums_within(hist, theta, caps)


def filter_rho_delta(hist: Sequence[Theta], theta: Theta, caps: Theta) -> bool:
    """The zCDP-style filter: same test with rho in place of eps."""
    return _sums_within(hist, theta, caps)


Filter = Callable[[Sequence[Theta], Theta, Theta], bool]


@dataclasses.dataclass(frozen=True)
class UniversalQuery:
    """A one-shot mechanism on a set of privacy units, with its declared privacy.

    ``sample(units, rng)`` draws a response. ``distribution(units)``, when
    given, lists ``(probability, response)`` pairs for exact audits.
    """
    theta: Theta
    sample: Callable[[FrozenSet[Hashable], np.random.Generator], Any]
    distribution: Optional[Callable[[FrozenSet[Hashable]], List[Tuple[float, Any]]]] = None


def universal_step(state: Tuple[Theta, ...], units: FrozenSet[Hashable],
                   query: UniversalQuery, caps: Theta, rng: np.random.Generator,
                   filt: Filter = filter_eps_delta) -> Tuple[Tuple[Theta, ...], Any]:
    if filt(state, query.theta, caps):
        return state + (tuple(query.theta),), query.sample(frozenset(units), rng)
    return state + (ZERO,), BOTTOM


class UniversalFilterMechanism(InteractiveMechanism):
    """Runs any declared-privacy query while the filter accepts; else returns BOTTOM."""

    def __init__(self, caps: Theta, filt: Filter = filter_eps_delta):
        self.caps = tuple(caps)
        self.filt = filt

    def initial_state(self):
        return ()

    def step(self, state, database, query, rng):
        return universal_step(state, database, query, self.caps, rng, self.filt)

    def exact_step(self, state, database, query):
        if self.filt(state, query.theta, self.caps):
            nxt = state + (tuple(query.theta),)
            return [(p, nxt, r) for p, r in query.distribution(frozenset(database))]
        return [(1.0, state + (ZERO,), BOTTOM)]


@dataclasses.dataclass(frozen=True)
class IndividualQuery:
    """A one-shot query declaring a per-unit privacy map ``p``.

    Units missing from ``p`` are charged ``default``.
    """
    p: Mapping[Hashable, Theta]
    sample: Callable[[FrozenSet[Hashable], np.random.Generator], Any]
    distribution: Optional[Callable[[FrozenSet[Hashable]], List[Tuple[float, Any]]]] = None
    default: Theta = ZERO

    def theta_for(self, unit) -> Theta:
        return tuple(self.p.get(unit, self.default))


IndividualState = Tuple[Dict[Hashable, Theta], ...]


def unit_history(state: IndividualState, unit: Hashable) -> List[Theta]:
    return [p.get(unit, ZERO) for p in state]


def _mask(state: IndividualState, units: FrozenSet[Hashable], query: IndividualQuery,
          caps: Theta, filt: Filter):
    accepted: Dict[Hashable, Theta] = {}
    for unit in set(units) | set(query.p):
        theta = query.theta_for(unit)
        if filt(unit_history(state, unit), theta, caps):
            accepted[unit] = theta
    masked = frozenset(u for u in units if u in accepted)
    consumed = {u: t for u, t in accepted.items() if t != ZERO}
    return masked, consumed


def universal_individual_step(state: IndividualState, units: FrozenSet[Hashable],
                              query: IndividualQuery, caps: Theta,
                              rng: np.random.Generator, filt: Filter = filter_eps_delta,
                              ) -> Tuple[IndividualState, Any]:
    """Evaluates ``query`` on the units whose individual filters still accept.

    Rejected units are dropped from the database and consume nothing this step.
    """
    masked, consumed = _mask(state, units, query, caps, filt)
    return state + (consumed,), query.sample(masked, rng)


def masked_database(state: IndividualState, units: FrozenSet[Hashable],
                    query: IndividualQuery, caps: Theta,
                    filt: Filter = filter_eps_delta) -> FrozenSet[Hashable]:
    return _mask(state, units, query, caps, filt)[0]


class IndividualFilterMechanism(InteractiveMechanism):
    def __init__(self, caps: Theta, filt: Filter = filter_eps_delta):
        self.caps = tuple(caps)
        self.filt = filt

    def initial_state(self):
        return ()

    def step(self, state, database, query, rng):
        return universal_individual_step(state, database, query, self.caps, rng, self.filt)

    def exact_step(self, state, database, query):
        masked, consumed = _mask(state, database, query, self.caps, self.filt)
        nxt = state + (consumed,)
        return [(p, nxt, r) for p, r in query.distribution(masked)]

"""Markov household demand and its aggregation onto node/phase pairs.

The household model is a small discrete-time Markov chain over real-power
levels, stepped once per simulation slot.  It is a stand-in for fitted
appliance-level models: positive, bursty and stationary, which is all the
identification maths depends on.

Seeding
-------
Household ``i`` of allocation entry ``j`` draws from
``numpy.random.SeedSequence(master_seed, spawn_key=(j, i))``.  Streams are
therefore independent of how many other households exist, which is what makes
aggregation additive across disjoint household ranges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError, ParseError

DEFAULT_LEVELS = (150.0, 800.0, 2500.0)
# rows: idle, active, peak
DEFAULT_TRANSITIONS = (
    (0.80, 0.20, 0.00),
    (0.04, 0.95, 0.01),
    (0.00, 0.30, 0.70),
)
DEFAULT_POWER_FACTOR = 0.95

# Nodes that never carry households in the 13-bus scenario.
EXCLUDED_BUSES = ("650", "rg60", "692")


@dataclass(frozen=True)
class HouseholdModel:
    states: tuple[float, ...] = DEFAULT_LEVELS
    transition_rates: tuple[tuple[float, ...], ...] = DEFAULT_TRANSITIONS
    seed: int = 0

    def __post_init__(self):
        P = np.asarray(self.transition_rates, dtype=float)
        levels = np.asarray(self.states, dtype=float)
        n = levels.size
        if n == 0 or P.shape != (n, n):
            raise InvalidArgumentError(f"transition matrix must be {n}x{n}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise InvalidArgumentError("transition matrix rows must be probabilities summing to 1")
        if np.any(levels < 0):
            raise InvalidArgumentError("power levels must be nonnegative")

    @property
    def P(self) -> np.ndarray:
        return np.asarray(self.transition_rates, dtype=float)

    def stationary(self) -> np.ndarray:
        """Left Perron vector of the transition matrix."""
        P = self.P
        n = P.shape[0]
        A = np.vstack([P.T - np.eye(n), np.ones(n)])
        rhs = np.zeros(n + 1)
        rhs[-1] = 1.0
        pi, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()


def household_seed(master: int, entry: int, household: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(entry, household))


def _simulate_states(model: HouseholdModel, uniforms: np.ndarray, initial: np.ndarray) -> np.ndarray:
    """Step many chains in lockstep; ``uniforms`` has shape (households, K)."""
    cum = np.cumsum(model.P, axis=1)
    cum[:, -1] = 1.0
    n, K = uniforms.shape
    states = np.empty((n, K), dtype=np.int8)
    s = initial
    for k in range(K):
        states[:, k] = s
        s = (uniforms[:, k, None] > cum[s]).sum(axis=1)
    return states


def _household_draws(model: HouseholdModel, entry: int, households: range, K: int):
    pi_cum = np.cumsum(model.stationary())
    pi_cum[-1] = 1.0
    init = np.empty(len(households), dtype=np.intp)
    uni = np.empty((len(households), K))
    for row, i in enumerate(households):
        rng = np.random.default_rng(household_seed(model.seed, entry, i))
        init[row] = int(np.searchsorted(pi_cum, rng.random(), side="right"))
        uni[row] = rng.random(K)
    return init, uni


def sample_household(m: HouseholdModel, K: int, entry: int = 0, household: int = 0) -> np.ndarray:
    """Real-power trajectory (watts) of one household over ``K`` slots.

    The initial state is drawn from the stationary distribution.
    """
    if K < 1:
        raise InvalidArgumentError("K must be at least 1")
    init, uni = _household_draws(m, entry, range(household, household + 1), K)
    states = _simulate_states(m, uni, init)
    return np.asarray(m.states, dtype=float)[states[0]]


@dataclass(frozen=True)
class AllocationEntry:
    bus_id: str
    phase: str
    household_count: int


@dataclass(frozen=True)
class LoadAllocation:
    entries: tuple[AllocationEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for e in self.entries:
            if e.household_count < 0:
                raise InvalidArgumentError(f"negative household count at {e.bus_id}.{e.phase}")
            key = (e.bus_id, e.phase)
            if key in seen:
                raise InvalidArgumentError(f"duplicate allocation entry {e.bus_id}.{e.phase}")
            seen.add(key)

    @property
    def total(self) -> int:
        return sum(e.household_count for e in self.entries)

    def count(self, bus_id: str, phase: str) -> int:
        for e in self.entries:
            if e.bus_id == bus_id and e.phase == phase:
                return e.household_count
        return 0

    def validate_against(self, feeder, excluded=EXCLUDED_BUSES):
        """Raise if an entry names a missing node/phase or loads an excluded bus."""
        for e in self.entries:
            try:
                feeder.index_of(e.bus_id, e.phase)
            except KeyError:
                raise InvalidArgumentError(
                    f"allocation references missing node/phase {e.bus_id}.{e.phase}"
                ) from None
            if e.bus_id == feeder.slack_bus and e.household_count:
                raise InvalidArgumentError("the slack bus cannot carry households")
            if e.bus_id in excluded and e.household_count:
                raise InvalidArgumentError(f"bus {e.bus_id} is excluded from load allocation")


def load_allocation(text: str) -> LoadAllocation:
    """Parse ``bus phase count`` records (``#`` comments allowed)."""
    entries = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError("allocation record needs: bus phase count", line_no, 1)
        bus, phase, count = parts
        if phase not in ("a", "b", "c"):
            raise ParseError(f"malformed phase token {phase!r}", line_no, raw.find(phase) + 1, phase)
        try:
            n = int(count)
        except ValueError:
            raise ParseError(f"household count must be an integer, got {count!r}", line_no,
                             raw.rfind(count) + 1, count) from None
        entries.append(AllocationEntry(bus, phase, n))
    try:
        return LoadAllocation(tuple(entries))
    except InvalidArgumentError as exc:
        raise ParseError(str(exc)) from None


def save_allocation(alloc: LoadAllocation) -> str:
    return "".join(f"{e.bus_id} {e.phase} {e.household_count}\n" for e in alloc.entries)


def table1_allocation() -> LoadAllocation:
    return load_allocation(
        resources.files("gridsleuth.data").joinpath("table1.alloc").read_text(encoding="utf-8")
    )


@dataclass(frozen=True)
class DemandSeries:
    """Complex power (VA, consumption positive) per allocation entry and slot."""

    labels: tuple[str, ...]
    S: np.ndarray  # (entries, K)
    power_factor: float

    @property
    def K(self) -> int:
        return self.S.shape[1]

    def peak_to_average(self) -> np.ndarray:
        P = self.S.real
        mean = P.mean(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(mean > 0, P.max(axis=1) / mean, np.nan)


def aggregate(
    alloc: LoadAllocation,
    m: HouseholdModel,
    pf: float = DEFAULT_POWER_FACTOR,
    K: int = 1,
    offset: int = 0,
) -> DemandSeries:
    """Sum independent household trajectories per allocation entry.

    ``offset`` shifts the household numbering inside every entry, so counts
    ``n1`` at offset 0 plus ``n2`` at offset ``n1`` reproduce ``n1 + n2`` at
    offset 0 exactly.
    """
    if not 0.0 < pf <= 1.0:
        raise InvalidArgumentError(f"power factor must lie in (0, 1], got {pf}")
    if K < 1:
        raise InvalidArgumentError("K must be at least 1")
    levels = np.asarray(m.states, dtype=float)
    tan_phi = 0.0 if pf == 1.0 else math.tan(math.acos(pf))
    P = np.zeros((len(alloc.entries), K))
    for j, e in enumerate(alloc.entries):
        if e.household_count == 0:
            continue
        init, uni = _household_draws(m, j, range(offset, offset + e.household_count), K)
        states = _simulate_states(m, uni, init)
        # index-order summation keeps the result independent of batching
        for row in range(states.shape[0]):
            P[j] += levels[states[row]]
    S = P + 1j * (P * tan_phi)
    labels = tuple(f"{e.bus_id}.{e.phase}" for e in alloc.entries)
    return DemandSeries(labels=labels, S=S, power_factor=pf)


def demand_matrix(series: DemandSeries, alloc: LoadAllocation, feeder) -> np.ndarray:
    """Scatter a :class:`DemandSeries` onto the feeder's ``D`` node/phase rows."""
    out = np.zeros((feeder.D, series.K), dtype=np.complex128)
    for j, e in enumerate(alloc.entries):
        out[feeder.index_of(e.bus_id, e.phase)] += series.S[j]
    return out

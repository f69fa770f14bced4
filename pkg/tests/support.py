"""Shared builders for tests: random radial feeders and cached fixture streams."""

from __future__ import annotations

import functools

import numpy as np

from gridsleuth.feeder import Bus, FeederModel, LineSegment, ieee13
from gridsleuth.loads import AllocationEntry, HouseholdModel, LoadAllocation, table1_allocation
from gridsleuth.simulator import ScenarioEvent, run_scenario, window

PHASES = "abc"


def random_impedance(rng: np.random.Generator, n: int) -> np.ndarray:
    """Symmetric phase impedance with dominant self terms (ohms)."""
    r = rng.uniform(0.05, 0.4)
    x = rng.uniform(0.1, 0.8)
    self_z = r + 1j * x
    mutual = 0.3 * r + 0.4j * x
    Z = np.full((n, n), mutual, dtype=np.complex128)
    np.fill_diagonal(Z, self_z)
    return Z


def random_radial_feeder(seed: int, n_bus: int | None = None, shunt: bool = True):
    """Random tree feeder with 3 to 10 buses and 1 to 3 phases per bus.

    Every non-slack bus inherits a nonempty subset of its parent's phases, so
    every line's phases exist at both endpoints.  Returns (feeder, allocation)
    where the allocation loads every non-slack node/phase.
    """
    rng = np.random.default_rng(seed)
    n_bus = int(rng.integers(3, 11)) if n_bus is None else n_bus
    buses = [Bus("b0", tuple(PHASES))]
    lines = []
    for k in range(1, n_bus):
        parent = buses[int(rng.integers(0, k))]
        n_ph = int(rng.integers(1, len(parent.phases) + 1))
        phases = tuple(sorted(rng.choice(list(parent.phases), size=n_ph, replace=False)))
        buses.append(Bus(f"b{k}", phases))
        Z = random_impedance(rng, n_ph)
        Ys = 1j * rng.uniform(1e-6, 1e-5) * np.eye(n_ph) if shunt else None
        lines.append(LineSegment(f"L{k}", parent.bus_id, f"b{k}", phases, Z, Ys))
    f = FeederModel(tuple(buses), tuple(lines), "b0", base_voltage=2401.7771198288433,
                    base_power=1e6, name=f"random-{seed}")
    entries = tuple(AllocationEntry(b.bus_id, p, int(rng.integers(5, 40)))
                    for b in buses[1:] for p in b.phases)
    return f, LoadAllocation(entries)


def full_rank_window(f, alloc, K: int, seed: int = 0):
    """Noiseless window whose voltage matrix has full row rank.

    Loads on every non-slack node plus a perturbed substation voltage excite
    every direction of the voltage space.
    """
    snaps = run_scenario(f, alloc, K=K, household=HouseholdModel(seed=seed),
                         slack_variation=0.01, slack_seed=seed)
    return window(snaps, 1, K)


@functools.lru_cache(maxsize=8)
def fixture_snapshots(K: int, seed: int = 1, events: tuple = ()):
    """Noiseless fixture stream; ``events`` holds ``(slot, kind, target)`` tuples."""
    events = [ScenarioEvent(*e) for e in events]
    return tuple(run_scenario(ieee13(), table1_allocation(), events=events, K=K,
                              household=HouseholdModel(seed=seed)))


def fixture_window(K: int, seed: int = 1):
    return window(fixture_snapshots(K, seed), 1, K)

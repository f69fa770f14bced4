"""Quasi-static unbalanced power flow and synthetic phasor streams.

Each slot is one half AC cycle (120 snapshots per second at 60 Hz); the slot
index is the only clock, wall time is metadata.  Loads are constant-power at
the configured power factor and are updated every slot.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from . import feeder as fd
from .errors import (
    DivergenceError,
    InsufficientDataError,
    InvalidArgumentError,
    PowerFlowError,
)
from .loads import (
    DEFAULT_POWER_FACTOR,
    HouseholdModel,
    LoadAllocation,
    aggregate,
    demand_matrix,
)

log = logging.getLogger(__name__)

SLOTS_PER_SECOND = 120
EVENT_KINDS = ("line_trip", "line_close", "shunt_change")
_PHASE_SHIFT = {"a": 1.0 + 0.0j, "b": np.exp(-2j * np.pi / 3), "c": np.exp(2j * np.pi / 3)}


@dataclass(frozen=True)
class PhasorSnapshot:
    """Voltages (V) and injected currents (A) at every node/phase for one slot."""

    slot: int
    V: np.ndarray
    I: np.ndarray
    mismatch: float = 0.0
    iterations: int = 0


@dataclass(frozen=True)
class PhasorWindow:
    V: np.ndarray  # D x K
    I: np.ndarray  # D x K
    first_slot: int

    @property
    def K(self) -> int:
        return self.V.shape[1]

    @property
    def D(self) -> int:
        return self.V.shape[0]

    @property
    def slots(self) -> range:
        return range(self.first_slot, self.first_slot + self.K)


@dataclass(frozen=True)
class ScenarioEvent:
    slot: int
    kind: str
    target: str
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.slot < 1:
            raise InvalidArgumentError("event slot must be >= 1")
        if self.kind not in EVENT_KINDS:
            raise InvalidArgumentError(f"unknown event kind {self.kind!r}")

    def apply(self, f: fd.FeederModel) -> fd.FeederModel:
        if self.kind == "line_trip":
            return fd.apply_line_trip(f, self.target)
        if self.kind == "line_close":
            return fd.restore_line(f, self.target)
        phases = tuple(self.parameters.get("phases", ""))
        b = np.asarray(self.parameters.get("susceptance", []), dtype=float)
        if not phases or b.shape != (len(phases),):
            raise InvalidArgumentError("shunt_change needs 'phases' and one susceptance per phase")
        return fd.set_shunt(f, self.target, phases, np.diag(1j * b))


@dataclass(frozen=True)
class NoiseModel:
    """Polar Gaussian measurement noise: relative magnitude, absolute angle (rad)."""

    magnitude_std: float = 0.0
    angle_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.magnitude_std < 0 or self.angle_std < 0:
            raise InvalidArgumentError("noise standard deviations must be nonnegative")

    @property
    def silent(self) -> bool:
        return self.magnitude_std == 0.0 and self.angle_std == 0.0

    def perturb(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        m = rng.standard_normal(z.shape)
        a = rng.standard_normal(z.shape)
        return z * (1.0 + self.magnitude_std * m) * np.exp(1j * self.angle_std * a)


def nominal_slack(f: fd.FeederModel, magnitude_pu: float = 1.0) -> np.ndarray:
    """Balanced positive-sequence slack voltages for phases a, b, c."""
    return f.base_voltage * magnitude_pu * np.array([_PHASE_SHIFT[p] for p in fd.PHASES])


class PowerFlowSolver:
    """Fixed-point current-injection power flow for one feeder state.

    The slack-reduced admittance matrix is factored once; every slot then
    iterates ``V_L <- Y_LL^-1 (I_L(V) - Y_LS V_S)`` with constant-power load
    currents ``I_L = -conj(S / V)`` until the per-unit power mismatch drops
    below ``tol``.  Node/phases cut off from the slack are held at zero.
    """

    def __init__(self, f: fd.FeederModel, tol: float = 1e-8, max_iter: int = 200,
                 collapse_pu: float = 0.5):
        if not f.is_connected():
            log.info("feeder %s has islanded buses; they will be de-energized", f.name)
        self.feeder = f
        self.tol = tol
        self.max_iter = max_iter
        self.collapse_pu = collapse_pu
        self.ybus = fd.assemble_ybus(f)
        Y = self.ybus.Y
        self.slack = np.array(f.bus_indices(f.slack_bus), dtype=np.intp)
        self.energized = f.energized()
        is_slack = np.zeros(f.D, dtype=bool)
        is_slack[self.slack] = True
        self.load_idx = np.flatnonzero(self.energized & ~is_slack)
        self.dead_idx = np.flatnonzero(~self.energized)
        if self.load_idx.size:
            self._lu = sla.lu_factor(Y[np.ix_(self.load_idx, self.load_idx)])
        self._Y_LS = Y[np.ix_(self.load_idx, self.slack)]
        self._flat = np.array([_PHASE_SHIFT[np_.phase] for np_ in f.node_phases])

    def solve(self, S: np.ndarray, slack_voltage: Optional[Sequence[complex]] = None,
              V0: Optional[np.ndarray] = None, slot: Optional[int] = None) -> PhasorSnapshot:
        """Solve one slot.  ``S`` is consumed complex power (VA) per node/phase."""
        f = self.feeder
        S = np.asarray(S, dtype=np.complex128)
        if S.shape != (f.D,):
            raise InvalidArgumentError(f"S must have length {f.D}")
        Vs = nominal_slack(f) if slack_voltage is None else np.asarray(slack_voltage, np.complex128)
        Y = self.ybus.Y
        base_v, base_s = f.base_voltage, f.base_power
        V = np.zeros(f.D, dtype=np.complex128)
        V[self.slack] = Vs
        L = self.load_idx
        if V0 is not None and np.all(V0[L] != 0):
            V[L] = V0[L]
        else:
            V[L] = abs(Vs[0]) * self._flat[L]
        S_L = S[L]
        rhs_slack = self._Y_LS @ Vs
        mismatch = 0.0
        it = 0
        if L.size:
            for it in range(1, self.max_iter + 1):
                I_L = -np.conj(S_L / V[L])
                V[L] = sla.lu_solve(self._lu, I_L - rhs_slack)
                if np.min(np.abs(V[L])) < self.collapse_pu * base_v:
                    raise DivergenceError("voltage collapse below "
                                          f"{self.collapse_pu} p.u.", slot=slot)
                inj = V[L] * np.conj((Y[L] @ V))
                mismatch = float(np.max(np.abs(inj + S_L)) / base_s)
                if mismatch < self.tol:
                    break
            else:
                raise PowerFlowError(
                    f"power flow did not converge in {self.max_iter} iterations "
                    f"(max mismatch {mismatch:.3e} p.u.)", slot=slot, mismatch=mismatch)
        I = Y @ V
        return PhasorSnapshot(slot=0 if slot is None else slot, V=V, I=I,
                              mismatch=mismatch, iterations=it)


def solve_powerflow(f: fd.FeederModel, S, slack_voltage=None, **kw) -> PhasorSnapshot:
    return PowerFlowSolver(f, **kw).solve(S, slack_voltage)


def power_mismatch_pu(f: fd.FeederModel, snap: PhasorSnapshot, S: np.ndarray) -> float:
    """Largest per-unit complex-power mismatch over energized non-slack node/phases."""
    solver_mask = f.energized()
    solver_mask[f.bus_indices(f.slack_bus)] = False
    inj = snap.V * np.conj(snap.I)
    return float(np.max(np.abs(inj[solver_mask] + np.asarray(S)[solver_mask]), initial=0.0)
                 / f.base_power)


def run_scenario(
    f: fd.FeederModel,
    alloc: LoadAllocation,
    noise: NoiseModel = NoiseModel(),
    events: Iterable[ScenarioEvent] = (),
    K: int = 1,
    household: HouseholdModel = HouseholdModel(),
    power_factor: float = DEFAULT_POWER_FACTOR,
    slack_voltage: Optional[Sequence[complex]] = None,
    slack_variation: float = 0.0,
    slack_seed: int = 0,
    first_slot: int = 1,
    tol: float = 1e-8,
) -> Iterator[PhasorSnapshot]:
    """Yield ``K`` snapshots for slots ``first_slot .. first_slot+K-1``.

    Events scheduled for slot ``t`` edit the feeder before slot ``t`` is
    solved.  Measurement noise is applied to the solved voltages; currents are
    then recomputed from the noisy voltages through the true admittance matrix
    and receive their own independent noise.  ``slack_variation`` adds a
    per-slot relative perturbation to the substation voltage, which is what
    makes a voltage window full rank.
    """
    if K < 1:
        raise InvalidArgumentError("K must be at least 1")
    events = list(events)
    if any(b.slot < a.slot for a, b in zip(events, events[1:])):
        raise InvalidArgumentError("events must be sorted by slot")
    alloc.validate_against(f, excluded=())
    demand = demand_matrix(aggregate(alloc, household, power_factor, K), alloc, f)
    base_slack = nominal_slack(f) if slack_voltage is None else np.asarray(slack_voltage, np.complex128)
    noise_rng = np.random.default_rng(noise.seed)
    slack_rng = np.random.default_rng(slack_seed)
    solver = PowerFlowSolver(f, tol=tol)
    V_prev = None
    pending = iter(events)
    nxt = next(pending, None)
    if nxt is not None and nxt.slot < first_slot:
        raise InvalidArgumentError(f"event at slot {nxt.slot} precedes the first slot {first_slot}")
    for k in range(K):
        slot = first_slot + k
        changed = False
        while nxt is not None and nxt.slot == slot:
            f = nxt.apply(f)
            log.info("slot %d: applied %s on %s", slot, nxt.kind, nxt.target)
            changed = True
            nxt = next(pending, None)
        if changed:
            solver = PowerFlowSolver(f, tol=tol)
            V_prev = None
        Vs = base_slack
        if slack_variation > 0:
            Vs = base_slack * (1.0 + slack_variation * slack_rng.standard_normal(3)) * np.exp(
                1j * slack_variation * slack_rng.standard_normal(3))
        snap = solver.solve(demand[:, k], Vs, V0=V_prev, slot=slot)
        V_prev = snap.V
        if not noise.silent:
            V = noise.perturb(snap.V, noise_rng)
            I = noise.perturb(solver.ybus.Y @ V, noise_rng)
            snap = PhasorSnapshot(slot, V, I, snap.mismatch, snap.iterations)
        else:
            snap = PhasorSnapshot(slot, snap.V, snap.I, snap.mismatch, snap.iterations)
        yield snap


def window(stream: Iterable[PhasorSnapshot], first: int, K: int) -> PhasorWindow:
    """Stack the snapshots for slots ``first .. first+K-1`` column-wise."""
    if K < 1:
        raise InvalidArgumentError("K must be at least 1")
    cols_V, cols_I = [], []
    want = first
    for snap in stream:
        if snap.slot < want:
            continue
        if snap.slot != want:
            raise InsufficientDataError(f"slot {want} missing from stream")
        cols_V.append(snap.V)
        cols_I.append(snap.I)
        want += 1
        if len(cols_V) == K:
            break
    if len(cols_V) < K:
        raise InsufficientDataError(
            f"stream ended after {len(cols_V)} of {K} requested snapshots from slot {first}")
    return PhasorWindow(V=np.column_stack(cols_V), I=np.column_stack(cols_I), first_slot=first)

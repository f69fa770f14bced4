"""Online detection, whiteness monitoring and sparse localization of admittance changes.

A detector holds the believed admittance ``Y0`` and compares every snapshot
against it through the prediction error ``e(k) = I(k) - Y0 V(k)``.  An alarm
is raised as soon as ``||e(k)||_2`` exceeds ``gamma``; the change
``dY = Y1 - Y0`` is then recovered from a short post-event window as the
sparsest symmetric matrix with ``dY V = I - Y0 V``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import (
    ConvergenceError,
    InfeasibleError,
    InsufficientDataError,
    InvalidArgumentError,
    LocalizationError,
)
from .numerics import BasisPursuitProblem, basis_pursuit, symmetric_pairs

log = logging.getLogger(__name__)

CLASSIFICATIONS = ("line_trip", "line_close", "shunt_change", "switch_pair", "unknown")
DEFAULT_SAFETY_FACTOR = 1.5
DEFAULT_GAMMA_FLOOR = 1e-6  # amperes
DEFAULT_MIN_SAMPLES = 10
DEFAULT_BLOCK_FLOOR = 1e-3
MIN_CALIBRATION_SAMPLES = 1000
MIN_TURNING_POINT_SAMPLES = 20


def _matrix(Y0) -> np.ndarray:
    return np.asarray(getattr(Y0, "Y", Y0), dtype=np.complex128)


@dataclass
class HistoryEntry:
    slot: int
    residual_norm: float
    gamma: float
    alarmed: bool


@dataclass
class Alarm:
    slot: int
    residual_norm: float
    gamma: float


@dataclass
class DetectorState:
    """Mutable single-owner state of the online detector."""

    Y0: np.ndarray
    gamma: float
    history_window: int = 10000
    armed: bool = True
    history: deque = field(init=False)

    def __post_init__(self):
        self.Y0 = _matrix(self.Y0)
        if self.Y0.ndim != 2 or self.Y0.shape[0] != self.Y0.shape[1]:
            raise InvalidArgumentError("Y0 must be square")
        if not self.gamma > 0:
            raise InvalidArgumentError("gamma must be positive")
        if self.history_window < 1:
            raise InvalidArgumentError("history_window must be at least 1")
        self.history = deque(maxlen=self.history_window)

    def rebase(self, record: "EventRecord") -> None:
        """Accept a localization: ``Y0 <- Y0 + dY`` and re-arm."""
        self.Y0 = self.Y0 + record.delta_Y
        self.armed = True


def residual(state: DetectorState, snapshot) -> tuple[np.ndarray, float]:
    """Prediction error ``e = I - Y0 V`` and its Euclidean norm."""
    V = np.asarray(snapshot.V)
    I = np.asarray(snapshot.I)
    D = state.Y0.shape[0]
    if V.shape != (D,) or I.shape != (D,):
        raise InvalidArgumentError(f"snapshot dimension {V.shape} does not match Y0 ({D})")
    e = I - state.Y0 @ V
    return e, float(np.linalg.norm(e))


def detect(state: DetectorState, snapshot) -> Optional[Alarm]:
    """Alarm iff ``||e(k)|| > gamma``; the residual is logged either way.

    A raised alarm disarms the detector until :meth:`DetectorState.rebase`.
    """
    _, norm = residual(state, snapshot)
    alarmed = state.armed and norm > state.gamma
    state.history.append(HistoryEntry(snapshot.slot, norm, state.gamma, alarmed))
    if not alarmed:
        return None
    state.armed = False
    log.info("slot %d: residual %.3e exceeds gamma %.3e", snapshot.slot, norm, state.gamma)
    return Alarm(snapshot.slot, norm, state.gamma)


def calibrate_threshold(norms: Sequence[float], alpha: float,
                        safety_factor: float = DEFAULT_SAFETY_FACTOR,
                        floor: float = DEFAULT_GAMMA_FLOOR) -> float:
    """``gamma = max(safety_factor * quantile_{1-alpha}(norms), floor)``.

    ``norms`` come from an event-free stream.  The floor keeps ``gamma``
    positive on noiseless data, whose residuals are exactly zero.
    """
    x = np.asarray(norms, dtype=float).ravel()
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    if x.size < MIN_CALIBRATION_SAMPLES:
        raise InsufficientDataError(
            f"calibration needs at least {MIN_CALIBRATION_SAMPLES} residuals, got {x.size}")
    if safety_factor <= 0 or floor < 0:
        raise InvalidArgumentError("safety_factor must be positive and floor nonnegative")
    return max(safety_factor * float(np.quantile(x, 1.0 - alpha)), floor)


@dataclass(frozen=True)
class WhitenessReport:
    n: int
    turning_points: int
    z_score: float
    passed: bool


def turning_point_test(series: Sequence[float], alpha: float = 0.05) -> WhitenessReport:
    """Turning-point test for serial independence.

    Under the i.i.d. hypothesis the number of interior local extrema ``T`` has
    mean ``2(n-2)/3`` and variance ``(16n-29)/90``; the normal approximation
    gives a two-sided test at level ``alpha``.  Ties are not turning points.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n < MIN_TURNING_POINT_SAMPLES:
        raise InsufficientDataError(f"turning point test needs n >= {MIN_TURNING_POINT_SAMPLES}")
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError("alpha must lie in (0, 1)")
    mid, left, right = x[1:-1], x[:-2], x[2:]
    T = int(np.count_nonzero(((mid > left) & (mid > right)) | ((mid < left) & (mid < right))))
    z = (T - 2.0 * (n - 2) / 3.0) / math.sqrt((16.0 * n - 29.0) / 90.0)
    return WhitenessReport(n, T, z, abs(z) <= stats.norm.ppf(1.0 - alpha / 2.0))


@dataclass
class ChangedBlock:
    bus_m: str
    bus_n: str
    magnitude: float

    @property
    def diagonal(self) -> bool:
        return self.bus_m == self.bus_n


@dataclass
class EventRecord:
    t: int
    delta_Y: np.ndarray
    changed_blocks: list
    classification: str
    samples_used: int
    line_ids: tuple = ()
    residual: float = 0.0
    completed_entries: int = 0

    def to_json(self, labels: Optional[Sequence[str]] = None, config_hash: str = "") -> str:
        dY = self.delta_Y
        nz = [(int(i), int(j)) for i, j in zip(*np.nonzero(dY)) if i <= j]
        doc = {
            "config_hash": config_hash,
            "t": self.t,
            "classification": self.classification,
            "line_ids": list(self.line_ids),
            "samples_used": self.samples_used,
            "residual": self.residual,
            "completed_entries": self.completed_entries,
            "changed_blocks": [[b.bus_m, b.bus_n, b.magnitude] for b in self.changed_blocks],
            "D": int(dY.shape[0]),
            "labels": list(labels) if labels is not None else None,
            # upper triangle only; dY is symmetric
            "delta_Y": [[i, j, float(dY[i, j].real), float(dY[i, j].imag)] for i, j in nz],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EventRecord":
        doc = json.loads(text)
        D = doc["D"]
        dY = np.zeros((D, D), dtype=np.complex128)
        for i, j, re, im in doc["delta_Y"]:
            dY[i, j] = dY[j, i] = complex(re, im)
        blocks = [ChangedBlock(m, n, mag) for m, n, mag in doc["changed_blocks"]]
        return cls(doc["t"], dY, blocks, doc["classification"], doc["samples_used"],
                   tuple(doc.get("line_ids", ())), doc.get("residual", 0.0),
                   doc.get("completed_entries", 0))


def _bus_groups(block_index: dict) -> dict:
    return {m: list(rows) for (m, n), (rows, _) in block_index.items() if m == n}


def changed_blocks(dY: np.ndarray, block_index: dict,
                   block_floor: float = DEFAULT_BLOCK_FLOOR) -> list[ChangedBlock]:
    """Bus-pair blocks of ``dY`` whose Frobenius norm is at least ``block_floor``
    times the largest block norm, sorted by magnitude (descending)."""
    buses = _bus_groups(block_index)
    names = list(buses)
    mags = []
    for a, m in enumerate(names):
        for n in names[a:]:
            mags.append((m, n, float(np.linalg.norm(dY[np.ix_(buses[m], buses[n])]))))
    top = max((x[2] for x in mags), default=0.0)
    if top == 0.0:
        return []
    keep = [ChangedBlock(m, n, v) for m, n, v in mags if v >= block_floor * top]
    keep.sort(key=lambda b: -b.magnitude)
    return keep


def _line_between(feeder, m: str, n: str):
    for ln in feeder.lines:
        if {ln.from_bus, ln.to_bus} == {m, n}:
            return ln
    return None


def _match_line(dY, feeder, block: ChangedBlock, sign: float, rel_tol: float):
    """Line whose ``sign * y_series`` reproduces the block, or None."""
    ln = _line_between(feeder, block.bus_m, block.bus_n)
    if ln is None:
        return None
    i = [feeder.index_of(block.bus_m, p) for p in ln.phases]
    j = [feeder.index_of(block.bus_n, p) for p in ln.phases]
    expect = sign * ln.series_admittance()
    got = dY[np.ix_(i, j)]
    if np.linalg.norm(got - expect) <= rel_tol * np.linalg.norm(expect):
        return ln
    return None


def _offdiag_sign(dY, block_index, block: ChangedBlock) -> float:
    rows = block_index[(block.bus_m, block.bus_n)][0]
    cols = block_index[(block.bus_m, block.bus_n)][1]
    # removing a series branch adds +y to the off-diagonal; Re(y) > 0 for lossy lines
    return float(np.sign(np.real(np.sum(dY[np.ix_(rows, cols)]))))


def classify(dY: np.ndarray, block_index: dict, feeder=None,
             block_floor: float = DEFAULT_BLOCK_FLOOR, rel_tol: float = 0.1,
             blocks: Optional[list] = None) -> tuple[str, tuple]:
    """Name the event behind ``dY`` and return ``(classification, line_ids)``.

    With a feeder model, off-diagonal blocks are matched against the series
    admittance of the line joining the two buses: ``+y`` on an in-service line
    is a trip, ``-y`` on an out-of-service line is a closure.  Without one,
    only the sign pattern of each off-diagonal block is used.
    """
    if blocks is None:
        blocks = changed_blocks(dY, block_index, block_floor)
    if not blocks:
        return "unknown", ()
    off = [b for b in blocks if not b.diagonal]
    diag_buses = {b.bus_m for b in blocks if b.diagonal}
    if not off:
        return "shunt_change", ()
    if len(off) > 2:
        return "unknown", ()
    roles = []
    for b in off:
        if diag_buses - {x for o in off for x in (o.bus_m, o.bus_n)}:
            return "unknown", ()
        if feeder is not None:
            ln = _match_line(dY, feeder, b, +1.0, rel_tol)
            if ln is not None and ln.in_service:
                roles.append(("open", ln.line_id))
                continue
            ln = _match_line(dY, feeder, b, -1.0, rel_tol)
            if ln is not None and not ln.in_service:
                roles.append(("close", ln.line_id))
                continue
            return "unknown", ()
        s = _offdiag_sign(dY, block_index, b)
        roles.append(("open" if s > 0 else "close", f"{b.bus_m}-{b.bus_n}"))
    kinds = sorted(r for r, _ in roles)
    ids = tuple(i for _, i in roles)
    if kinds == ["open"]:
        return "line_trip", ids
    if kinds == ["close"]:
        return "line_close", ids
    if kinds == ["close", "open"]:
        return "switch_pair", ids
    return "unknown", ids


def complete_unobservable(dY: np.ndarray, dead: np.ndarray, feeder, line_ids) -> int:
    """Fill the diagonal entries of de-energized node/phases from the matched lines.

    A node/phase whose voltage is zero throughout the window leaves its own
    column of ``dY`` unconstrained, so its self-admittance change cannot be
    seen in data.  When classification has tied the event to specific lines,
    their model supplies that change: ``-(y + Ys/2)`` for an opened line and
    ``+(y + Ys/2)`` for a closed one.  Only entries between two dead
    node/phases are written.  Returns the number of entries written.
    """
    count = 0
    for lid in line_ids:
        ln = feeder.line(lid)
        sign = -1.0 if ln.in_service else 1.0
        block = sign * (ln.series_admittance() + 0.5 * ln.Ys)
        for bus in (ln.from_bus, ln.to_bus):
            idx = [feeder.index_of(bus, p) for p in ln.phases]
            for a, i in enumerate(idx):
                for c, j in enumerate(idx):
                    if dead[i] and dead[j]:
                        dY[i, j] += block[a, c]
                        count += 1
    return count


def localize(Y0, window, block_index: dict, t: Optional[int] = None, feeder=None,
             min_samples: int = DEFAULT_MIN_SAMPLES, block_floor: float = DEFAULT_BLOCK_FLOOR,
             epsilon: float = 0.0, tolerance: float = 1e-8, max_iters: int = 50000,
             complete: bool = True, zero_tol: float = 1e-9) -> EventRecord:
    """Recover the sparsest symmetric ``dY`` with ``dY V = I - Y0 V`` on a post-event window.

    ``epsilon > 0`` relaxes the equality to ``||dY V - (I - Y0 V)||_F <= epsilon``
    for noisy data.  Unknowns are ``dY`` in row-major order, so the constraint
    matrix is ``kron(I_D, V^T)`` with rows ordered by (node, sample).  Voltages
    are scaled to unit RMS first, which leaves the solution unchanged.

    With ``complete`` and a feeder, entries that no measurement can reach
    (see :func:`complete_unobservable`) are filled in after classification.
    A residual with ``||I - Y0 V||_F <= zero_tol * ||I||_F`` is rounding
    noise and yields ``dY = 0``.
    """
    Y0 = _matrix(Y0)
    V, I = np.asarray(window.V), np.asarray(window.I)
    D, K = V.shape
    if Y0.shape != (D, D):
        raise InvalidArgumentError("Y0 and the window disagree on D")
    if K < min_samples:
        raise InsufficientDataError(f"localization needs at least {min_samples} samples, got {K}")
    E = I - Y0 @ V
    first = window.first_slot if t is None else t
    if np.linalg.norm(E) <= zero_tol * np.linalg.norm(I):
        return EventRecord(first, np.zeros((D, D), np.complex128), [], "unknown", K,
                           residual=float(np.linalg.norm(E)))
    s = float(np.sqrt(np.mean(np.abs(V) ** 2))) or 1.0
    A = np.kron(np.eye(D), V.T / s)
    b = (E / s).ravel()
    prob = BasisPursuitProblem(A, b, symmetry_map=symmetric_pairs(D), tolerance=tolerance,
                               max_iters=max_iters, epsilon=epsilon / s)
    try:
        y = basis_pursuit(prob)
    except InfeasibleError as exc:
        raise LocalizationError(
            "no symmetric admittance change explains the window; it probably spans the "
            "event boundary, retry with a later window") from exc
    except ConvergenceError as exc:
        raise LocalizationError(f"sparse recovery did not converge: {exc}") from exc
    dY = y.reshape(D, D)
    blocks = changed_blocks(dY, block_index, block_floor)
    label, ids = classify(dY, block_index, feeder, block_floor, blocks=blocks)
    res = float(np.linalg.norm(dY @ V - E))
    filled = 0
    if complete and feeder is not None and label in ("line_trip", "line_close", "switch_pair"):
        filled = complete_unobservable(dY, ~np.any(V != 0, axis=1), feeder, ids)
    return EventRecord(first, dY, blocks, label, K, ids, res, filled)


ALARM_COLUMNS = ("slot", "residual_norm", "gamma", "alarmed")


def write_alarm_log(history: Iterable[HistoryEntry], fh, config_hash: str = "") -> None:
    fh.write(f"# config_hash={config_hash}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(ALARM_COLUMNS)
    for h in history:
        w.writerow([h.slot, repr(h.residual_norm), repr(h.gamma), int(h.alarmed)])


def read_alarm_log(fh) -> tuple[str, list[HistoryEntry]]:
    first = fh.readline()
    if not first.startswith("# config_hash="):
        raise InvalidArgumentError("alarm log lacks its config_hash header")
    r = csv.reader(fh)
    header = next(r)
    if tuple(header) != ALARM_COLUMNS:
        raise InvalidArgumentError(f"unexpected alarm log columns {header}")
    rows = [HistoryEntry(int(s), float(n), float(g), bool(int(a))) for s, n, g, a in r]
    return first.strip()[len("# config_hash="):], rows

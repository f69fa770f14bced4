"""Three-phase feeder model, bus admittance assembly and the feeder text format.

Lines are pi-equivalents: a series phase impedance matrix ``Z`` and a total
shunt admittance matrix ``Ys`` split half to each end.  Transformers,
regulators and switches are all series ``LineSegment`` records with an
equivalent impedance.

Feeder file format (``#`` starts a comment, blank lines ignored)::

    file     := header* section*
    header   := key "=" value            # name, base_voltage, base_power, slack
    section  := "[BUS]" bus* | "[LINE]" line* | "[SHUNT]" shunt*
    bus      := bus_id phases
    line     := line_id from_bus to_bus phases status kind "Z=" matrix ["Ys=" matrix]
    shunt    := bus_id phases "Y=" matrix
    phases   := one or more of "a" "b" "c", in that order
    status   := "in" | "out"
    kind     := "line" | "switch" | "transformer" | "regulator"
    matrix   := row (";" row)*
    row      := complex ("," complex)*
    complex  := Python complex literal such as 0.1+0.2j

Impedances are in ohm, admittances in siemens, ``base_voltage`` is the
line-to-neutral volt base and ``base_power`` the per-phase VA base.
"""

from __future__ import annotations

import dataclasses
from collections import defaultdict, deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional

import numpy as np

from .errors import AssemblyError, InvalidArgumentError, ModelError, ParseError

PHASES = ("a", "b", "c")
LINE_KINDS = ("line", "switch", "transformer", "regulator")
SWITCH_IMPEDANCE = 1e-4 + 1e-4j


@dataclass(frozen=True)
class NodePhase:
    bus_id: str
    phase: str
    index: int

    @property
    def label(self) -> str:
        return f"{self.bus_id}.{self.phase}"


@dataclass(frozen=True)
class Bus:
    bus_id: str
    phases: tuple[str, ...]


def _frozen_matrix(M, n, what):
    arr = np.array(M, dtype=np.complex128)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.shape != (n, n):
        raise ModelError(f"{what} must be {n}x{n}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{what} has non-finite entries")
    arr.setflags(write=False)
    return arr


def _check_symmetric(M, what, tol=1e-12):
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > tol * scale:
        raise ModelError(f"{what} is not symmetric")


@dataclass(frozen=True)
class LineSegment:
    line_id: str
    from_bus: str
    to_bus: str
    phases: tuple[str, ...]
    Z: np.ndarray
    Ys: np.ndarray = None
    in_service: bool = True
    kind: str = "line"

    def __post_init__(self):
        phases = tuple(self.phases)
        if not phases:
            raise ModelError(f"line {self.line_id}: empty phase set")
        if self.from_bus == self.to_bus:
            raise ModelError(f"line {self.line_id}: from_bus equals to_bus")
        if self.kind not in LINE_KINDS:
            raise ModelError(f"line {self.line_id}: unknown kind {self.kind!r}")
        n = len(phases)
        Z = _frozen_matrix(self.Z, n, f"line {self.line_id} Z")
        Ys = _frozen_matrix(np.zeros((n, n)) if self.Ys is None else self.Ys, n,
                            f"line {self.line_id} Ys")
        _check_symmetric(Z, f"line {self.line_id} Z")
        _check_symmetric(Ys, f"line {self.line_id} Ys")
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "Ys", Ys)

    def series_admittance(self) -> np.ndarray:
        try:
            cond = np.linalg.cond(self.Z)
            if not np.isfinite(cond) or cond > 1e14:
                raise np.linalg.LinAlgError("ill-conditioned")
            return np.linalg.inv(self.Z)
        except np.linalg.LinAlgError as exc:
            raise AssemblyError(f"line {self.line_id}: singular impedance matrix") from exc

    def __eq__(self, other):
        if not isinstance(other, LineSegment):
            return NotImplemented
        return (
            (self.line_id, self.from_bus, self.to_bus, self.phases, self.in_service, self.kind)
            == (other.line_id, other.from_bus, other.to_bus, other.phases, other.in_service, other.kind)
            and np.array_equal(self.Z, other.Z)
            and np.array_equal(self.Ys, other.Ys)
        )

    __hash__ = None


@dataclass(frozen=True)
class Shunt:
    bus_id: str
    phases: tuple[str, ...]
    Y: np.ndarray

    def __post_init__(self):
        phases = tuple(self.phases)
        Y = _frozen_matrix(self.Y, len(phases), f"shunt at {self.bus_id}")
        _check_symmetric(Y, f"shunt at {self.bus_id}")
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "Y", Y)

    def __eq__(self, other):
        if not isinstance(other, Shunt):
            return NotImplemented
        return (self.bus_id, self.phases) == (other.bus_id, other.phases) and np.array_equal(
            self.Y, other.Y
        )

    __hash__ = None


@dataclass(frozen=True)
class FeederModel:
    """Immutable feeder; edits such as :func:`apply_line_trip` return copies."""

    buses: tuple[Bus, ...]
    lines: tuple[LineSegment, ...]
    slack_bus: str
    base_voltage: float = 2401.7771198288433
    base_power: float = 1e6
    shunts: tuple[Shunt, ...] = ()
    name: str = "feeder"
    node_phases: tuple[NodePhase, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        buses = tuple(self.buses)
        lines = tuple(self.lines)
        shunts = tuple(self.shunts)
        object.__setattr__(self, "buses", buses)
        object.__setattr__(self, "lines", lines)
        object.__setattr__(self, "shunts", shunts)
        ids = [b.bus_id for b in buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ModelError(f"duplicate bus ids: {dup}")
        line_ids = [ln.line_id for ln in lines]
        if len(set(line_ids)) != len(line_ids):
            raise ModelError("duplicate line ids")
        phase_of = {b.bus_id: set(b.phases) for b in buses}
        for b in buses:
            if not b.phases or any(p not in PHASES for p in b.phases):
                raise ModelError(f"bus {b.bus_id}: bad phase set {b.phases}")
        for ln in lines:
            for end in (ln.from_bus, ln.to_bus):
                if end not in phase_of:
                    raise ModelError(f"line {ln.line_id}: dangling endpoint {end}")
                if not set(ln.phases) <= phase_of[end]:
                    raise ModelError(
                        f"line {ln.line_id}: phases {''.join(ln.phases)} not present at bus {end}"
                    )
        for sh in shunts:
            if sh.bus_id not in phase_of or not set(sh.phases) <= phase_of[sh.bus_id]:
                raise ModelError(f"shunt at {sh.bus_id}: unknown bus or phase")
        if self.slack_bus not in phase_of:
            raise ModelError(f"slack bus {self.slack_bus} does not exist")
        if phase_of[self.slack_bus] != set(PHASES):
            raise ModelError("slack bus must carry all three phases")
        nps = []
        for b in buses:
            for p in PHASES:
                if p in b.phases:
                    nps.append(NodePhase(b.bus_id, p, len(nps)))
        object.__setattr__(self, "node_phases", tuple(nps))

    @property
    def D(self) -> int:
        return len(self.node_phases)

    @property
    def labels(self) -> list[str]:
        return [np_.label for np_ in self.node_phases]

    def index_of(self, bus_id: str, phase: str) -> int:
        for np_ in self.node_phases:
            if np_.bus_id == bus_id and np_.phase == phase:
                return np_.index
        raise KeyError((bus_id, phase))

    def bus_indices(self, bus_id: str, phases: Optional[Iterable[str]] = None) -> list[int]:
        wanted = None if phases is None else set(phases)
        return [
            np_.index
            for np_ in self.node_phases
            if np_.bus_id == bus_id and (wanted is None or np_.phase in wanted)
        ]

    def line(self, line_id: str) -> LineSegment:
        for ln in self.lines:
            if ln.line_id == line_id:
                return ln
        raise KeyError(f"unknown line {line_id!r}")

    def in_service_lines(self) -> list[LineSegment]:
        return [ln for ln in self.lines if ln.in_service]

    def is_connected(self) -> bool:
        adj = defaultdict(set)
        for ln in self.in_service_lines():
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        seen = {self.slack_bus}
        todo = deque([self.slack_bus])
        while todo:
            b = todo.popleft()
            for nb in adj[b] - seen:
                seen.add(nb)
                todo.append(nb)
        return len(seen) == len(self.buses)

    def is_radial(self) -> bool:
        return self.is_connected() and len(self.in_service_lines()) == len(self.buses) - 1

    def energized(self) -> np.ndarray:
        """Boolean mask over node/phases reachable from the slack through in-service phases."""
        adj = defaultdict(list)
        for ln in self.in_service_lines():
            for p in ln.phases:
                i = self.index_of(ln.from_bus, p)
                j = self.index_of(ln.to_bus, p)
                adj[i].append(j)
                adj[j].append(i)
        mask = np.zeros(self.D, dtype=bool)
        todo = deque(self.bus_indices(self.slack_bus))
        mask[list(todo)] = True
        while todo:
            i = todo.popleft()
            for j in adj[i]:
                if not mask[j]:
                    mask[j] = True
                    todo.append(j)
        return mask

    def __eq__(self, other):
        if not isinstance(other, FeederModel):
            return NotImplemented
        return (
            self.buses == other.buses
            and self.lines == other.lines
            and self.shunts == other.shunts
            and self.slack_bus == other.slack_bus
            and self.base_voltage == other.base_voltage
            and self.base_power == other.base_power
            and self.name == other.name
        )

    __hash__ = None


@dataclass(frozen=True)
class BusAdmittance:
    """Complex-symmetric ``D x D`` bus admittance matrix with its index map."""

    Y: np.ndarray
    node_phases: tuple[NodePhase, ...]
    block_index: dict

    @property
    def D(self) -> int:
        return self.Y.shape[0]

    @property
    def labels(self) -> list[str]:
        return [np_.label for np_ in self.node_phases]

    def block(self, bus_m: str, bus_n: str) -> np.ndarray:
        rows, cols = self.block_index[(bus_m, bus_n)]
        return self.Y[np.ix_(rows, cols)]


def _block_index(node_phases) -> dict:
    by_bus: dict[str, list[int]] = {}
    for np_ in node_phases:
        by_bus.setdefault(np_.bus_id, []).append(np_.index)
    idx = {}
    for m, rows in by_bus.items():
        for n, cols in by_bus.items():
            idx[(m, n)] = (tuple(rows), tuple(cols))
    return idx


def assemble_ybus(f: FeederModel) -> BusAdmittance:
    """Assemble the bus admittance matrix.

    Off-diagonal line blocks get ``-Z^-1``; each endpoint's diagonal block gets
    ``Z^-1 + Ys/2``; shunt elements add to their bus's diagonal block.
    Out-of-service lines contribute nothing.
    """
    D = f.D
    Y = np.zeros((D, D), dtype=np.complex128)
    for ln in f.lines:
        if not ln.in_service:
            continue
        y = ln.series_admittance()
        half = 0.5 * ln.Ys
        i = [f.index_of(ln.from_bus, p) for p in ln.phases]
        j = [f.index_of(ln.to_bus, p) for p in ln.phases]
        Y[np.ix_(i, i)] += y + half
        Y[np.ix_(j, j)] += y + half
        Y[np.ix_(i, j)] -= y
        Y[np.ix_(j, i)] -= y
    for sh in f.shunts:
        i = [f.index_of(sh.bus_id, p) for p in sh.phases]
        Y[np.ix_(i, i)] += sh.Y
    # symmetrize away rounding from the inverse of a symmetric Z
    Y = 0.5 * (Y + Y.T)
    Y.setflags(write=False)
    return BusAdmittance(Y=Y, node_phases=f.node_phases, block_index=_block_index(f.node_phases))


def _set_service(f: FeederModel, line_id: str, state: bool) -> FeederModel:
    try:
        ln = f.line(line_id)
    except KeyError:
        raise InvalidArgumentError(f"unknown line {line_id!r}") from None
    if ln.in_service == state:
        raise InvalidArgumentError(
            f"line {line_id!r} is already {'in service' if state else 'tripped'}"
        )
    new = dataclasses.replace(ln, in_service=state)
    lines = tuple(new if x.line_id == line_id else x for x in f.lines)
    return dataclasses.replace(f, lines=lines)


def apply_line_trip(f: FeederModel, line_id: str) -> FeederModel:
    return _set_service(f, line_id, False)


def restore_line(f: FeederModel, line_id: str) -> FeederModel:
    """Put a tripped line back in service (the inverse of :func:`apply_line_trip`)."""
    return _set_service(f, line_id, True)


def set_shunt(f: FeederModel, bus_id: str, phases, Y) -> FeederModel:
    """Replace (or add) the shunt element at ``bus_id``; a zero ``Y`` removes it."""
    phases = tuple(phases)
    kept = tuple(s for s in f.shunts if s.bus_id != bus_id)
    Y = np.asarray(Y, dtype=np.complex128)
    if np.any(Y != 0):
        kept = kept + (Shunt(bus_id, phases, Y),)
    return dataclasses.replace(f, shunts=kept)


# --------------------------------------------------------------------- text I/O


def format_complex(z: complex) -> str:
    z = complex(z)
    re, im = repr(float(z.real)), repr(float(z.imag))
    return f"{re}{'' if im.startswith('-') else '+'}{im}j"


def format_matrix(M: np.ndarray) -> str:
    return ";".join(",".join(format_complex(v) for v in row) for row in np.asarray(M))


def _parse_complex(tok: str, line_no: int, col: int) -> complex:
    try:
        return complex(tok.replace(" ", ""))
    except ValueError:
        raise ParseError(f"bad complex number {tok!r}", line_no, col, tok) from None


def _parse_matrix(text: str, line_no: int, col: int) -> np.ndarray:
    rows = []
    for row in text.split(";"):
        rows.append([_parse_complex(t, line_no, col) for t in row.split(",")])
    width = {len(r) for r in rows}
    if len(width) != 1 or len(rows) != width.pop():
        raise ParseError(f"matrix {text!r} is not square", line_no, col, text)
    return np.array(rows, dtype=np.complex128)


def _parse_phases(tok: str, line_no: int, col: int) -> tuple[str, ...]:
    if not tok or any(ch not in PHASES for ch in tok) or len(set(tok)) != len(tok) or list(
        tok
    ) != sorted(tok):
        raise ParseError(f"malformed phase token {tok!r}", line_no, col, tok)
    return tuple(tok)


def _tokens(line: str):
    """Split on whitespace, returning (token, 1-based column)."""
    out = []
    i = 0
    while i < len(line):
        if line[i].isspace():
            i += 1
            continue
        j = i
        while j < len(line) and not line[j].isspace():
            j += 1
        out.append((line[i:j], i + 1))
        i = j
    return out


def load_feeder(text: str) -> FeederModel:
    header = {}
    section = None
    buses, lines, shunts = [], [], []
    bus_seen: dict[str, int] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.strip()
        if stripped.startswith("["):
            name = stripped.strip("[]").upper()
            if name not in ("BUS", "LINE", "SHUNT"):
                raise ParseError(f"unknown section {stripped!r}", line_no, 1, stripped)
            section = name
            continue
        toks = _tokens(line)
        if section is None:
            if "=" not in line:
                raise ParseError("expected key = value header", line_no, 1)
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in ("name", "base_voltage", "base_power", "slack"):
                raise ParseError(f"unknown header key {key!r}", line_no, 1, key)
            header[key] = (val, line_no)
            continue
        try:
            if section == "BUS":
                if len(toks) != 2:
                    raise ParseError("bus record needs: bus_id phases", line_no, 1)
                (bid, _), (ph, pc) = toks
                if bid in bus_seen:
                    raise ParseError(
                        f"duplicate bus id {bid!r} (first defined on line {bus_seen[bid]})",
                        line_no, 1, bid,
                    )
                bus_seen[bid] = line_no
                buses.append(Bus(bid, _parse_phases(ph, line_no, pc)))
            elif section == "LINE":
                if len(toks) < 7:
                    raise ParseError(
                        "line record needs: id from to phases status kind Z=...", line_no, 1
                    )
                (lid, _), (fb, _), (tb, _), (ph, pc), (st, sc), (kind, kc) = toks[:6]
                phases = _parse_phases(ph, line_no, pc)
                if st not in ("in", "out"):
                    raise ParseError(f"status must be 'in' or 'out', got {st!r}", line_no, sc, st)
                if kind not in LINE_KINDS:
                    raise ParseError(f"unknown line kind {kind!r}", line_no, kc, kind)
                mats = {}
                for tok, col in toks[6:]:
                    key, _, val = tok.partition("=")
                    if key not in ("Z", "Ys") or not val:
                        raise ParseError(f"unexpected field {tok!r}", line_no, col, tok)
                    mats[key] = _parse_matrix(val, line_no, col + len(key) + 1)
                if "Z" not in mats:
                    raise ParseError("line record is missing Z=", line_no, 1)
                lines.append(
                    LineSegment(lid, fb, tb, phases, mats["Z"], mats.get("Ys"), st == "in", kind)
                )
            elif section == "SHUNT":
                if len(toks) != 3 or not toks[2][0].startswith("Y="):
                    raise ParseError("shunt record needs: bus_id phases Y=...", line_no, 1)
                (bid, _), (ph, pc), (ytok, yc) = toks
                shunts.append(
                    Shunt(bid, _parse_phases(ph, line_no, pc), _parse_matrix(ytok[2:], line_no, yc + 2))
                )
        except ModelError as exc:
            raise ParseError(str(exc), line_no, 1) from None
    if "slack" not in header:
        raise ParseError("missing 'slack' header")

    def num(key, default):
        if key not in header:
            return default
        val, ln_ = header[key]
        try:
            return float(val)
        except ValueError:
            raise ParseError(f"{key} must be a number, got {val!r}", ln_, 1, val) from None

    try:
        return FeederModel(
            buses=tuple(buses),
            lines=tuple(lines),
            slack_bus=header["slack"][0],
            base_voltage=num("base_voltage", FeederModel.base_voltage),
            base_power=num("base_power", FeederModel.base_power),
            shunts=tuple(shunts),
            name=header.get("name", ("feeder", 0))[0],
        )
    except ModelError as exc:
        raise ParseError(str(exc)) from None


def save_feeder(f: FeederModel) -> str:
    out = [
        f"name = {f.name}",
        f"base_voltage = {f.base_voltage!r}",
        f"base_power = {f.base_power!r}",
        f"slack = {f.slack_bus}",
        "",
        "[BUS]",
    ]
    out += [f"{b.bus_id} {''.join(b.phases)}" for b in f.buses]
    out += ["", "[LINE]"]
    for ln in f.lines:
        rec = (
            f"{ln.line_id} {ln.from_bus} {ln.to_bus} {''.join(ln.phases)} "
            f"{'in' if ln.in_service else 'out'} {ln.kind} Z={format_matrix(ln.Z)}"
        )
        if np.any(ln.Ys != 0):
            rec += f" Ys={format_matrix(ln.Ys)}"
        out.append(rec)
    if f.shunts:
        out += ["", "[SHUNT]"]
        out += [f"{s.bus_id} {''.join(s.phases)} Y={format_matrix(s.Y)}" for s in f.shunts]
    return "\n".join(out) + "\n"


def read_feeder(path) -> FeederModel:
    with open(path, encoding="utf-8") as fh:
        return load_feeder(fh.read())


def builtin_text(name: str) -> str:
    return resources.files("gridsleuth.data").joinpath(name).read_text(encoding="utf-8")


def ieee13() -> FeederModel:
    """The shipped 13-bus-style fixture (38 node/phase pairs, slack at bus 650)."""
    return load_feeder(builtin_text("ieee13.feeder"))


FIXTURE_TRIP_LINE = "L684_611"

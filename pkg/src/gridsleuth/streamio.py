"""Phasor stream files: long-form CSV and a compact binary replay format.

Binary layout (all little-endian)
---------------------------------
Header::

    magic      4 bytes   b"GSPH"
    version    u16       1
    flags      u16       0 (reserved)
    D          u32       node/phase count
    cfg_hash   32 bytes  SHA-256 of the scenario config (zeros if none)
    labels     D times:  u16 byte length, UTF-8 "bus.phase"

Then one record per slot::

    slot       i64
    V          D x complex128 (re, im float64 pairs)
    I          D x complex128

CSV layout: a ``# config_hash=<hex>`` line, a header row
``slot,node_phase,V_re,V_im,I_re,I_im`` and one row per slot and node/phase.
Floats are written with ``repr`` so a CSV round trip is exact.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Sequence, TextIO

import numpy as np

from .errors import StreamFormatError
from .simulator import PhasorSnapshot

MAGIC = b"GSPH"
VERSION = 1
CSV_COLUMNS = ("slot", "node_phase", "V_re", "V_im", "I_re", "I_im")
_HEAD = struct.Struct("<4sHHI32s")
_SLOT = struct.Struct("<q")


@dataclass(frozen=True)
class StreamHeader:
    labels: tuple[str, ...]
    config_hash: str = ""
    version: int = VERSION

    @property
    def D(self) -> int:
        return len(self.labels)


def _hash_bytes(config_hash: str) -> bytes:
    if not config_hash:
        return bytes(32)
    raw = bytes.fromhex(config_hash)
    if len(raw) != 32:
        raise ValueError("config hash must be a SHA-256 hex digest")
    return raw


def write_binary(fh: BinaryIO, labels: Sequence[str], snapshots: Iterable[PhasorSnapshot],
                 config_hash: str = "") -> int:
    """Write a replay file; returns the number of records written."""
    D = len(labels)
    fh.write(_HEAD.pack(MAGIC, VERSION, 0, D, _hash_bytes(config_hash)))
    for lab in labels:
        enc = lab.encode("utf-8")
        fh.write(struct.pack("<H", len(enc)) + enc)
    n = 0
    for s in snapshots:
        fh.write(_SLOT.pack(int(s.slot)))
        fh.write(np.ascontiguousarray(s.V, dtype="<c16").tobytes())
        fh.write(np.ascontiguousarray(s.I, dtype="<c16").tobytes())
        n += 1
    return n


def _read_exact(fh: BinaryIO, n: int, offset: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise StreamFormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}",
                                offset=offset + len(buf))
    return buf


def read_binary_header(fh: BinaryIO) -> tuple[StreamHeader, int]:
    """Parse the header; returns it with the byte offset of the first record."""
    raw = _read_exact(fh, _HEAD.size, 0, "header")
    magic, version, _flags, D, h = _HEAD.unpack(raw)
    if magic != MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise StreamFormatError(f"unsupported stream version {version}", offset=4)
    off = _HEAD.size
    labels = []
    for _ in range(D):
        (n,) = struct.unpack("<H", _read_exact(fh, 2, off, "label length"))
        off += 2
        labels.append(_read_exact(fh, n, off, "label").decode("utf-8"))
        off += n
    cfg = "" if h == bytes(32) else h.hex()
    return StreamHeader(tuple(labels), cfg, version), off


def iter_binary(fh: BinaryIO) -> tuple[StreamHeader, Iterator[PhasorSnapshot]]:
    """Header plus a lazy iterator over the records of a replay file."""
    header, off = read_binary_header(fh)
    D = header.D
    body = 16 * D

    def records():
        pos = off
        while True:
            head = fh.read(_SLOT.size)
            if not head:
                return
            if len(head) != _SLOT.size:
                raise StreamFormatError("truncated record header", offset=pos + len(head))
            (slot,) = _SLOT.unpack(head)
            V = np.frombuffer(_read_exact(fh, body, pos + 8, "record"), dtype="<c16")
            I = np.frombuffer(_read_exact(fh, body, pos + 8 + body, "record"), dtype="<c16")
            pos += 8 + 2 * body
            yield PhasorSnapshot(int(slot), V.astype(np.complex128), I.astype(np.complex128))

    return header, records()


def read_binary(fh: BinaryIO) -> tuple[StreamHeader, list[PhasorSnapshot]]:
    header, it = iter_binary(fh)
    return header, list(it)


def write_csv(fh: TextIO, labels: Sequence[str], snapshots: Iterable[PhasorSnapshot],
              config_hash: str = "") -> int:
    fh.write(f"# config_hash={config_hash}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    n = 0
    for s in snapshots:
        for lab, v, i in zip(labels, s.V, s.I):
            w.writerow([s.slot, lab, repr(float(v.real)), repr(float(v.imag)),
                        repr(float(i.real)), repr(float(i.imag))])
        n += 1
    return n


def read_csv(fh: TextIO) -> tuple[StreamHeader, list[PhasorSnapshot]]:
    first = fh.readline()
    if not first.startswith("# config_hash="):
        raise StreamFormatError("missing '# config_hash=' line", offset=0)
    cfg = first.strip()[len("# config_hash="):]
    r = csv.reader(fh)
    if tuple(next(r, ())) != CSV_COLUMNS:
        raise StreamFormatError("unexpected CSV columns")
    labels: list[str] = []
    slots: dict[int, list] = {}
    order: list[int] = []
    for row in r:
        if len(row) != 6:
            raise StreamFormatError(f"CSV row has {len(row)} fields, expected 6")
        k = int(row[0])
        if k not in slots:
            slots[k] = []
            order.append(k)
        if len(order) == 1:
            labels.append(row[1])
        slots[k].append((complex(float(row[2]), float(row[3])),
                         complex(float(row[4]), float(row[5]))))
    snaps = []
    for k in order:
        vals = slots[k]
        if len(vals) != len(labels):
            raise StreamFormatError(f"slot {k} has {len(vals)} rows, expected {len(labels)}")
        snaps.append(PhasorSnapshot(k, np.array([v for v, _ in vals]), np.array([i for _, i in vals])))
    return StreamHeader(tuple(labels), cfg), snaps

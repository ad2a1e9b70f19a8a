"""
Event-log and DIMM-spec ingestion.

The event log is line-delimited JSON, one record per line::

    {"ts": 1640995260, "dimm": "D1", "type": "CE", "socket": 0, "channel": 1,
     "slot": 0, "rank": 0, "device": 3, "bankgroup": 1, "bank": 2,
     "row": 4711, "col": 17, "bitmap": "0x00000001"}
    {"ts": 1641081600, "dimm": "D1", "type": "UE"}

Bitmaps are hex strings of ``W * 8`` bits where bit ``i = beat * W + dq``
(beat-major, LSB is bit 0). A ``{"type": "META", ...}`` record carries
provenance (seed, config hash) and is returned separately.

The spec table is CSV with header
``dimm_id,manufacturer,capacity_gb,width,freq_mhz,process,server_age_days``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

log = logging.getLogger(__name__)

BEATS = 8
ADDRESS_FIELDS = ("socket", "channel", "slot", "rank", "device", "bankgroup", "bank", "row", "col")
SPEC_COLUMNS = ("dimm_id", "manufacturer", "capacity_gb", "width", "freq_mhz", "process", "server_age_days")
MANUFACTURERS = ("A", "B", "C", "D", "other")
PROCESSES = ("p20nm", "other")
WIDTHS = {"x4": 4, "x8": 8}


class ParseError(ValueError):
    """Raised for fatal input problems (unreadable stream, bad spec table)."""


@dataclass(frozen=True)
class Geometry:
    """Address bounds used to validate parsed events."""

    ranks: int = 2
    devices: int = 18
    bank_groups: int = 4
    banks: int = 4
    rows: int = 1 << 17
    columns: int = 1 << 10

    def check(self, addr: MemoryAddress) -> str | None:
        for name, value, bound in (
            ("rank", addr.rank, self.ranks),
            ("device", addr.device, self.devices),
            ("bankgroup", addr.bank_group, self.bank_groups),
            ("bank", addr.bank, self.banks),
            ("row", addr.row, self.rows),
            ("col", addr.column, self.columns),
        ):
            if value >= bound:
                return f"{name}={value} outside geometry bound {bound}"
        return None


@dataclass(frozen=True, order=True)
class MemoryAddress:
    socket: int
    channel: int
    slot: int
    rank: int
    device: int
    bank_group: int
    bank: int
    row: int
    column: int

    def __post_init__(self) -> None:
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise ValueError(f"negative address field {name}")


@dataclass(frozen=True)
class ErrorBitmap:
    """W x 8 grid of erroneous bits packed into an int (bit ``beat * W + dq``)."""

    dq_width: int
    bits: int

    def __post_init__(self) -> None:
        if self.dq_width not in (4, 8):
            raise ValueError(f"unsupported dq width {self.dq_width}")
        if self.bits <= 0:
            raise ValueError("error bitmap must have at least one set bit")
        if self.bits >> (self.dq_width * BEATS):
            raise ValueError(f"bitmap has bits beyond {self.dq_width}x{BEATS} grid")

    @classmethod
    def from_cells(cls, dq_width: int, cells: Iterable[tuple[int, int]]) -> ErrorBitmap:
        bits = 0
        for dq, beat in cells:
            if not (0 <= dq < dq_width and 0 <= beat < BEATS):
                raise ValueError(f"cell ({dq}, {beat}) outside {dq_width}x{BEATS} grid")
            bits |= 1 << (beat * dq_width + dq)
        return cls(dq_width, bits)

    @classmethod
    def from_hex(cls, text: str, dq_width: int) -> ErrorBitmap:
        digits = text[2:] if text[:2].lower() == "0x" else text
        if len(digits) != dq_width * BEATS // 4:
            raise ValueError(f"bitmap {text!r} has wrong length for x{dq_width}")
        return cls(dq_width, int(digits, 16))

    def to_hex(self) -> str:
        return "0x" + format(self.bits, f"0{self.dq_width * BEATS // 4}x")

    def is_set(self, dq: int, beat: int) -> bool:
        return bool(self.bits >> (beat * self.dq_width + dq) & 1)

    def cells(self) -> list[tuple[int, int]]:
        """Set cells as (dq, beat) in bit-index order."""
        w = self.dq_width
        out = []
        bits = self.bits
        while bits:
            low = bits & -bits
            i = low.bit_length() - 1
            out.append((i % w, i // w))
            bits ^= low
        return out

    def popcount(self) -> int:
        return bin(self.bits).count("1")


@dataclass(frozen=True)
class CEEvent:
    ts: int
    dimm_id: str
    address: MemoryAddress | None
    bitmap: ErrorBitmap | None = None

    def __post_init__(self) -> None:
        if self.ts <= 0:
            raise ValueError("timestamp must be positive")
        if not self.dimm_id:
            raise ValueError("dimm_id must be non-empty")


@dataclass(frozen=True)
class UEEvent:
    ts: int
    dimm_id: str

    def __post_init__(self) -> None:
        if self.ts <= 0:
            raise ValueError("timestamp must be positive")
        if not self.dimm_id:
            raise ValueError("dimm_id must be non-empty")


@dataclass(frozen=True)
class DimmSpec:
    dimm_id: str
    manufacturer: str
    capacity_gb: int
    data_width: str
    frequency_mhz: int
    process_class: str
    server_age_days: int

    @property
    def dq_width(self) -> int:
        return WIDTHS[self.data_width]


@dataclass
class ParseResult:
    ces: list[CEEvent]
    ues: list[UEEvent]
    warnings: list[str]
    accepted: int = 0
    dropped: int = 0
    meta: dict = field(default_factory=dict)

    def __iter__(self) -> Iterator:
        # allows ``ces, ues, warnings = parse_events(...)``
        return iter((self.ces, self.ues, self.warnings))


def _int_field(rec: dict, name: str) -> int:
    value = rec[name]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"field {name!r} must be an integer")
    return value


def _read_text(stream: IO | bytes | str) -> str:
    if isinstance(stream, bytes):
        return stream.decode("utf-8")
    if isinstance(stream, str):
        return stream
    try:
        data = stream.read()
    except (OSError, ValueError) as exc:
        raise ParseError(f"unreadable stream: {exc}") from exc
    return data.decode("utf-8") if isinstance(data, bytes) else data


def parse_events(
    stream: IO | bytes | str,
    widths: dict[str, int] | None = None,
    geometry: Geometry | None = None,
) -> ParseResult:
    """Parse an event log into CE and UE lists sorted by (dimm_id, ts).

    ``widths`` maps dimm_id to DQ width (from the spec table); DIMMs absent
    from it have their width inferred from the bitmap hex length. Malformed
    lines and exact duplicates become warnings.
    """
    try:
        text = _read_text(stream)
    except UnicodeDecodeError as exc:
        raise ParseError(f"unreadable stream: {exc}") from exc
    widths = widths or {}
    res = ParseResult([], [], [])
    seen: set = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
            kind = rec.get("type")
            if kind == "META":
                res.meta.update({k: v for k, v in rec.items() if k != "type"})
                continue
            ts = _int_field(rec, "ts")
            dimm = rec["dimm"]
            if not isinstance(dimm, str):
                raise ValueError("field 'dimm' must be a string")
            if kind == "UE":
                event = UEEvent(ts, dimm)
                key = ("UE", dimm, ts)
            elif kind == "CE":
                if all(f in rec for f in ADDRESS_FIELDS):
                    addr = MemoryAddress(*(_int_field(rec, f) for f in ADDRESS_FIELDS))
                    if geometry is not None and (msg := geometry.check(addr)):
                        raise ValueError(msg)
                elif any(f in rec for f in ADDRESS_FIELDS):
                    raise ValueError("partial address")
                else:
                    addr = None
                bitmap = None
                if rec.get("bitmap") is not None:
                    hx = rec["bitmap"]
                    w = widths.get(dimm)
                    if w is None:
                        n = len(hx) - 2 if hx[:2].lower() == "0x" else len(hx)
                        w = {8: 4, 16: 8}.get(n)
                        if w is None:
                            raise ValueError(f"bitmap {hx!r} has wrong length")
                    bitmap = ErrorBitmap.from_hex(hx, w)
                event = CEEvent(ts, dimm, addr, bitmap)
                key = ("CE", dimm, ts, addr, bitmap)
            else:
                raise ValueError(f"unknown record type {kind!r}")
        except (ValueError, KeyError, TypeError) as exc:
            res.warnings.append(f"line {lineno}: {exc}")
            res.dropped += 1
            continue
        if key in seen:
            res.warnings.append(f"line {lineno}: duplicate {kind} event dropped")
            res.dropped += 1
            continue
        seen.add(key)
        res.accepted += 1
        (res.ues if kind == "UE" else res.ces).append(event)
    # sorted() is stable, so ties keep input order
    res.ces.sort(key=lambda e: (e.dimm_id, e.ts))
    res.ues.sort(key=lambda e: (e.dimm_id, e.ts))
    return res


def event_record(event: CEEvent | UEEvent) -> dict:
    if isinstance(event, UEEvent):
        return {"ts": event.ts, "dimm": event.dimm_id, "type": "UE"}
    rec: dict = {"ts": event.ts, "dimm": event.dimm_id, "type": "CE"}
    if event.address is not None:
        a = event.address
        rec.update(
            socket=a.socket, channel=a.channel, slot=a.slot, rank=a.rank, device=a.device,
            bankgroup=a.bank_group, bank=a.bank, row=a.row, col=a.column,
        )
    if event.bitmap is not None:
        rec["bitmap"] = event.bitmap.to_hex()
    return rec


def serialize_events(
    ces: Iterable[CEEvent], ues: Iterable[UEEvent] = (), meta: dict | None = None
) -> str:
    """Inverse of :func:`parse_events` (output is sorted by dimm, ts, CE before UE)."""
    events: list = [(e.dimm_id, e.ts, 0, i, e) for i, e in enumerate(ces)]
    events += [(e.dimm_id, e.ts, 1, i, e) for i, e in enumerate(ues)]
    events.sort(key=lambda x: x[:4])
    lines = []
    if meta:
        lines.append(json.dumps({"type": "META", **meta}, sort_keys=True))
    lines.extend(json.dumps(event_record(x[4]), separators=(",", ":")) for x in events)
    return "\n".join(lines) + ("\n" if lines else "")


def load_dimm_specs(stream: IO | bytes | str) -> dict[str, DimmSpec]:
    """Parse the DIMM spec table; any structural problem is fatal."""
    text = _read_text(stream)
    rows = [line for line in text.splitlines() if line.strip() and not line.startswith("#")]
    if not rows:
        return {}
    reader = csv.DictReader(io.StringIO("\n".join(rows)))
    missing = [c for c in SPEC_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ParseError(f"spec table missing columns: {', '.join(missing)}")
    specs: dict[str, DimmSpec] = {}
    for lineno, row in enumerate(reader, 2):
        if None in row.values() or None in row:
            raise ParseError(f"spec line {lineno}: wrong number of fields")
        dimm = row["dimm_id"]
        if not dimm:
            raise ParseError(f"spec line {lineno}: empty dimm_id")
        if dimm in specs:
            raise ParseError(f"spec line {lineno}: duplicate dimm_id {dimm!r}")
        if row["width"] not in WIDTHS:
            raise ParseError(f"spec line {lineno}: unknown width token {row['width']!r}")
        manufacturer = row["manufacturer"] if row["manufacturer"] in MANUFACTURERS else "other"
        process = row["process"] if row["process"] in PROCESSES else "other"
        try:
            spec = DimmSpec(
                dimm, manufacturer, int(row["capacity_gb"]), row["width"],
                int(row["freq_mhz"]), process, int(row["server_age_days"]),
            )
        except ValueError as exc:
            raise ParseError(f"spec line {lineno}: {exc}") from exc
        if spec.server_age_days < 0:
            raise ParseError(f"spec line {lineno}: negative server age")
        specs[dimm] = spec
    return specs


def dump_dimm_specs(specs: Iterable[DimmSpec], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SPEC_COLUMNS)
    for s in specs:
        writer.writerow([
            s.dimm_id, s.manufacturer, s.capacity_gb, s.data_width,
            s.frequency_mhz, s.process_class, s.server_age_days,
        ])
    return buf.getvalue()


def check_widths(ces: Iterable[CEEvent], specs: dict[str, DimmSpec]) -> list[str]:
    """Report CEs whose bitmap width disagrees with the DIMM's data width."""
    problems = []
    for e in ces:
        spec = specs.get(e.dimm_id)
        if spec is not None and e.bitmap is not None and e.bitmap.dq_width != spec.dq_width:
            problems.append(f"{e.dimm_id}@{e.ts}: x{e.bitmap.dq_width} bitmap on {spec.data_width} DIMM")
    return problems


def group_by_dimm(events: Iterable) -> dict[str, list]:
    out: dict[str, list] = {}
    for e in events:
        out.setdefault(e.dimm_id, []).append(e)
    return out

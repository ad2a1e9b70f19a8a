"""
Micro-level component fault detection from CE address history.

Levels and default thresholds (x = threshold):

* cell: one cell with >= x CEs (x = 2)
* row: one row with CEs in >= x distinct columns (x = 2)
* column: one column with CEs in >= x distinct rows (x = 2)
* bank: a bank holding > x row faults and > x column faults (x = 3)
* device: a device holding > x bank faults (x = 2)
* rank: a rank holding >= x device faults (x = 2)

Coordinates are DIMM-local: ``(rank, device, bank_group, bank, row, column)``.
"""

from __future__ import annotations

import bisect
import operator
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .ingest import CEEvent

LEVELS = ("cell", "row", "column", "bank", "device", "rank")
_OPS = {">=": operator.ge, ">": operator.gt}
DEFAULT_COMPARATORS = {"cell": ">=", "row": ">=", "column": ">=", "bank": ">", "device": ">", "rank": ">="}


@dataclass(frozen=True)
class FaultThresholds:
    cell: int = 2
    row: int = 2
    column: int = 2
    bank: int = 3
    device: int = 2
    rank: int = 2
    comparators: dict = field(default_factory=lambda: dict(DEFAULT_COMPARATORS), hash=False)

    def __post_init__(self) -> None:
        for level in LEVELS:
            if getattr(self, level) < 1:
                raise ValueError(f"threshold for {level} must be >= 1")
        for level, op in self.comparators.items():
            if level not in LEVELS or op not in _OPS:
                raise ValueError(f"bad comparator {level}: {op!r}")

    def reached(self, level: str, count: int) -> bool:
        return _OPS[self.comparators.get(level, DEFAULT_COMPARATORS[level])](count, getattr(self, level))


@dataclass(frozen=True)
class FaultReport:
    # cells: (rank, device, bg, bank, row, col); rows: (rank, device, bg, bank, row);
    # columns: (rank, device, bg, bank, col); banks: (rank, device, bg, bank);
    # devices: (rank, device); ranks: (rank,)
    cell_faults: frozenset = frozenset()
    row_faults: frozenset = frozenset()
    column_faults: frozenset = frozenset()
    bank_faults: frozenset = frozenset()
    device_faults: frozenset = frozenset()
    rank_faults: frozenset = frozenset()

    def counts(self) -> dict[str, int]:
        return {level: len(getattr(self, f"{level}_faults")) for level in LEVELS}

    def count_tuple(self) -> tuple[int, ...]:
        return tuple(len(getattr(self, f"{level}_faults")) for level in LEVELS)


def _cell_key(e: CEEvent) -> tuple[int, ...]:
    a = e.address
    return (a.rank, a.device, a.bank_group, a.bank, a.row, a.column)


def classify_faults(
    ce_events: Sequence[CEEvent],
    thresholds: FaultThresholds = FaultThresholds(),
    t: int | None = None,
    window: int | None = None,
) -> FaultReport:
    """Detect faults among CEs with ts in ``(t - window, t]``.

    ``window=None`` means all history up to ``t``; ``t=None`` means no upper
    bound. Events without an address are skipped.
    """
    cells: Counter = Counter()
    for e in ce_events:
        if e.address is None:
            continue
        if t is not None and e.ts > t:
            continue
        if window is not None and t is not None and e.ts <= t - window:
            continue
        cells[_cell_key(e)] += 1
    return _report_from_cells(cells, thresholds)


def _report_from_cells(cells: Counter, th: FaultThresholds) -> FaultReport:
    row_cols: dict = defaultdict(set)
    col_rows: dict = defaultdict(set)
    for (rk, dev, bg, bk, row, col) in cells:
        row_cols[(rk, dev, bg, bk, row)].add(col)
        col_rows[(rk, dev, bg, bk, col)].add(row)
    cell_f = frozenset(c for c, n in cells.items() if th.reached("cell", n))
    row_f = frozenset(r for r, cs in row_cols.items() if th.reached("row", len(cs)))
    col_f = frozenset(c for c, rs in col_rows.items() if th.reached("column", len(rs)))
    bank_rows = Counter(r[:4] for r in row_f)
    bank_cols = Counter(c[:4] for c in col_f)
    bank_f = frozenset(
        b for b in bank_rows
        if th.reached("bank", bank_rows[b]) and th.reached("bank", bank_cols.get(b, 0))
    )
    dev_banks = Counter(b[:2] for b in bank_f)
    dev_f = frozenset(d for d, n in dev_banks.items() if th.reached("device", n))
    rank_devs = Counter(d[:1] for d in dev_f)
    rank_f = frozenset(r for r, n in rank_devs.items() if th.reached("rank", n))
    return FaultReport(cell_f, row_f, col_f, bank_f, dev_f, rank_f)


def exclusive_faults(report: FaultReport) -> dict[str, int]:
    """Per-level counts after dropping instances inside a faulted containing component.

    A cell is contained by its row, column, bank, device and rank; rows and
    columns by their bank, device and rank; and so on upward.
    """
    banks, devices, ranks = report.bank_faults, report.device_faults, report.rank_faults

    def above_bank(key: tuple) -> bool:
        return key[:4] in banks or key[:2] in devices or key[:1] in ranks

    cells = [
        c for c in report.cell_faults
        if c[:5] not in report.row_faults
        and (c[:4] + (c[5],)) not in report.column_faults
        and not above_bank(c)
    ]
    return {
        "cell": len(cells),
        "row": sum(not above_bank(r) for r in report.row_faults),
        "column": sum(not above_bank(c) for c in report.column_faults),
        "bank": sum(b[:2] not in devices and b[:1] not in ranks for b in banks),
        "device": sum(d[:1] not in ranks for d in devices),
        "rank": len(ranks),
    }


def highest_fault_level(report: FaultReport) -> str | None:
    for level in reversed(LEVELS):
        if getattr(report, f"{level}_faults"):
            return level
    return None


class FaultTracker:
    """Incremental equivalent of :func:`classify_faults` over a growing history.

    Every comparison is against a count that only grows, so promotions never
    need to be undone.
    """

    def __init__(self, thresholds: FaultThresholds = FaultThresholds()):
        self.th = thresholds
        self.cells: Counter = Counter()
        self.row_cols: dict = defaultdict(set)
        self.col_rows: dict = defaultdict(set)
        self.faults: dict[str, set] = {level: set() for level in LEVELS}
        self.bank_rows: Counter = Counter()
        self.bank_cols: Counter = Counter()
        self.dev_banks: Counter = Counter()
        self.rank_devs: Counter = Counter()

    def add(self, e: CEEvent) -> None:
        if e.address is None:
            return
        key = _cell_key(e)
        th, f = self.th, self.faults
        self.cells[key] += 1
        if key not in f["cell"] and th.reached("cell", self.cells[key]):
            f["cell"].add(key)
        rk, dev, bg, bk, row, col = key
        bank = (rk, dev, bg, bk)
        row_key, col_key = bank + (row,), bank + (col,)
        self.row_cols[row_key].add(col)
        self.col_rows[col_key].add(row)
        touched = False
        if row_key not in f["row"] and th.reached("row", len(self.row_cols[row_key])):
            f["row"].add(row_key)
            self.bank_rows[bank] += 1
            touched = True
        if col_key not in f["column"] and th.reached("column", len(self.col_rows[col_key])):
            f["column"].add(col_key)
            self.bank_cols[bank] += 1
            touched = True
        if touched and bank not in f["bank"] and th.reached("bank", self.bank_rows[bank]) \
                and th.reached("bank", self.bank_cols[bank]):
            f["bank"].add(bank)
            device = (rk, dev)
            self.dev_banks[device] += 1
            if device not in f["device"] and th.reached("device", self.dev_banks[device]):
                f["device"].add(device)
                self.rank_devs[(rk,)] += 1
                if (rk,) not in f["rank"] and th.reached("rank", self.rank_devs[(rk,)]):
                    f["rank"].add((rk,))

    def counts(self) -> tuple[int, ...]:
        return tuple(len(self.faults[level]) for level in LEVELS)

    def report(self) -> FaultReport:
        return FaultReport(*(frozenset(self.faults[level]) for level in LEVELS))


def fault_counts_at(
    ce_events: Sequence[CEEvent],
    times: Iterable[int],
    thresholds: FaultThresholds = FaultThresholds(),
    window: int | None = None,
) -> list[tuple[int, ...]]:
    """Raw fault counts at each of ``times`` (sorted events assumed)."""
    ts = [e.ts for e in ce_events]
    if window is not None:
        return [classify_faults(ce_events, thresholds, t, window).count_tuple() for t in times]
    tracker = FaultTracker(thresholds)
    prefix = [tracker.counts()]
    for e in ce_events:
        tracker.add(e)
        prefix.append(tracker.counts())
    return [prefix[bisect.bisect_right(ts, t)] for t in times]

import random
import time

import pytest
from hypothesis import given, settings, strategies as st

from memfail.faults import (
    FaultReport, FaultThresholds, FaultTracker, classify_faults, exclusive_faults, fault_counts_at,
    highest_fault_level,
)
from memfail.ingest import CEEvent, MemoryAddress
from memfail.synthgen import GeneratorConfig, generate


def ev(ts, rank=0, device=0, bg=0, bank=0, row=0, col=0):
    return CEEvent(ts, "D", MemoryAddress(0, 0, 0, rank, device, bg, bank, row, col), None)


def oracle(events, cell=2, row=2, column=2, bank=3, device=2, rank=2):
    """Brute-force grouping with the default comparator directions."""
    cells = {}
    for e in events:
        a = e.address
        if a is None:
            continue
        k = (a.rank, a.device, a.bank_group, a.bank, a.row, a.column)
        cells[k] = cells.get(k, 0) + 1
    cell_f = {k for k, n in cells.items() if n >= cell}
    row_f = set()
    for r in {k[:5] for k in cells}:
        if len({k[5] for k in cells if k[:5] == r}) >= row:
            row_f.add(r)
    col_f = set()
    for c in {k[:4] + (k[5],) for k in cells}:
        if len({k[4] for k in cells if k[:4] + (k[5],) == c}) >= column:
            col_f.add(c)
    bank_f = set()
    for b in {k[:4] for k in cells}:
        nr = sum(1 for r in row_f if r[:4] == b)
        nc = sum(1 for c in col_f if c[:4] == b)
        if nr > bank and nc > bank:
            bank_f.add(b)
    dev_f = {d for d in {k[:2] for k in cells} if sum(1 for b in bank_f if b[:2] == d) > device}
    rank_f = {r for r in {k[:1] for k in cells} if sum(1 for d in dev_f if d[:1] == r) >= rank}
    return tuple(map(frozenset, (cell_f, row_f, col_f, bank_f, dev_f, rank_f)))


def as_sets(rep: FaultReport):
    return (rep.cell_faults, rep.row_faults, rep.column_faults, rep.bank_faults, rep.device_faults, rep.rank_faults)


def test_repeated_cell_is_one_cell_fault():
    rep = classify_faults([ev(1, row=5, col=7), ev(2, row=5, col=7)])
    assert rep.count_tuple() == (1, 0, 0, 0, 0, 0)


def test_row_with_two_columns_is_row_fault_only():
    rep = classify_faults([ev(1, row=5, col=7), ev(2, row=5, col=8)])
    assert rep.count_tuple() == (0, 1, 0, 0, 0, 0)


def test_bank_fault_needs_more_than_three_rows_and_columns():
    grid = [ev(10 * (r * 4 + c) + 1, row=r, col=c) for r in range(4) for c in range(4)]
    rep = classify_faults(grid)
    assert rep.count_tuple()[:4] == (0, 4, 4, 1)
    three = [ev(10 * (r * 3 + c) + 1, row=r, col=c) for r in range(3) for c in range(3)]
    assert classify_faults(three).count_tuple()[3] == 0


def test_rank_fault():
    evs, ts = [], 1
    for device in (0, 1):
        for bank in range(3):
            for r in range(4):
                for c in range(4):
                    evs.append(ev(ts, device=device, bank=bank, row=r, col=c))
                    ts += 1
    rep = classify_faults(evs)
    assert rep.count_tuple() == (0, 24, 24, 6, 2, 1)
    assert highest_fault_level(rep) == "rank"
    assert exclusive_faults(rep) == {"cell": 0, "row": 0, "column": 0, "bank": 0, "device": 0, "rank": 1}


def test_window_and_missing_addresses():
    evs = [ev(1, col=1), ev(100, col=2), CEEvent(150, "D", None, None)]
    assert classify_faults(evs, t=200, window=150).count_tuple() == (0, 0, 0, 0, 0, 0)
    assert classify_faults(evs, t=200, window=200).row_faults
    assert classify_faults(evs, t=50).count_tuple() == (0, 0, 0, 0, 0, 0)


def test_comparators_configurable():
    th = FaultThresholds(cell=2, comparators={"cell": ">"})
    assert classify_faults([ev(1), ev(2)], th).count_tuple()[0] == 0
    assert classify_faults([ev(1), ev(2), ev(3)], th).count_tuple()[0] == 1
    with pytest.raises(ValueError):
        FaultThresholds(comparators={"cell": "=="})
    with pytest.raises(ValueError):
        FaultThresholds(row=0)


def dense_stream(rng, n):
    """Random CEs in a small coordinate space so every level is reachable."""
    out = []
    ts = 0
    for _ in range(n):
        ts += rng.randint(1, 100)
        out.append(ev(ts, rank=rng.randrange(2), device=rng.randrange(3), bg=0,
                      bank=rng.randrange(4), row=rng.randrange(5), col=rng.randrange(5)))
    return out


def test_matches_oracle_on_1000_dimms_all_families():
    rng = random.Random(17)
    fleet = generate(GeneratorConfig(n_dimms=500, duration_days=120, seed=21))
    by = {}
    for e in fleet.ces:
        by.setdefault(e.dimm_id, []).append(e)
    streams = list(by.values())[:500]
    streams += [dense_stream(rng, rng.choice((5, 40, 150, 400))) for _ in range(1000 - len(streams))]
    assert len(streams) == 1000
    seen = [0] * 6
    t0 = time.perf_counter()
    for evs in streams:
        rep = classify_faults(evs)
        assert as_sets(rep) == oracle(evs)
        seen = [s + bool(n) for s, n in zip(seen, rep.count_tuple())]
    assert all(seen), seen
    assert time.perf_counter() - t0 < 30


def test_synthgen_row_fault_is_one_row_fault():
    cfg = GeneratorConfig(n_dimms=40, duration_days=120, seed=4, extra_faults_mean=0.0,
                          fault_weights={"row": 1.0}, escalation_prob={}, missing_bitmap_prob=0.0,
                          storm_prob=0.0)
    fleet = generate(cfg)
    by = {}
    for e in fleet.ces:
        by.setdefault(e.dimm_id, []).append(e)
    checked = 0
    for evs in by.values():
        if len({e.address.column for e in evs}) >= 2:
            assert classify_faults(evs).count_tuple()[1] == 1
            checked += 1
    assert checked > 10


def brute_exclusive(rep: FaultReport) -> dict:
    def covered_above_bank(k):
        return any(b == k[:4] for b in rep.bank_faults) or any(d == k[:2] for d in rep.device_faults) \
            or any(r == k[:1] for r in rep.rank_faults)
    return {
        "cell": sum(1 for c in rep.cell_faults if c[:5] not in rep.row_faults
                    and c[:4] + (c[5],) not in rep.column_faults and not covered_above_bank(c)),
        "row": sum(1 for r in rep.row_faults if not covered_above_bank(r)),
        "column": sum(1 for c in rep.column_faults if not covered_above_bank(c)),
        "bank": sum(1 for b in rep.bank_faults if b[:2] not in rep.device_faults and b[:1] not in rep.rank_faults),
        "device": sum(1 for d in rep.device_faults if d[:1] not in rep.rank_faults),
        "rank": len(rep.rank_faults),
    }


def test_exclusive_only_cells_equals_raw():
    rep = classify_faults([ev(1), ev(2), ev(3, row=9, col=4), ev(4, row=9, col=4)])
    assert exclusive_faults(rep)["cell"] == rep.counts()["cell"] == 2


def test_exclusive_bank_subsumes_rows_and_columns():
    grid = [ev(10 * (r * 4 + c) + 1, row=r, col=c) for r in range(4) for c in range(4)]
    ex = exclusive_faults(classify_faults(grid))
    assert ex["row"] == 0 and ex["column"] == 0 and ex["bank"] == 1


@settings(max_examples=200)
@given(st.integers(0, 10**6))
def test_exclusive_matches_subsumption_oracle(seed):
    rng = random.Random(seed)
    rep = classify_faults(dense_stream(rng, rng.randint(0, 300)))
    assert exclusive_faults(rep) == brute_exclusive(rep)


@settings(max_examples=100)
@given(st.integers(0, 10**6))
def test_tracker_equals_batch(seed):
    rng = random.Random(seed)
    evs = dense_stream(rng, rng.randint(0, 200))
    tracker = FaultTracker()
    for k, e in enumerate(evs):
        tracker.add(e)
        if k % 17 == 0 or k == len(evs) - 1:
            assert tracker.report() == classify_faults(evs[:k + 1])
    times = [e.ts for e in evs][::7]
    assert fault_counts_at(evs, times) == [classify_faults(evs, t=t).count_tuple() for t in times]


@settings(max_examples=100)
@given(st.integers(0, 10**6))
def test_levels_monotone_in_history(seed):
    rng = random.Random(seed)
    evs = dense_stream(rng, 120)
    prev = (0,) * 6
    for k in range(0, len(evs), 10):
        cur = classify_faults(evs[:k + 1]).count_tuple()
        assert all(c >= p for c, p in zip(cur, prev))
        prev = cur

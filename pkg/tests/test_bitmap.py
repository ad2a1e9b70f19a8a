import random
import time

import pytest
from hypothesis import given, strategies as st

from memfail.bitmap import merge_bitmaps, spatial_features
from memfail.ingest import BEATS, ErrorBitmap


def naive_stats(bm: ErrorBitmap, adjacency: str = "4") -> tuple:
    w = bm.dq_width
    grid = [[bm.is_set(d, b) for b in range(BEATS)] for d in range(w)]
    cells = [(d, b) for d in range(w) for b in range(BEATS) if grid[d][b]]
    pairs = 0
    for d, b in cells:
        for d2, b2 in cells:
            if (d, b) >= (d2, b2):
                continue
            horiz = b == b2 and abs(d - d2) == 1
            vert = d == d2 and abs(b - b2) == 1
            if (adjacency == "4" and (horiz or vert)) or (adjacency == "horizontal" and horiz) \
                    or (adjacency == "vertical" and vert):
                pairs += 1
    dqs = sorted({d for d, _ in cells})
    beats = sorted({b for _, b in cells})
    return (len(cells), pairs, len(dqs), len(beats), dqs[-1] - dqs[0], beats[-1] - beats[0])


def test_singleton():
    s = spatial_features(ErrorBitmap.from_cells(4, [(2, 5)]))
    assert s.as_tuple() == (1, 0, 1, 1, 0, 0)


def test_horizontal_pair():
    s = spatial_features(ErrorBitmap.from_cells(4, [(0, 0), (1, 0)]))
    assert s.as_tuple() == (2, 1, 2, 1, 1, 0)


def test_full_grid_x4():
    s = spatial_features(ErrorBitmap(4, (1 << 32) - 1))
    assert s.as_tuple() == (32, 8 * 3 + 4 * 7, 4, 8, 3, 7)


def test_full_grid_x8():
    s = spatial_features(ErrorBitmap(8, (1 << 64) - 1))
    assert s.as_tuple() == (64, 8 * 7 + 8 * 7, 8, 8, 7, 7)


def test_no_wrap_between_last_dq_and_next_beat():
    # dq 3 beat 0 and dq 0 beat 1 are consecutive bit indices but not neighbours
    s = spatial_features(ErrorBitmap.from_cells(4, [(3, 0), (0, 1)]))
    assert s.adjacent_pairs == 0


def test_adjacency_modes():
    bm = ErrorBitmap.from_cells(4, [(0, 0), (1, 0), (0, 1)])
    assert spatial_features(bm, "4").adjacent_pairs == 2
    assert spatial_features(bm, "horizontal").adjacent_pairs == 1
    assert spatial_features(bm, "vertical").adjacent_pairs == 1
    with pytest.raises(ValueError):
        spatial_features(bm, "8")


def test_matches_naive_oracle_on_10k_bitmaps():
    rng = random.Random(1234)
    t0 = time.perf_counter()
    for _ in range(10_000):
        w = rng.choice((4, 8))
        # mix dense and sparse grids
        density = rng.choice((0.05, 0.2, 0.5, 0.9))
        bits = sum(1 << i for i in range(w * BEATS) if rng.random() < density) or 1 << rng.randrange(w * BEATS)
        bm = ErrorBitmap(w, bits)
        assert spatial_features(bm).as_tuple() == naive_stats(bm)
    assert time.perf_counter() - t0 < 5


any_bitmap = st.sampled_from([4, 8]).flatmap(
    lambda w: st.integers(1, (1 << (w * BEATS)) - 1).map(lambda b: ErrorBitmap(w, b)))


@given(any_bitmap, st.sampled_from(["4", "horizontal", "vertical"]))
def test_oracle_property(bm, mode):
    assert spatial_features(bm, mode).as_tuple() == naive_stats(bm, mode)


@given(any_bitmap)
def test_invariants(bm):
    s = spatial_features(bm)
    w = bm.dq_width
    assert 1 <= s.total_bits <= w * BEATS
    assert s.dq_count <= w and s.beat_count <= BEATS
    assert s.total_bits <= s.dq_count * s.beat_count
    assert s.dq_interval >= s.dq_count - 1 and s.beat_interval >= s.beat_count - 1
    assert s.adjacent_pairs <= BEATS * (w - 1) + w * (BEATS - 1)


def test_empty_bitmap_rejected():
    with pytest.raises(ValueError):
        ErrorBitmap(4, 0)


def test_merge_identity_and_disjoint():
    a = ErrorBitmap.from_cells(4, [(0, 0)])
    b = ErrorBitmap.from_cells(4, [(3, 7)])
    assert merge_bitmaps([a]) == a
    assert merge_bitmaps([a, b]).popcount() == 2


def test_merge_errors():
    with pytest.raises(ValueError):
        merge_bitmaps([])
    with pytest.raises(ValueError):
        merge_bitmaps([ErrorBitmap(4, 1), ErrorBitmap(8, 1)])


@given(st.sampled_from([4, 8]).flatmap(lambda w: st.lists(
    st.lists(st.tuples(st.integers(0, w - 1), st.integers(0, BEATS - 1)), min_size=1, max_size=10),
    min_size=1, max_size=6).map(lambda cs: (w, cs))))
def test_merge_popcount_is_union_size(arg):
    w, cellsets = arg
    merged = merge_bitmaps([ErrorBitmap.from_cells(w, cs) for cs in cellsets])
    union = set().union(*map(set, cellsets))
    assert merged.popcount() == len(union)
    assert set(merged.cells()) == union

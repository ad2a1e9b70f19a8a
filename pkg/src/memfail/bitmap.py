"""Spatial statistics of a single DQ x beat error bitmap."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache, reduce
from typing import Sequence

from .ingest import BEATS, ErrorBitmap

ADJACENCY_MODES = ("4", "horizontal", "vertical")


@dataclass(frozen=True)
class SpatialBitStats:
    total_bits: int
    adjacent_pairs: int
    dq_count: int
    beat_count: int
    dq_interval: int
    beat_interval: int

    FIELDS = ("total_bits", "adjacent_pairs", "dq_count", "beat_count", "dq_interval", "beat_interval")

    def as_tuple(self) -> tuple[int, ...]:
        return (
            self.total_bits, self.adjacent_pairs, self.dq_count,
            self.beat_count, self.dq_interval, self.beat_interval,
        )


def _lane_masks(w: int) -> tuple[list[int], list[int]]:
    dq_masks = [sum(1 << (b * w + d) for b in range(BEATS)) for d in range(w)]
    beat_masks = [((1 << w) - 1) << (b * w) for b in range(BEATS)]
    return dq_masks, beat_masks


_MASKS = {w: _lane_masks(w) for w in (4, 8)}


@lru_cache(maxsize=1 << 16)
def _stats(w: int, bits: int, adjacency: str) -> SpatialBitStats:
    dq_masks, beat_masks = _MASKS[w]
    dqs = [d for d, m in enumerate(dq_masks) if bits & m]
    beats = [b for b, m in enumerate(beat_masks) if bits & m]
    pairs = 0
    if adjacency in ("4", "horizontal"):
        # same beat, neighbouring DQ: shift by one DQ, excluding the DQ w-1 -> beat wrap
        no_last_dq = bits & ~dq_masks[w - 1]
        pairs += bin(no_last_dq & (bits >> 1)).count("1")
    if adjacency in ("4", "vertical"):
        pairs += bin(bits & (bits >> w)).count("1")
    return SpatialBitStats(
        total_bits=bin(bits).count("1"),
        adjacent_pairs=pairs,
        dq_count=len(dqs),
        beat_count=len(beats),
        dq_interval=dqs[-1] - dqs[0],
        beat_interval=beats[-1] - beats[0],
    )


def spatial_features(bitmap: ErrorBitmap, adjacency: str = "4") -> SpatialBitStats:
    """Per-event error-bit statistics.

    ``adjacency`` selects which set-bit pairs count as adjacent: ``"4"``
    (same beat and neighbouring DQ, or same DQ and neighbouring beat),
    ``"horizontal"`` (DQ neighbours only) or ``"vertical"`` (beat neighbours only).
    Intervals are max index minus min index over erroneous lanes.
    """
    if adjacency not in ADJACENCY_MODES:
        raise ValueError(f"unknown adjacency mode {adjacency!r}")
    if bitmap.bits <= 0:
        raise ValueError("spatial features undefined for an empty bitmap")
    return _stats(bitmap.dq_width, bitmap.bits, adjacency)


def merge_bitmaps(bitmaps: Sequence[ErrorBitmap]) -> ErrorBitmap:
    """Cellwise OR of bitmaps sharing one DQ width."""
    if not bitmaps:
        raise ValueError("merge_bitmaps needs at least one bitmap")
    widths = {b.dq_width for b in bitmaps}
    if len(widths) != 1:
        raise ValueError(f"cannot merge bitmaps of mixed widths {sorted(widths)}")
    return ErrorBitmap(widths.pop(), reduce(lambda a, b: a | b.bits, bitmaps, 0))

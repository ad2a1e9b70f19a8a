"""
Risky error-bit pattern rules and the R1/R2/R3 temporal indicators.

A rule is a conjunction of atomic conditions on a single CE bitmap. The
default set stands in for the undisclosed vendor catalogue:

* ``RULE_A``: set bits in both beat halves (0-3 and 4-7), i.e. not bounded
  within half of the bitmap
* ``RULE_B``: at least three erroneous DQs
* ``RULE_C``: at least two adjacent pairs spread over at least two beats

Rule files are line-delimited JSON, e.g.
``{"rule_id": "RULE_A", "spans_beat_halves": true}``.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from functools import lru_cache
from typing import IO, Iterable, Sequence

from .bitmap import spatial_features
from .ingest import BEATS, CEEvent, ErrorBitmap

DAY = 86400
CONDITIONS = (
    "min_error_dqs", "min_error_beats", "min_adjacent_pairs",
    "spans_beat_halves", "spans_dq_halves", "mask_match",
)


@dataclass(frozen=True)
class RiskyPatternRule:
    rule_id: str
    min_error_dqs: int | None = None
    min_error_beats: int | None = None
    min_adjacent_pairs: int | None = None
    spans_beat_halves: bool | None = None
    spans_dq_halves: bool | None = None
    # (dq_width, bits); matches when every masked bit is set
    mask_match: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if not self.rule_id:
            raise ValueError("rule_id must be non-empty")
        if all(getattr(self, c) is None for c in CONDITIONS):
            raise ValueError(f"rule {self.rule_id!r} has no conditions")

    def matches(self, bitmap: ErrorBitmap) -> bool:
        st = spatial_features(bitmap)
        if self.min_error_dqs is not None and st.dq_count < self.min_error_dqs:
            return False
        if self.min_error_beats is not None and st.beat_count < self.min_error_beats:
            return False
        if self.min_adjacent_pairs is not None and st.adjacent_pairs < self.min_adjacent_pairs:
            return False
        if self.spans_beat_halves is not None and spans_beat_halves(bitmap) != self.spans_beat_halves:
            return False
        if self.spans_dq_halves is not None and spans_dq_halves(bitmap) != self.spans_dq_halves:
            return False
        if self.mask_match is not None:
            w, mask = self.mask_match
            if w != bitmap.dq_width or bitmap.bits & mask != mask:
                return False
        return True


DEFAULT_RULES: tuple[RiskyPatternRule, ...] = (
    RiskyPatternRule("RULE_A", spans_beat_halves=True),
    RiskyPatternRule("RULE_B", min_error_dqs=3),
    RiskyPatternRule("RULE_C", min_adjacent_pairs=2, min_error_beats=2),
)


def spans_beat_halves(bitmap: ErrorBitmap) -> bool:
    half = BEATS // 2 * bitmap.dq_width
    low = (1 << half) - 1
    return bool(bitmap.bits & low) and bool(bitmap.bits >> half)


def spans_dq_halves(bitmap: ErrorBitmap) -> bool:
    w = bitmap.dq_width
    low_lanes = sum(((1 << (w // 2)) - 1) << (b * w) for b in range(BEATS))
    return bool(bitmap.bits & low_lanes) and bool(bitmap.bits & ~low_lanes)


def validate_rules(rules: Sequence[RiskyPatternRule]) -> None:
    ids = [r.rule_id for r in rules]
    if len(set(ids)) != len(ids):
        raise ValueError("rule ids must be unique within a rule set")


def load_rules(stream: IO | str) -> tuple[RiskyPatternRule, ...]:
    text = stream if isinstance(stream, str) else stream.read()
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        unknown = set(rec) - {"rule_id", *CONDITIONS}
        if unknown:
            raise ValueError(f"rule line {lineno}: unknown keys {sorted(unknown)}")
        if rec.get("mask_match") is not None:
            w, hx = rec["mask_match"]
            rec["mask_match"] = (int(w), int(hx, 16))
        rules.append(RiskyPatternRule(**rec))
    validate_rules(rules)
    return tuple(rules)


def dump_rules(rules: Iterable[RiskyPatternRule]) -> str:
    lines = []
    for r in rules:
        rec: dict = {"rule_id": r.rule_id}
        for c in CONDITIONS:
            v = getattr(r, c)
            if v is not None:
                rec[c] = [v[0], hex(v[1])] if c == "mask_match" else v
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


@lru_cache(maxsize=1 << 16)
def _match_cached(bitmap: ErrorBitmap, rules: tuple[RiskyPatternRule, ...]) -> frozenset[str]:
    return frozenset(r.rule_id for r in rules if r.matches(bitmap))


def match_rules(bitmap: ErrorBitmap, rules: Iterable[RiskyPatternRule] = DEFAULT_RULES) -> frozenset[str]:
    """Ids of every rule whose conditions all hold for ``bitmap``."""
    return _match_cached(bitmap, tuple(rules))


@dataclass(frozen=True)
class IndicatorSnapshot:
    r1_risky_ce_cnt: int
    r2_risky_pattern_cnt: int
    r3_max_risky_pattern_cnt: int
    window_end: int


def windowed_indicators(
    ce_events: Sequence[CEEvent],
    rules: Iterable[RiskyPatternRule] = DEFAULT_RULES,
    t: int | None = None,
    window: int = DAY,
) -> IndicatorSnapshot:
    """R1/R2/R3 over CEs with ``ts`` in ``(t - window, t]``.

    R1 counts CEs matching at least one rule, R2 sums the number of matched
    rules over CEs, and R3 is the largest matched-rule count of a single CE.
    Events must be sorted by ts; bitmap-less events never match.
    """
    rules = tuple(rules)
    if t is None:
        t = ce_events[-1].ts if ce_events else 0
    times = [e.ts for e in ce_events]
    lo = bisect.bisect_right(times, t - window)
    hi = bisect.bisect_right(times, t)
    r1 = r2 = r3 = 0
    for e in ce_events[lo:hi]:
        if e.bitmap is None:
            continue
        n = len(match_rules(e.bitmap, rules))
        if n:
            r1 += 1
            r2 += n
            r3 = max(r3, n)
    return IndicatorSnapshot(r1, r2, r3, t)

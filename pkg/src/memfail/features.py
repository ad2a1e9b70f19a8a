"""
Per-sample feature vectors, labeling, oversampling and feature ranking.

Features fall in six groups (column order is fixed, see ``FEATURE_NAMES``):

* static: server age, manufacturer, data width, frequency, process, capacity
* CE rate: CE counts over 1 h / 6 h / 24 h / the observation window, and time
  since the first and last CE inside the observation window
* DQ-beat error bits: sum/max/min/avg/std of each per-event bitmap statistic
  over the aggregation window, plus union DQ and beat counts of the merged
  window bitmap
* error-bit patterns: R1, R2, R3
* fault counts: raw cell/row/column/bank/device/rank fault counts
* memory events: CE storm in the observation window, CE overflow, storm suppressed

Fault counts, CE overflow and storm suppression accumulate over all history
up to ``t`` by default (``WindowConfig.fault_window``); everything else is
restricted to the observation window or a shorter window ending at ``t``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Sequence

import numpy as np

from .bitmap import SpatialBitStats, spatial_features
from .faults import FaultThresholds, FaultTracker, classify_faults
from .ingest import CEEvent, DimmSpec, UEEvent, group_by_dimm
from .risk import DEFAULT_RULES, RiskyPatternRule, match_rules

MINUTE, HOUR, DAY = 60, 3600, 86400
LIFETIME = math.inf

MANUFACTURER_CODE = {"A": 0, "B": 1, "C": 2, "D": 3, "other": 4}
PROCESS_CODE = {"p20nm": 0, "other": 1}
WIDTH_CODE = {"x4": 4, "x8": 8}

STATIC_FEATURES = ["server_age_days", "manufacturer", "data_width", "frequency_mhz", "process", "capacity_gb"]
CE_RATE_FEATURES = ["ce_cnt_1h", "ce_cnt_6h", "ce_cnt_24h", "ce_cnt_obs", "time_since_first_ce", "time_since_last_ce"]
AGG_STATS = ("sum", "max", "min", "avg", "std")
BIT_ALIASES = {
    ("adjacent_pairs", "max"): "Max_adjacent_bits_24h",
    ("dq_interval", "min"): "Min_DQ_interval",
    ("beat_interval", "max"): "Max_beat_interval",
}
BIT_FEATURES = [
    BIT_ALIASES.get((m, s), f"{m}_{s}_24h") for m in SpatialBitStats.FIELDS for s in AGG_STATS
] + ["Error_DQ_counts_24h", "Error_beat_Cnt"]
PATTERN_FEATURES = ["Risky_CE_Cnt", "Risky_Pattern_Cnt", "Max_Risky_Pattern_Cnt"]
FAULT_FEATURES = ["Fault(Cell)", "Fault(Row)", "Fault(Column)", "Fault(Bank)", "Fault(Device)", "Fault(Rank)"]
EVENT_FEATURES = ["CE_storm", "CE_overflow", "CE_storm_suppressed"]

FEATURE_GROUPS = {
    "static": STATIC_FEATURES,
    "ce_rate": CE_RATE_FEATURES,
    "dq_beat_bits": BIT_FEATURES,
    "bit_patterns": PATTERN_FEATURES,
    "fault_counts": FAULT_FEATURES,
    "memory_events": EVENT_FEATURES,
}
FEATURE_NAMES = [name for group in FEATURE_GROUPS.values() for name in group]
TIME_FEATURES = ("time_since_first_ce", "time_since_last_ce")


def manifest_hash(names: Sequence[str] = FEATURE_NAMES) -> str:
    return hashlib.sha256("\n".join(names).encode()).hexdigest()[:16]


class UnknownDimmError(KeyError):
    pass


@dataclass(frozen=True)
class WindowConfig:
    observation: int = 5 * DAY
    prediction: int = 30 * DAY
    lead: int = 1
    predict_interval: int = 5 * MINUTE
    aggregation: int = DAY
    label_interval: float = 72 * HOUR
    storm_count: int = 10
    storm_window: int = HOUR
    overflow_count: int = 1000
    suppressed_storms: int = 3
    fault_window: int | None = None
    adjacency: str = "4"

    def __post_init__(self) -> None:
        for name in ("observation", "prediction", "lead", "predict_interval", "aggregation",
                     "label_interval", "storm_window"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lead > 3 * HOUR:
            raise ValueError("lead must not exceed 3 h")
        if self.fault_window is not None and self.fault_window <= 0:
            raise ValueError("fault_window must be positive")
        for name in ("storm_count", "overflow_count", "suppressed_storms"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class FeatureVector:
    dimm_id: str
    ts: int
    values: tuple[float, ...]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.values))


@dataclass(frozen=True)
class LabeledSample:
    vector: FeatureVector
    label: int


def static_values(spec: DimmSpec) -> list[float]:
    return [
        float(spec.server_age_days),
        float(MANUFACTURER_CODE[spec.manufacturer]),
        float(WIDTH_CODE[spec.data_width]),
        float(spec.frequency_mhz),
        float(PROCESS_CODE[spec.process_class]),
        float(spec.capacity_gb),
    ]


def _bit_block(stats: np.ndarray, union_bits: int, w: int) -> list[float]:
    """DQ-beat features from an (n, 6) per-event stats matrix and the window OR."""
    if len(stats) == 0:
        return [0.0] * len(BIT_FEATURES)
    out: list[float] = []
    for j in range(stats.shape[1]):
        col = stats[:, j]
        out += [float(col.sum()), float(col.max()), float(col.min()), float(col.mean()), float(col.std())]
    dq_lanes = 0
    beats = 0
    for b in range(8):
        row = (union_bits >> (b * w)) & ((1 << w) - 1)
        dq_lanes |= row
        beats += row != 0
    out += [float(bin(dq_lanes).count("1")), float(beats)]
    return out


def _pattern_block(match_counts: np.ndarray) -> list[float]:
    matched = match_counts[match_counts > 0]
    if len(matched) == 0:
        return [0.0, 0.0, 0.0]
    return [float(len(matched)), float(matched.sum()), float(matched.max())]


def storm_triggers(times: Sequence[int], cfg: WindowConfig) -> list[bool]:
    """Greedy non-overlapping storm detection over a sorted CE timeline.

    A storm fires on the CE that brings the trailing ``storm_window`` count
    (since the last storm) to ``storm_count``; counting then restarts.
    Each decision depends only on earlier events.
    """
    recent: deque = deque()
    out = []
    for t in times:
        recent.append(t)
        while recent[0] <= t - cfg.storm_window:
            recent.popleft()
        if len(recent) >= cfg.storm_count:
            out.append(True)
            recent.clear()
        else:
            out.append(False)
    return out


def build_feature_vector(
    dimm: DimmSpec | None,
    ce_history: Sequence[CEEvent],
    t: int,
    cfg: WindowConfig = WindowConfig(),
    rules: Sequence[RiskyPatternRule] = DEFAULT_RULES,
    thresholds: FaultThresholds = FaultThresholds(),
) -> FeatureVector:
    """Feature vector of one DIMM at time ``t`` (direct, per-sample path)."""
    if dimm is None:
        raise UnknownDimmError("DIMM missing from spec table")
    rules = tuple(rules)
    past = [e for e in ce_history if e.ts <= t]
    obs = [e for e in past if e.ts > t - cfg.observation]
    agg = [e for e in obs if e.ts > t - cfg.aggregation and e.bitmap is not None]

    values = static_values(dimm)
    values += [float(sum(e.ts > t - w for e in obs)) for w in (HOUR, 6 * HOUR, DAY)]
    values.append(float(len(obs)))
    values += [float(t - obs[0].ts), float(t - obs[-1].ts)] if obs else [0.0, 0.0]

    stats = np.array(
        [spatial_features(e.bitmap, cfg.adjacency).as_tuple() for e in agg], dtype=np.float64
    ).reshape(-1, 6)
    union = 0
    for e in agg:
        union |= e.bitmap.bits
    values += _bit_block(stats, union, dimm.dq_width)
    values += _pattern_block(np.array([len(match_rules(e.bitmap, rules)) for e in agg], dtype=np.int64))

    if cfg.fault_window is None:
        report = classify_faults(past, thresholds)
    else:
        report = classify_faults(past, thresholds, t, cfg.fault_window)
    values += [float(c) for c in report.count_tuple()]

    triggers = storm_triggers([e.ts for e in past], cfg)
    storm_in_obs = any(tr and e.ts > t - cfg.observation for tr, e in zip(triggers, past))
    values += [
        float(storm_in_obs),
        float(len(past) >= cfg.overflow_count),
        float(sum(triggers) >= cfg.suppressed_storms),
    ]
    return FeatureVector(dimm.dimm_id, t, tuple(values))


class DimmFeatureBuilder:
    """Vectorised feature rows for many timestamps of one DIMM.

    Produces the same values as :func:`build_feature_vector` (tested for
    exact equality) but shares per-event work across timestamps.
    """

    def __init__(
        self,
        dimm: DimmSpec,
        ce_history: Sequence[CEEvent],
        cfg: WindowConfig = WindowConfig(),
        rules: Sequence[RiskyPatternRule] = DEFAULT_RULES,
        thresholds: FaultThresholds = FaultThresholds(),
    ):
        self.dimm, self.cfg, self.thresholds = dimm, cfg, thresholds
        self.events = list(ce_history)
        self.static = static_values(dimm)
        self.ts = np.array([e.ts for e in self.events], dtype=np.int64)
        n = len(self.events)
        rules = tuple(rules)
        self.has_bits = np.array([e.bitmap is not None for e in self.events], dtype=bool)
        self.stats = np.zeros((n, 6), dtype=np.float64)
        self.matches = np.zeros(n, dtype=np.int64)
        self.bits = [0] * n
        for i, e in enumerate(self.events):
            if e.bitmap is not None:
                self.stats[i] = spatial_features(e.bitmap, cfg.adjacency).as_tuple()
                self.matches[i] = len(match_rules(e.bitmap, rules))
                self.bits[i] = e.bitmap.bits
        triggers = storm_triggers(self.ts.tolist(), cfg)
        self.storm_prefix = np.concatenate([[0], np.cumsum(triggers, dtype=np.int64)])
        if cfg.fault_window is None:
            tracker = FaultTracker(thresholds)
            prefix = [tracker.counts()]
            for e in self.events:
                tracker.add(e)
                prefix.append(tracker.counts())
            self.fault_prefix = np.array(prefix, dtype=np.float64).reshape(-1, 6)
        self._agg_cache: dict[tuple[int, int], list[float]] = {}
        self._fault_cache: dict[tuple[int, int], list[float]] = {}

    def window_indices(self, times: np.ndarray) -> dict[str, np.ndarray]:
        cfg, ts = self.cfg, self.ts
        times = np.asarray(times, dtype=np.int64)
        return {
            "hi": np.searchsorted(ts, times, side="right"),
            "lo_1h": np.searchsorted(ts, times - HOUR, side="right"),
            "lo_6h": np.searchsorted(ts, times - 6 * HOUR, side="right"),
            "lo_24h": np.searchsorted(ts, times - DAY, side="right"),
            "lo_agg": np.searchsorted(ts, times - cfg.aggregation, side="right"),
            "lo_obs": np.searchsorted(ts, times - cfg.observation, side="right"),
        }

    def _agg(self, lo: int, hi: int) -> list[float]:
        key = (lo, hi)
        hit = self._agg_cache.get(key)
        if hit is None:
            sel = np.flatnonzero(self.has_bits[lo:hi]) + lo
            union = 0
            for i in sel:
                union |= self.bits[i]
            hit = _bit_block(self.stats[sel], union, self.dimm.dq_width) + _pattern_block(self.matches[sel])
            self._agg_cache[key] = hit
        return hit

    def _faults(self, hi: int, t: int) -> list[float]:
        if self.cfg.fault_window is None:
            return self.fault_prefix[hi].tolist()
        lo = int(np.searchsorted(self.ts, t - self.cfg.fault_window, side="right"))
        key = (lo, hi)
        hit = self._fault_cache.get(key)
        if hit is None:
            hit = [float(c) for c in classify_faults(self.events[lo:hi], self.thresholds).count_tuple()]
            self._fault_cache[key] = hit
        return hit

    def rows(self, times: Sequence[int]) -> np.ndarray:
        times = np.asarray(times, dtype=np.int64)
        out = np.empty((len(times), len(FEATURE_NAMES)), dtype=np.float64)
        if len(times) == 0:
            return out
        idx = self.window_indices(times)
        hi, lo_obs = idx["hi"], idx["lo_obs"]
        has_obs = hi > lo_obs
        first = np.where(has_obs, times - self.ts[np.minimum(lo_obs, len(self.ts) - 1)], 0) if len(self.ts) else 0
        last = np.where(has_obs, times - self.ts[np.maximum(hi - 1, 0)], 0) if len(self.ts) else 0
        counts = np.column_stack([
            np.maximum(hi - np.maximum(idx[k], lo_obs), 0) for k in ("lo_1h", "lo_6h", "lo_24h")
        ] + [hi - lo_obs]).astype(np.float64)
        storms_obs = self.storm_prefix[hi] - self.storm_prefix[lo_obs]
        storms_all = self.storm_prefix[hi]
        ns, nr = len(STATIC_FEATURES), len(CE_RATE_FEATURES)
        nb = len(BIT_FEATURES) + len(PATTERN_FEATURES)
        out[:, :ns] = self.static
        out[:, ns:ns + 4] = counts
        out[:, ns + 4] = first
        out[:, ns + 5] = last
        lo_agg = np.maximum(idx["lo_agg"], lo_obs)
        col = ns + nr
        for r in range(len(times)):
            out[r, col:col + nb] = self._agg(int(lo_agg[r]), int(hi[r]))
            out[r, col + nb:col + nb + 6] = self._faults(int(hi[r]), int(times[r]))
        out[:, -3] = storms_obs > 0
        out[:, -2] = hi >= self.cfg.overflow_count
        out[:, -1] = storms_all >= self.cfg.suppressed_storms
        return out

    def state_keys(self, times: np.ndarray) -> np.ndarray:
        """Window-content key per timestamp; equal keys differ only in time features."""
        idx = self.window_indices(times)
        cols = [idx[k] for k in ("hi", "lo_1h", "lo_6h", "lo_24h", "lo_agg", "lo_obs")]
        if self.cfg.fault_window is not None:
            cols.append(np.searchsorted(self.ts, np.asarray(times) - self.cfg.fault_window, side="right"))
        return np.column_stack(cols)


@dataclass
class Dataset:
    """Feature matrix with sample identities; ``y`` is None until labeled."""

    X: np.ndarray
    dimm_ids: list[str]
    ts: np.ndarray
    y: np.ndarray | None = None
    names: list[str] = field(default_factory=lambda: list(FEATURE_NAMES))

    def __len__(self) -> int:
        return len(self.ts)

    def subset(self, mask: np.ndarray) -> Dataset:
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return Dataset(
            self.X[idx], [self.dimm_ids[i] for i in idx], self.ts[idx],
            None if self.y is None else self.y[idx], list(self.names),
        )

    def vectors(self) -> list[FeatureVector]:
        return [FeatureVector(d, int(t), tuple(row.tolist())) for d, t, row in zip(self.dimm_ids, self.ts, self.X)]


def empty_dataset() -> Dataset:
    return Dataset(np.zeros((0, len(FEATURE_NAMES))), [], np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int8))


def build_dataset(
    ces: Iterable[CEEvent],
    specs: dict[str, DimmSpec],
    cfg: WindowConfig = WindowConfig(),
    rules: Sequence[RiskyPatternRule] = DEFAULT_RULES,
    thresholds: FaultThresholds = FaultThresholds(),
    start: int | None = None,
    end: int | None = None,
) -> Dataset:
    """Event-triggered samples: one per distinct CE timestamp in ``[start, end)``."""
    by_dimm = group_by_dimm(ces)
    mats, ids, times = [], [], []
    for dimm_id in sorted(by_dimm):
        if dimm_id not in specs:
            raise UnknownDimmError(dimm_id)
        history = by_dimm[dimm_id]
        if end is not None:
            history = [e for e in history if e.ts < end]
        sample_ts = sorted({e.ts for e in history if start is None or e.ts >= start})
        if not sample_ts:
            continue
        builder = DimmFeatureBuilder(specs[dimm_id], history, cfg, rules, thresholds)
        mats.append(builder.rows(sample_ts))
        ids += [dimm_id] * len(sample_ts)
        times += sample_ts
    if not mats:
        return empty_dataset()
    return Dataset(np.vstack(mats), ids, np.array(times, dtype=np.int64))


def first_ue_times(ue_events: Iterable[UEEvent]) -> dict[str, int]:
    first: dict[str, int] = {}
    for u in ue_events:
        if u.dimm_id not in first or u.ts < first[u.dimm_id]:
            first[u.dimm_id] = u.ts
    return first


def label_times(dimm_ids: Sequence[str], ts: Sequence[int], first_ue: dict[str, int], t_i: float) -> np.ndarray:
    """1 positive, 0 negative, -1 excluded, per (dimm, ts) sample."""
    if not t_i > 0:
        raise ValueError("labeling interval t_i must be positive")
    out = np.empty(len(ts), dtype=np.int8)
    for k, (d, t) in enumerate(zip(dimm_ids, ts)):
        u = first_ue.get(d)
        if u is None:
            out[k] = 0
        elif u - t_i <= t < u:
            out[k] = 1
        else:
            out[k] = -1
    return out


def label_samples(vectors: Sequence[FeatureVector], ue_events: Iterable[UEEvent], t_i: float) -> list[LabeledSample]:
    """Positive within ``[u - t_i, u)`` of a DIMM's first UE; earlier or later samples dropped."""
    labels = label_times([v.dimm_id for v in vectors], [v.ts for v in vectors], first_ue_times(ue_events), t_i)
    return [LabeledSample(v, int(lab)) for v, lab in zip(vectors, labels) if lab >= 0]


def label_dataset(ds: Dataset, ue_events: Iterable[UEEvent], t_i: float) -> Dataset:
    labels = label_times(ds.dimm_ids, ds.ts.tolist(), first_ue_times(ue_events), t_i)
    keep = labels >= 0
    out = ds.subset(keep)
    out.y = labels[keep].astype(np.int8)
    return out


def censor_negatives(ds: Dataset, cutoff: int, t_i: float) -> Dataset:
    """Drop negatives at or after ``cutoff - t_i``: their label is not yet known at ``cutoff``."""
    return ds.subset(~((ds.y == 0) & (ds.ts >= cutoff - t_i)))


class UnlearnableDatasetError(ValueError):
    pass


def oversample(ds: Dataset, target_ratio: float = 0.3, seed: int = 0) -> Dataset:
    """Duplicate random positives until positives / negatives >= ``target_ratio``."""
    if ds.y is None:
        raise ValueError("dataset is unlabeled")
    pos = np.flatnonzero(ds.y == 1)
    n_neg = int(np.sum(ds.y == 0))
    if len(pos) == 0:
        raise UnlearnableDatasetError("no positive samples")
    if n_neg == 0:
        raise UnlearnableDatasetError("no negative samples")
    target = math.ceil(target_ratio * n_neg - 1e-9)
    if len(pos) >= target:
        return ds
    rng = np.random.default_rng(seed)
    extra = pos[rng.integers(0, len(pos), size=target - len(pos))]
    idx = np.concatenate([np.arange(len(ds)), extra])
    return ds.subset(idx)


def pearson_scores(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """|Pearson r| of each column with ``y``; constant columns score NaN."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    sx = np.sqrt((xc ** 2).sum(axis=0))
    sy = np.sqrt((yc ** 2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (xc * yc[:, None]).sum(axis=0) / (sx * sy)
    r[sx == 0] = np.nan
    return np.abs(r)


def _rank(names: Sequence[str], scores: np.ndarray) -> list[str]:
    order = sorted(range(len(names)), key=lambda j: (np.isnan(scores[j]), -np.nan_to_num(scores[j]), names[j]))
    return [names[j] for j in order]


def select_features(ds: Dataset, method: str = "pearson", k: int = 10, seed: int = 0, hp=None) -> list[str]:
    """Top-``k`` feature names by ``pearson``, ``impurity`` (forest split gain) or ``rfe``."""
    from .model import Hyperparams, train  # model imports this module

    if ds.y is None:
        raise ValueError("dataset is unlabeled")
    if k > len(ds.names) or k < 1:
        raise ValueError(f"k={k} outside 1..{len(ds.names)}")
    if min(np.sum(ds.y == 1), np.sum(ds.y == 0)) < 2:
        raise ValueError("need at least two samples per class")
    if method == "pearson":
        return _rank(ds.names, pearson_scores(ds.X, ds.y))[:k]
    hp = hp or Hyperparams(n_trees=50, max_depth=6, min_samples_leaf=5, seed=seed)
    forest_hp = replace(hp, mode="forest")
    if method == "impurity":
        model = train(ds, forest_hp)
        return _rank(ds.names, model.importance())[:k]
    if method == "rfe":
        names = list(ds.names)
        while True:
            cols = [ds.names.index(n) for n in names]
            sub = Dataset(ds.X[:, cols], ds.dimm_ids, ds.ts, ds.y, names)
            ranked = _rank(names, train(sub, forest_hp).importance())
            if len(names) == k:
                return ranked
            names = [n for n in names if n != ranked[-1]]
    raise ValueError(f"unknown selection method {method!r}")


def write_dataset(ds: Dataset, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dimm_id", "ts", *ds.names, "label"])
    labels = ds.y if ds.y is not None else [""] * len(ds)
    for d, t, row, lab in zip(ds.dimm_ids, ds.ts, ds.X, labels):
        w.writerow([d, int(t), *(repr(float(v)) for v in row), lab if lab == "" else int(lab)])
    return buf.getvalue()


def read_dataset(stream: IO | str) -> Dataset:
    text = stream if isinstance(stream, str) else stream.read()
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if not lines:
        return empty_dataset()
    reader = csv.reader(lines)
    header = next(reader)
    if header[:2] != ["dimm_id", "ts"] or header[-1] != "label":
        raise ValueError("dataset header must be dimm_id,ts,<features>,label")
    names = header[2:-1]
    ids, ts, rows, labels = [], [], [], []
    for rec in reader:
        ids.append(rec[0])
        ts.append(int(rec[1]))
        rows.append([float(v) for v in rec[2:-1]])
        labels.append(rec[-1])
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    y = None if any(lab == "" for lab in labels) else np.array([int(v) for v in labels], dtype=np.int8)
    return Dataset(X, ids, np.array(ts, dtype=np.int64), y, names)


def manifest_json(names: Sequence[str] = FEATURE_NAMES, **extra) -> str:
    groups = {g: [n for n in members if n in names] for g, members in FEATURE_GROUPS.items()}
    return json.dumps({"features": list(names), "groups": groups, "hash": manifest_hash(names), **extra},
                      indent=2, sort_keys=True) + "\n"


def feature_index(name: str, names: Sequence[str] = FEATURE_NAMES) -> int:
    return list(names).index(name)


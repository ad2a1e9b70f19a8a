"""
Online evaluation protocol, confusion metrics, VIRR and relative UE rates.

An alarm raised at ``t`` is valid for a UE at ``u`` iff
``t + lead <= u <= t + lead + prediction``. Verdicts are per DIMM: a DIMM
with a UE is TP if any of its alarms is valid for one of its UEs, else FN;
a DIMM without UE is FP if it alarmed at all, else TN. DIMMs whose UE has no
earlier CE (sudden UEs) and DIMMs already failed before the test period are
left out.

Prediction ticks are CE arrivals plus the ``predict_interval`` grid during the
24 h after each CE. Ticks sharing a window state (same events in every
window) differ only in the two time-since-CE features, so a scorer is run
once per distinct (window state, side of every split threshold on those
features) and the result broadcast to all ticks of that group.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .faults import FaultThresholds
from .features import (
    DAY, FEATURE_NAMES, TIME_FEATURES, DimmFeatureBuilder, WindowConfig, feature_index,
)
from .ingest import CEEvent, DimmSpec, UEEvent, group_by_dimm
from .risk import DEFAULT_RULES, RiskyPatternRule

VERDICTS = ("TP", "FP", "FN", "TN")


class Scorer(Protocol):
    features: list[str]

    def predict_proba(self, X: np.ndarray) -> np.ndarray: ...

    def split_thresholds(self, feature: int) -> np.ndarray: ...


@dataclass
class IndicatorScorer:
    """Rule-style baseline: score 1 iff every ``feature > threshold`` condition holds."""

    conditions: Sequence[tuple[str, float]]
    features: list[str] = field(default_factory=lambda: list(FEATURE_NAMES))

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        ok = np.ones(len(X), dtype=bool)
        for name, thr in self.conditions:
            ok &= X[:, self.features.index(name)] > thr
        return ok.astype(np.float64)

    def split_thresholds(self, feature: int) -> np.ndarray:
        name = self.features[feature]
        return np.array(sorted({thr for n, thr in self.conditions if n == name}), dtype=np.float64)

    @property
    def label(self) -> str:
        return " & ".join(f"{n}>{thr:g}" for n, thr in self.conditions)


@dataclass
class Timeline:
    ces: dict[str, list[CEEvent]]
    ues: dict[str, list[UEEvent]]
    specs: dict[str, DimmSpec]
    start: int
    end: int

    @classmethod
    def from_events(cls, ces: Iterable[CEEvent], ues: Iterable[UEEvent], specs: dict[str, DimmSpec],
                    start: int, end: int) -> Timeline:
        return cls(group_by_dimm(ces), group_by_dimm(ues), specs, start, end)

    def ue_times(self, dimm_id: str) -> list[int]:
        return sorted(u.ts for u in self.ues.get(dimm_id, []))

    def population(self) -> list[str]:
        """DIMMs evaluated over ``[start, end)``."""
        out = []
        for d in sorted(set(self.ces) | set(self.ues)):
            ues = self.ue_times(d)
            if ues and ues[0] < self.start:
                continue
            test_ues = [u for u in ues if self.start <= u < self.end]
            ce_ts = [e.ts for e in self.ces.get(d, [])]
            if test_ues and not any(t < test_ues[0] for t in ce_ts):
                continue  # sudden UE
            in_test = any(self.start - DAY < t < self.end for t in ce_ts)
            if in_test or test_ues:
                out.append(d)
        return out


def prediction_ticks(ce_ts: np.ndarray, cfg: WindowConfig, start: int, end: int) -> np.ndarray:
    """CE arrivals plus the prediction grid within 24 h after each CE, clipped to ``[start, end)``."""
    step = cfg.predict_interval
    ce_ts = np.asarray(ce_ts, dtype=np.int64)
    parts = [ce_ts[(ce_ts >= start) & (ce_ts < end)]]
    if len(ce_ts):
        a_prev, b_prev = None, None
        merged = []
        for t in ce_ts:
            a, b = int(t), int(t) + DAY
            if b_prev is not None and a <= b_prev:
                b_prev = max(b_prev, b)
            else:
                if b_prev is not None:
                    merged.append((a_prev, b_prev))
                a_prev, b_prev = a, b
        merged.append((a_prev, b_prev))
        for a, b in merged:
            a, b = max(a, start), min(b, end)
            if a >= b:
                continue
            first = -(-a // step) * step
            parts.append(np.arange(first, b, step, dtype=np.int64))
    return np.unique(np.concatenate(parts))


def _segment_keys(builder: DimmFeatureBuilder, ticks: np.ndarray, thresholds: Mapping[int, np.ndarray]) -> np.ndarray:
    keys = builder.state_keys(ticks)
    idx = builder.window_indices(ticks)
    hi, lo_obs = idx["hi"], idx["lo_obs"]
    has = hi > lo_obs
    ts = builder.ts
    first_j, last_j = (feature_index(n) for n in TIME_FEATURES)
    time_vals = {
        first_j: np.where(has, ticks - ts[np.minimum(lo_obs, len(ts) - 1)], 0).astype(np.float64),
        last_j: np.where(has, ticks - ts[np.maximum(hi - 1, 0)], 0).astype(np.float64),
    }
    cols = [keys]
    for j, vals in time_vals.items():
        thr = thresholds.get(j)
        if thr is not None and len(thr):
            cols.append(np.searchsorted(thr, vals, side="left")[:, None])
    return np.hstack(cols)


def compute_alarms(
    scorers: Mapping[str, Scorer],
    timeline: Timeline,
    cfg: WindowConfig = WindowConfig(),
    threshold: float = 0.3,
    rules: Sequence[RiskyPatternRule] = DEFAULT_RULES,
    fault_thresholds: FaultThresholds = FaultThresholds(),
    dimms: Sequence[str] | None = None,
    exact: bool = False,
) -> dict[str, dict[str, np.ndarray]]:
    """Alarm tick times per scorer per DIMM.

    ``exact=True`` scores every tick individually (slow reference path).
    """
    for name, sc in scorers.items():
        if list(sc.features) != list(FEATURE_NAMES):
            raise ValueError(f"scorer {name!r} was built for a different feature manifest")
    time_js = [feature_index(n) for n in TIME_FEATURES]
    merged_thr = {
        j: np.unique(np.concatenate([sc.split_thresholds(j) for sc in scorers.values()] + [np.zeros(0)]))
        for j in time_js
    }
    out: dict[str, dict[str, np.ndarray]] = {name: {} for name in scorers}
    for d in (dimms if dimms is not None else timeline.population()):
        history = timeline.ces.get(d, [])
        ues = timeline.ue_times(d)
        stop = min([timeline.end] + [u for u in ues if u >= timeline.start])
        builder = DimmFeatureBuilder(timeline.specs[d], history, cfg, rules, fault_thresholds)
        ticks = prediction_ticks(builder.ts, cfg, timeline.start, stop)
        if len(ticks) == 0:
            for name in scorers:
                out[name][d] = np.zeros(0, dtype=np.int64)
            continue
        if exact:
            X = builder.rows(ticks)
            for name, sc in scorers.items():
                out[name][d] = ticks[sc.predict_proba(X) >= threshold]
            continue
        seg = _segment_keys(builder, ticks, merged_thr)
        _, first, inverse = np.unique(seg, axis=0, return_index=True, return_inverse=True)
        X = builder.rows(ticks[first])
        for name, sc in scorers.items():
            p = sc.predict_proba(X)
            out[name][d] = ticks[(p >= threshold)[inverse.ravel()]]
    return out


@dataclass(frozen=True)
class DimOutcome:
    dimm_id: str
    alarms: tuple[int, ...]
    ue_times: tuple[int, ...]
    verdict: str


def alarm_valid(alarm: int, ue: int, lead: int, prediction: int) -> bool:
    return alarm + lead <= ue <= alarm + lead + prediction


def verdicts(
    alarms: Mapping[str, np.ndarray],
    timeline: Timeline,
    cfg: WindowConfig = WindowConfig(),
    lead: int | None = None,
) -> list[DimOutcome]:
    lead = cfg.lead if lead is None else lead
    out = []
    for d in sorted(alarms):
        a = np.asarray(alarms[d], dtype=np.int64)
        ues = [u for u in timeline.ue_times(d) if timeline.start <= u < timeline.end]
        if ues:
            # any alarm in [u - lead - prediction, u - lead]
            hit = any(
                np.searchsorted(a, u - lead, side="right") > np.searchsorted(a, u - lead - cfg.prediction, side="left")
                for u in ues
            )
            verdict = "TP" if hit else "FN"
        else:
            verdict = "FP" if len(a) else "TN"
        out.append(DimOutcome(d, tuple(int(v) for v in a), tuple(ues), verdict))
    return out


def per_alarm_counts(outcomes: Sequence[DimOutcome], cfg: WindowConfig, lead: int) -> dict[str, int]:
    """Sensitivity mode: each alarm is a TP or FP, each UE without a valid alarm an FN."""
    counts = dict.fromkeys(VERDICTS, 0)
    for o in outcomes:
        valid = [any(alarm_valid(a, u, lead, cfg.prediction) for u in o.ue_times) for a in o.alarms]
        counts["TP"] += sum(valid)
        counts["FP"] += len(valid) - sum(valid)
        counts["FN"] += sum(not any(alarm_valid(a, u, lead, cfg.prediction) for a in o.alarms) for u in o.ue_times)
        counts["TN"] += not o.alarms and not o.ue_times
    return counts


def simulate_online(
    model: Scorer,
    timeline: Timeline,
    cfg: WindowConfig = WindowConfig(),
    threshold: float = 0.3,
    lead: int | None = None,
    **kwargs,
) -> list[DimOutcome]:
    alarms = compute_alarms({"model": model}, timeline, cfg, threshold, **kwargs)["model"]
    return verdicts(alarms, timeline, cfg, lead)


def count_verdicts(outcomes: Iterable[DimOutcome]) -> dict[str, int]:
    counts = dict.fromkeys(VERDICTS, 0)
    for o in outcomes:
        counts[o.verdict] += 1
    return counts


def metrics(counts: Mapping[str, int]) -> tuple[float, float, float]:
    """(precision, recall, F1), with 0/0 taken as 0."""
    tp, fp, fn = counts["TP"], counts["FP"], counts["FN"]
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, f1_score(precision, recall)


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2 * precision * recall / s if s else 0.0


def virr(precision: float, recall: float, y_c: float = 0.1) -> float:
    """VM interruption reduction rate ``(1 - y_c / precision) * recall``."""
    if not 0 < precision <= 1:
        raise ValueError("VIRR is undefined for precision outside (0, 1]")
    if not 0 <= recall <= 1 or not 0 <= y_c <= 1:
        raise ValueError("recall and y_c must lie in [0, 1]")
    return (1.0 - y_c / precision) * recall


@dataclass
class LeadResult:
    lead: int
    counts: dict[str, int]
    precision: float
    recall: float
    f1: float
    virr: float | None


@dataclass
class EvaluationReport:
    threshold: float
    y_c: float
    results: list[LeadResult]
    tables: dict[str, list] = field(default_factory=dict)

    def by_lead(self, lead: int) -> LeadResult:
        return next(r for r in self.results if r.lead == lead)


def lead_result(counts: dict[str, int], lead: int, y_c: float) -> LeadResult:
    p, r, f1 = metrics(counts)
    return LeadResult(lead, counts, p, r, f1, virr(p, r, y_c) if p > 0 else None)


def evaluate(
    model: Scorer,
    timeline: Timeline,
    cfg: WindowConfig = WindowConfig(),
    threshold: float = 0.3,
    leads: Sequence[int] = (1,),
    y_c: float = 0.1,
    per_alarm: bool = False,
    **kwargs,
) -> EvaluationReport:
    alarms = compute_alarms({"model": model}, timeline, cfg, threshold, **kwargs)["model"]
    return report_from_alarms(alarms, timeline, cfg, threshold, leads, y_c, per_alarm)


def report_from_alarms(alarms, timeline, cfg, threshold, leads, y_c=0.1, per_alarm=False) -> EvaluationReport:
    results = []
    for lead in leads:
        outs = verdicts(alarms, timeline, cfg, lead)
        counts = per_alarm_counts(outs, cfg, lead) if per_alarm else count_verdicts(outs)
        results.append(lead_result(counts, lead, y_c))
    return EvaluationReport(threshold, y_c, results)


def format_duration(seconds: int) -> str:
    for unit, size in (("d", DAY), ("h", 3600), ("m", 60)):
        if seconds % size == 0 and seconds >= size:
            return f"{seconds // size}{unit}"
    return f"{seconds}s"


METRIC_COLUMNS = ("scorer", "lead", "threshold", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "virr")


def metrics_rows(name: str, report: EvaluationReport) -> list[list]:
    rows = []
    for r in report.results:
        rows.append([
            name, format_duration(r.lead), report.threshold,
            r.counts["TP"], r.counts["FP"], r.counts["FN"], r.counts["TN"],
            f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}",
            "" if r.virr is None else f"{r.virr:.6f}",
        ])
    return rows


def metrics_csv(rows: Iterable[list], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


def summary_text(name: str, report: EvaluationReport) -> str:
    lines = [f"{name}: threshold={report.threshold:g} y_c={report.y_c:g}"]
    for r in report.results:
        c = r.counts
        v = "n/a" if r.virr is None else f"{r.virr:.3f}"
        lines.append(
            f"  lead {format_duration(r.lead):>4}  TP={c['TP']} FP={c['FP']} FN={c['FN']} TN={c['TN']}"
            f"  P={r.precision:.3f} R={r.recall:.3f} F1={r.f1:.3f} VIRR={v}"
        )
    return "\n".join(lines)


@dataclass(frozen=True)
class RateRow:
    bucket: str
    n_dimms: int
    n_ue: int
    fraction: float
    relative: float


def relative_ue_rate(
    population: Iterable[Mapping],
    key: str | Callable[[Mapping], object],
    bucketing: Sequence[float] | Callable[[object], object] | None = None,
) -> list[RateRow]:
    """Fraction of DIMMs with a UE per bucket, divided by the largest fraction.

    Records need a boolean ``has_ue``. ``key`` may return a list to place a
    DIMM in several buckets. ``bucketing`` is ``None`` (categorical), a
    sorted list of numeric edges (buckets ``[e_i, e_i+1)`` with open last
    bucket ``>= e_n``) or a callable. Empty buckets are omitted.
    """
    getter = key if callable(key) else (lambda rec: rec[key])
    if bucketing is None:
        def bucket_of(v):
            return v
    elif callable(bucketing):
        bucket_of = bucketing
    else:
        edges = list(bucketing)

        def bucket_of(v):
            if v < edges[0]:
                return f"<{edges[0]:g}"
            for lo, hi in zip(edges, edges[1:]):
                if lo <= v < hi:
                    return f"[{lo:g},{hi:g})"
            return f">={edges[-1]:g}"

    order: list = []
    tallies: dict = {}
    for rec in population:
        values = getter(rec)
        if values is None:
            continue
        if not isinstance(values, (list, tuple, set, frozenset)):
            values = [values]
        for v in values:
            b = bucket_of(v)
            if b not in tallies:
                tallies[b] = [0, 0]
                order.append(b)
            tallies[b][0] += 1
            tallies[b][1] += bool(rec["has_ue"])
    if bucketing is not None and not callable(bucketing):
        labels = [f"<{edges[0]:g}"] + [f"[{lo:g},{hi:g})" for lo, hi in zip(edges, edges[1:])] + [f">={edges[-1]:g}"]
        order = [b for b in labels if b in tallies]
    else:
        order = sorted(order, key=lambda b: (not isinstance(b, (int, float)), b if isinstance(b, (int, float)) else str(b)))
    fractions = {b: tallies[b][1] / tallies[b][0] for b in order}
    top = max(fractions.values(), default=0.0)
    return [
        RateRow(str(b), tallies[b][0], tallies[b][1], fractions[b], fractions[b] / top if top > 0 else 0.0)
        for b in order
    ]


def rate_table_csv(title: str, rows: Sequence[RateRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["analysis", "bucket", "n_dimms", "n_ue", "ue_fraction", "relative_ue_rate"])
    for r in rows:
        w.writerow([title, r.bucket, r.n_dimms, r.n_ue, f"{r.fraction:.6f}", f"{r.relative:.6f}"])
    return buf.getvalue()


"""
Pipeline stages shared by the command line and the golden corpus.

Each stage reads and writes plain files in an output directory:

========= ================================== ==================================
stage     reads                              writes
========= ================================== ==================================
gen       config                             events.jsonl specs.csv truth.jsonl
featurize events.jsonl specs.csv             train.csv manifest.json
train     train.csv                          model.jsonl
evaluate  model.jsonl events.jsonl specs.csv metrics.csv
analyze   events.jsonl specs.csv             rates.csv sweeps.csv
========= ================================== ==================================

Every file carries the seed and config hash that produced it.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bitmap import spatial_features
from .config import RunConfig
from .evaluate import (
    IndicatorScorer, Timeline, compute_alarms, metrics_csv, metrics_rows, rate_table_csv,
    relative_ue_rate, report_from_alarms, summary_text,
)
from .faults import classify_faults, exclusive_faults
from .features import (
    Dataset, build_dataset, censor_negatives, empty_dataset, label_dataset, manifest_json,
    oversample, read_dataset, write_dataset,
)
from .ingest import CEEvent, DimmSpec, ParseResult, UEEvent, check_widths, load_dimm_specs, parse_events
from .model import TreeEnsemble, train
from .risk import match_rules
from .synthgen import generate

log = logging.getLogger("memfail")

BASELINE = ("R1>0", [("Risky_CE_Cnt", 0)])

# indicator sweep: each R alone over a few k, then combinations
SWEEPS = (
    [(f"R1>{k}", [("Risky_CE_Cnt", k)]) for k in (0, 1, 2, 4, 8)]
    + [(f"R2>{k}", [("Risky_Pattern_Cnt", k)]) for k in (0, 1, 2, 4, 8)]
    + [(f"R3>{k}", [("Max_Risky_Pattern_Cnt", k)]) for k in (0, 1, 2)]
    + [
        ("R1>2&R2>2", [("Risky_CE_Cnt", 2), ("Risky_Pattern_Cnt", 2)]),
        ("R1>2&R2>2&R3>1", [("Risky_CE_Cnt", 2), ("Risky_Pattern_Cnt", 2), ("Max_Risky_Pattern_Cnt", 1)]),
        ("R1>0&Fault(Row)>0", [("Risky_CE_Cnt", 0), ("Fault(Row)", 0)]),
        ("R1>0&Fault(Bank)>0", [("Risky_CE_Cnt", 0), ("Fault(Bank)", 0)]),
    ]
)


class StageError(RuntimeError):
    pass


@dataclass
class Logs:
    ces: list[CEEvent]
    ues: list[UEEvent]
    specs: dict[str, DimmSpec]
    start: int
    end: int
    warnings: list[str] = field(default_factory=list)


def stamp(cfg: RunConfig) -> str:
    return f"seed={cfg.seed} config={cfg.hash()}"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _read(path: Path) -> str:
    try:
        return path.read_text()
    except FileNotFoundError as exc:
        raise StageError(f"missing input file: {path}") from exc


# -- parallel helpers -------------------------------------------------------

def _chunks(items: Sequence, n: int) -> list[list]:
    size = -(-len(items) // n) if items else 0
    return [list(items[i:i + size]) for i in range(0, len(items), size)] if size else []


def _featurize_part(args):
    ces, specs, cfg, end = args
    return build_dataset(ces, specs, cfg.window, cfg.rules, cfg.faults, end=end)


def _alarms_part(args):
    scorers, timeline, cfg, dimms = args
    return compute_alarms(scorers, timeline, cfg.window, cfg.threshold, cfg.rules, cfg.faults, dimms=dimms)


def featurize_events(logs: Logs, cfg: RunConfig, end: int) -> Dataset:
    """Event-triggered dataset of all DIMMs, optionally split across worker processes."""
    dimms = sorted({e.dimm_id for e in logs.ces})
    if cfg.threads == 1 or len(dimms) < 2:
        return build_dataset(logs.ces, logs.specs, cfg.window, cfg.rules, cfg.faults, end=end)
    by = {d: [] for d in dimms}
    for e in logs.ces:
        by[e.dimm_id].append(e)
    jobs = []
    for part in _chunks(dimms, cfg.threads):
        jobs.append(([e for d in part for e in by[d]], {d: logs.specs[d] for d in part if d in logs.specs}, cfg, end))
    with ProcessPoolExecutor(cfg.threads) as ex:
        parts = [p for p in ex.map(_featurize_part, jobs) if len(p)]
    if not parts:
        return empty_dataset()
    # contiguous chunks of the sorted DIMM list keep the serial row order
    return Dataset(np.vstack([p.X for p in parts]), [d for p in parts for d in p.dimm_ids],
                   np.concatenate([p.ts for p in parts]))


def alarms_for(scorers: dict, timeline: Timeline, cfg: RunConfig) -> dict:
    pop = timeline.population()
    if cfg.threads == 1 or len(pop) < 2:
        return compute_alarms(scorers, timeline, cfg.window, cfg.threshold, cfg.rules, cfg.faults, dimms=pop)
    jobs = []
    for part in _chunks(pop, cfg.threads):
        sub = Timeline({d: timeline.ces.get(d, []) for d in part}, {d: timeline.ues.get(d, []) for d in part},
                       {d: timeline.specs[d] for d in part}, timeline.start, timeline.end)
        jobs.append((scorers, sub, cfg, part))
    out: dict = {name: {} for name in scorers}
    with ProcessPoolExecutor(cfg.threads) as ex:
        for res in ex.map(_alarms_part, jobs):
            for name in scorers:
                out[name].update(res[name])
    return out


# -- stages -----------------------------------------------------------------

def gen_stage(cfg: RunConfig, out: Path) -> dict:
    fleet = generate(cfg.generator)
    meta = {"seed": cfg.seed, "config_hash": cfg.hash(), "start": fleet.start, "end": fleet.end}
    _write(out / "events.jsonl", fleet.event_log(meta))
    _write(out / "specs.csv", fleet.spec_table(stamp(cfg)))
    truth = json.dumps({"type": "META", **meta}, sort_keys=True) + "\n" + fleet.truth.dumps()
    _write(out / "truth.jsonl", truth)
    return {"dimms": len(fleet.specs), "ces": len(fleet.ces), "ues": len(fleet.ues)}


def load_logs(events: Path, specs: Path, cfg: RunConfig) -> Logs:
    spec_table = load_dimm_specs(_read(specs))
    res: ParseResult = parse_events(_read(events), {d: s.dq_width for d, s in spec_table.items()})
    warnings = list(res.warnings) + check_widths(res.ces, spec_table)
    unknown = sorted({e.dimm_id for e in res.ces} - set(spec_table))
    if unknown:
        raise StageError(f"{len(unknown)} DIMMs in the log have no spec row (first: {unknown[0]})")
    start = int(res.meta.get("start", cfg.generator.start_ts))
    end = int(res.meta.get("end", cfg.end_ts))
    return Logs(res.ces, res.ues, spec_table, start, end, warnings)


def featurize_stage(cfg: RunConfig, events: Path, specs: Path, out: Path) -> Dataset:
    """Labeled training samples from CEs before the split."""
    logs = load_logs(events, specs, cfg)
    for w in logs.warnings:
        log.warning(w)
    split = logs.start + int(cfg.train_days * 86400)
    ds = featurize_events(logs, cfg, split)
    if len(ds) == 0:
        log.warning("no CE events before the split: writing an empty dataset")
        ds = empty_dataset()
    else:
        t_i = cfg.window.label_interval
        ds = label_dataset(ds, [u for u in logs.ues if u.ts < split], t_i)
        # a lifetime labeling interval would censor every negative
        horizon = t_i if t_i != float("inf") else cfg.window.prediction
        ds = censor_negatives(ds, split, horizon)
    _write(out / "train.csv", write_dataset(ds, f"{stamp(cfg)} split={split}"))
    _write(out / "manifest.json", manifest_json(seed=cfg.seed, config_hash=cfg.hash()))
    return ds


def train_stage(cfg: RunConfig, dataset: Path, out: Path) -> TreeEnsemble:
    ds = read_dataset(_read(dataset))
    if len(ds) == 0 or ds.y is None:
        raise StageError(f"dataset {dataset} has no labeled samples")
    n_pos = int((ds.y == 1).sum())
    if n_pos == 0 or n_pos == len(ds):
        raise StageError(f"dataset {dataset} needs both positive and negative samples")
    if cfg.oversample_ratio > 0:
        ds = oversample(ds, cfg.oversample_ratio, cfg.seed)
    model = train(ds, cfg.model, meta={"seed": cfg.seed, "config_hash": cfg.hash()})
    _write(out / "model.jsonl", model.dumps())
    return model


def evaluate_stage(cfg: RunConfig, model_path: Path, events: Path, specs: Path, out: Path) -> str:
    try:
        model = TreeEnsemble.load(model_path)
    except FileNotFoundError as exc:
        raise StageError(f"missing input file: {model_path}") from exc
    logs = load_logs(events, specs, cfg)
    split = logs.start + int(cfg.train_days * 86400)
    timeline = Timeline.from_events(logs.ces, logs.ues, logs.specs, split, logs.end)
    scorers = {"model": model, BASELINE[0]: IndicatorScorer(BASELINE[1])}
    alarms = alarms_for(scorers, timeline, cfg)
    rows, text = [], []
    for name in scorers:
        report = report_from_alarms(alarms[name], timeline, cfg.window, cfg.threshold, cfg.leads, cfg.y_c)
        rows += metrics_rows(name, report)
        text.append(summary_text(name, report))
    _write(out / "metrics.csv", metrics_csv(rows, f"{stamp(cfg)} test=[{split},{logs.end})"))
    return "\n".join(text)


def dimm_records(logs: Logs, cfg: RunConfig) -> list[dict]:
    """One analysis record per DIMM with CEs before its first UE (sudden UEs left out)."""
    first_ue: dict[str, int] = {}
    for u in logs.ues:
        first_ue[u.dimm_id] = min(u.ts, first_ue.get(u.dimm_id, u.ts))
    by: dict[str, list[CEEvent]] = {}
    for e in logs.ces:
        if e.ts < first_ue.get(e.dimm_id, logs.end + 1):
            by.setdefault(e.dimm_id, []).append(e)
    recs = []
    for d in sorted(by):
        spec, ces = logs.specs[d], by[d]
        stats = [spatial_features(e.bitmap, cfg.window.adjacency) for e in ces if e.bitmap is not None]
        fx = exclusive_faults(classify_faults(ces, cfg.faults))
        levels = [lv for lv, n in fx.items() if n > 0] or ["none"]
        matched = sorted({r for e in ces if e.bitmap is not None for r in match_rules(e.bitmap, cfg.rules)})
        rec = {
            "dimm_id": d, "has_ue": d in first_ue,
            "manufacturer": spec.manufacturer, "data_width": spec.data_width,
            "frequency_mhz": spec.frequency_mhz, "process": spec.process_class,
            "capacity_gb": spec.capacity_gb, "server_age_days": spec.server_age_days,
            "fault_level": levels, "risky_rule": matched or ["none"],
        }
        for name in ("total_bits", "adjacent_pairs", "dq_count", "beat_count", "beat_interval"):
            rec[f"max_{name}"] = max((getattr(s, name) for s in stats), default=None)
        rec["min_dq_interval"] = min((s.dq_interval for s in stats), default=None)
        recs.append(rec)
    return recs


RATE_TABLES = (
    ("max_error_bits", "max_total_bits", [1, 2, 3, 4, 6, 8]),
    ("max_adjacent_pairs", "max_adjacent_pairs", None),
    ("max_error_dqs", "max_dq_count", None),
    ("max_error_beats", "max_beat_count", None),
    ("min_dq_interval", "min_dq_interval", None),
    ("max_beat_interval", "max_beat_interval", None),
    ("fault_level", "fault_level", None),
    ("risky_rule", "risky_rule", None),
    ("data_width", "data_width", None),
    ("frequency_mhz", "frequency_mhz", None),
    ("process", "process", None),
    ("manufacturer", "manufacturer", None),
    ("capacity_gb", "capacity_gb", None),
    ("server_age_days", "server_age_days", [0, 365, 730, 1095, 1460]),
)


def analyze_stage(cfg: RunConfig, events: Path, specs: Path, out: Path) -> str:
    """Relative UE rate tables and indicator precision/recall sweeps over the whole log."""
    logs = load_logs(events, specs, cfg)
    recs = dimm_records(logs, cfg)
    parts = []
    for k, (title, key, bucketing) in enumerate(RATE_TABLES):
        text = rate_table_csv(title, relative_ue_rate(recs, key, bucketing))
        parts.append(text if k == 0 else text.split("\n", 1)[1])
    _write(out / "rates.csv", f"# {stamp(cfg)}\n" + "".join(parts))
    timeline = Timeline.from_events(logs.ces, logs.ues, logs.specs, logs.start, logs.end)
    scorers = {name: IndicatorScorer(conds) for name, conds in SWEEPS}
    alarms = alarms_for(scorers, timeline, cfg)
    rows = []
    for name in scorers:
        rows += metrics_rows(name, report_from_alarms(alarms[name], timeline, cfg.window, cfg.threshold, (1,), cfg.y_c))
    _write(out / "sweeps.csv", metrics_csv(rows, f"{stamp(cfg)} window=[{logs.start},{logs.end})"))
    return f"{len(recs)} DIMMs analysed, {len(SWEEPS)} indicator sweeps"


def run_pipeline(cfg: RunConfig, out: Path) -> str:
    gen_stage(cfg, out)
    featurize_stage(cfg, out / "events.jsonl", out / "specs.csv", out)
    train_stage(cfg, out / "train.csv", out)
    return evaluate_stage(cfg, out / "model.jsonl", out / "events.jsonl", out / "specs.csv", out)

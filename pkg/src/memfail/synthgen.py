"""
Seeded synthetic DIMM fleet with injected component faults.

Each DIMM receives one primary fault (drawn from the mixture) plus a Poisson
number of extra faults. A fault emits CEs from an onset time at a Poisson
rate for a bounded active period, at addresses shaped by its type, with
bitmaps drawn from a per-type profile. A fault may escalate: it then enters
a degradation phase shortly before its scheduled UE (a burst of CEs that
thickens towards the UE, with wider bitmaps), and the DIMM emits nothing
after the UE.

Per-DIMM randomness comes from ``SeedSequence(seed).spawn``, so DIMMs are
independent of generation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .ingest import BEATS, CEEvent, DimmSpec, ErrorBitmap, MemoryAddress, UEEvent, dump_dimm_specs, serialize_events

DAY = 86400
FAULT_TYPES = ("transient_cell", "stuck_cell", "row", "column", "bank", "device")
START_TS = 1_640_995_200  # 2022-01-01T00:00:00Z


def _default(d: dict):
    return field(default_factory=lambda: dict(d))


@dataclass(frozen=True)
class GeneratorConfig:
    n_dimms: int = 5000
    duration_days: float = 365.0
    seed: int = 0
    start_ts: int = START_TS
    fault_weights: dict = _default({
        "transient_cell": 0.40, "stuck_cell": 0.25, "row": 0.12,
        "column": 0.08, "bank": 0.08, "device": 0.07,
    })
    # CEs per day while a fault is active
    ce_rate: dict = _default({
        "transient_cell": 0.3, "stuck_cell": 0.6, "row": 0.8,
        "column": 0.8, "bank": 1.5, "device": 2.0,
    })
    escalation_prob: dict = _default({
        "transient_cell": 0.05, "stuck_cell": 0.05, "row": 0.3,
        "column": 0.3, "bank": 0.5, "device": 0.8,
    })
    escalation_delay_days: tuple = (2.0, 40.0)
    active_days: tuple = (5.0, 90.0)
    # log-uniform length of the pre-UE degradation phase
    degradation_days: tuple = (0.01, 3.0)
    # CEs emitted during the degradation phase, denser towards the UE
    degradation_ces: tuple = (3, 12)
    visible_degradation_prob: float = 0.5
    extra_faults_mean: float = 0.2
    sudden_ue_fraction: float = 0.02
    storm_prob: float = 0.01
    storm_size: tuple = (10, 16)
    missing_bitmap_prob: float = 0.01
    # spec sampling
    manufacturer_weights: dict = _default({"A": 0.35, "B": 0.30, "C": 0.20, "D": 0.15})
    x8_fraction: float = 0.2
    capacities: tuple = (16, 32, 64)
    frequencies: tuple = (2400, 2666, 2933, 3200)
    p20nm_fraction: float = 0.3
    max_server_age_days: int = 1800
    # multiplicative escalation risk by static attribute
    age_risk: float = 1.2
    x8_risk: float = 1.2

    def __post_init__(self) -> None:
        if self.n_dimms < 1:
            raise ValueError("n_dimms must be positive")
        if not self.duration_days > 0:
            raise ValueError("duration_days must be positive")
        if set(self.fault_weights) - set(FAULT_TYPES):
            raise ValueError(f"unknown fault types {set(self.fault_weights) - set(FAULT_TYPES)}")
        if not math.isclose(sum(self.fault_weights.values()), 1.0, abs_tol=1e-9):
            raise ValueError("fault weights must sum to 1")
        if any(w < 0 for w in self.fault_weights.values()):
            raise ValueError("fault weights must be non-negative")
        for ft in FAULT_TYPES:
            if not self.ce_rate.get(ft, 1.0) > 0:
                raise ValueError(f"CE rate for {ft} must be positive")
            if not 0 <= self.escalation_prob.get(ft, 0.0) <= 1:
                raise ValueError(f"escalation probability for {ft} must lie in [0, 1]")
        for name in ("escalation_delay_days", "active_days", "degradation_days", "degradation_ces", "storm_size"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative (low, high) range")
        if self.degradation_days[0] <= 0:
            raise ValueError("degradation_days must be positive")
        for name in ("visible_degradation_prob", "sudden_ue_fraction", "storm_prob", "missing_bitmap_prob", "x8_fraction", "p20nm_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InjectedFault:
    fault_type: str
    # (rank, device, bank_group, bank, row, column); fields the fault type varies are only the first draw
    coords: tuple
    onset: int
    end: int
    escalates: bool
    ue_ts: int | None = None
    ce_count: int = 0


@dataclass
class DimmTruth:
    dimm_id: str
    faults: list[InjectedFault]
    ue_ts: int | None
    sudden: bool = False


@dataclass
class GroundTruth:
    dimms: dict[str, DimmTruth]
    # index into dimms[d].faults for every generated CE, aligned with the CE list
    ce_fault: list[tuple[str, int]] = field(default_factory=list)

    def dumps(self) -> str:
        lines = []
        for d in sorted(self.dimms):
            rec = asdict(self.dimms[d])
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"


@dataclass
class Fleet:
    ces: list[CEEvent]
    ues: list[UEEvent]
    specs: dict[str, DimmSpec]
    truth: GroundTruth
    config: GeneratorConfig

    @property
    def start(self) -> int:
        return self.config.start_ts

    @property
    def end(self) -> int:
        return self.config.start_ts + int(self.config.duration_days * DAY)

    def event_log(self, meta: dict | None = None) -> str:
        return serialize_events(self.ces, self.ues, meta)

    def spec_table(self, comment: str | None = None) -> str:
        return dump_dimm_specs([self.specs[d] for d in sorted(self.specs)], comment)


def _pick(rng: np.random.Generator, weights: dict) -> str:
    keys = sorted(weights)
    p = np.array([weights[k] for k in keys], dtype=np.float64)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def _uniform(rng: np.random.Generator, lo_hi: tuple) -> float:
    lo, hi = lo_hi
    return float(lo) if hi == lo else float(rng.uniform(lo, hi))


def _sample_spec(rng: np.random.Generator, dimm_id: str, cfg: GeneratorConfig) -> DimmSpec:
    return DimmSpec(
        dimm_id=dimm_id,
        manufacturer=_pick(rng, cfg.manufacturer_weights),
        capacity_gb=int(rng.choice(cfg.capacities)),
        data_width="x8" if rng.random() < cfg.x8_fraction else "x4",
        frequency_mhz=int(rng.choice(cfg.frequencies)),
        process_class="p20nm" if rng.random() < cfg.p20nm_fraction else "other",
        server_age_days=int(rng.integers(0, cfg.max_server_age_days + 1)),
    )


def _degraded_bitmap(rng: np.random.Generator, w: int, severity: float, anchor: tuple[int, int], visible: bool) -> ErrorBitmap:
    """Bits spreading from the anchor as a fault degrades towards a UE.

    Visible degradation grows across beat halves and up to four DQs (the
    default risky rules catch it); subtle degradation stays inside the
    anchor's beat half on at most two non-neighbouring DQs.
    """
    d0, b0 = anchor
    half = 0 if b0 < 4 else 4
    cells = {anchor}
    if visible:
        n_dq = min(w, 1 + int(rng.binomial(3, 0.3 + 0.5 * severity)))
        n_beat = 2 + int(rng.binomial(4, 0.3 + 0.4 * severity))
        dq_lo = min(d0, w - n_dq)
        dqs = range(dq_lo, dq_lo + n_dq)
        beats = rng.choice(BEATS, size=min(n_beat, BEATS), replace=False)
        for d in dqs:
            for b in beats:
                if rng.random() < 0.4 + 0.4 * severity:
                    cells.add((d, int(b)))
    else:
        other = (d0 + 2 + int(rng.integers(0, w - 3))) % w
        n_beat = 1 + int(rng.binomial(2, 0.3 + 0.5 * severity))
        for b in rng.choice(np.arange(half, half + 4), size=n_beat, replace=False):
            cells.add((other if rng.random() < 0.6 else d0, int(b)))
        if rng.random() < severity:
            cells.add((other, b0))
    return ErrorBitmap.from_cells(w, cells)


def _bitmap(rng: np.random.Generator, w: int, ft: str, anchor: tuple[int, int]) -> ErrorBitmap:
    """Steady-state bitmap profile of a fault type."""
    d0, b0 = anchor
    cells: set[tuple[int, int]] = set()
    if ft in ("transient_cell", "stuck_cell"):
        cells.add(anchor)
    elif ft in ("row", "column"):
        cells.add(anchor)
        if rng.random() < 0.3:
            # a second bit inside the same beat half
            half = 0 if b0 < 4 else 4
            cells.add((d0, int(rng.integers(half, half + 4))))
    elif ft == "bank":
        cells.add(anchor)
        for _ in range(int(rng.integers(0, 3))):
            cells.add((d0, int(rng.integers(0, BEATS))))
    else:  # device
        dqs = [d0] if rng.random() < 0.6 else [d0, (d0 + int(rng.integers(1, w))) % w]
        for d in dqs:
            for b in rng.choice(BEATS, size=int(rng.integers(1, 5)), replace=False):
                cells.add((d, int(b)))
        if rng.random() < 0.03:
            # rare three-DQ noise on healthy devices
            cells.add(((d0 + 2) % w, b0))
            cells.add(((d0 + 3) % w, b0))
    return ErrorBitmap.from_cells(w, cells)


class _DimmGen:
    def __init__(self, rng: np.random.Generator, dimm_id: str, spec: DimmSpec, cfg: GeneratorConfig, slot: tuple):
        self.rng, self.dimm_id, self.spec, self.cfg, self.slot = rng, dimm_id, spec, cfg, slot
        self.w = spec.dq_width
        self.n_devices = 18 if self.w == 4 else 9

    def fault(self, ft: str, t0: int, t1: int) -> InjectedFault:
        rng, cfg = self.rng, self.cfg
        onset = int(rng.integers(t0, t1))
        end = onset + int(_uniform(rng, cfg.active_days) * DAY)
        coords = (
            int(rng.integers(0, 2)), int(rng.integers(0, self.n_devices)), int(rng.integers(0, 4)),
            int(rng.integers(0, 4)), int(rng.integers(0, 1 << 17)), int(rng.integers(0, 1 << 10)),
        )
        p = cfg.escalation_prob.get(ft, 0.0)
        if self.spec.server_age_days > 730:
            p *= cfg.age_risk
        if self.spec.data_width == "x8":
            p *= cfg.x8_risk
        escalates = bool(rng.random() < min(p, 1.0))
        ue_ts = None
        if escalates:
            ue_ts = onset + max(1, int(_uniform(rng, cfg.escalation_delay_days) * DAY))
            end = ue_ts
        return InjectedFault(ft, coords, onset, end, escalates, ue_ts)

    def address(self, f: InjectedFault, pools: dict) -> MemoryAddress:
        rng = self.rng
        rk, dev, bg, bk, row, col = f.coords
        ft = f.fault_type
        if ft == "transient_cell":
            rk, dev = int(rng.integers(0, 2)), int(rng.integers(0, self.n_devices))
            bg, bk = int(rng.integers(0, 4)), int(rng.integers(0, 4))
            row, col = int(rng.integers(0, 1 << 17)), int(rng.integers(0, 1 << 10))
        elif ft == "row":
            col = int(rng.integers(0, 1 << 10))
        elif ft == "column":
            row = int(rng.integers(0, 1 << 17))
        elif ft in ("bank", "device"):
            if ft == "device":
                bg, bk = pools["banks"][int(rng.integers(0, len(pools["banks"])))]
            row = pools["rows"][int(rng.integers(0, len(pools["rows"])))]
            col = pools["cols"][int(rng.integers(0, len(pools["cols"])))]
        return MemoryAddress(*self.slot, rk, dev, bg, bk, row, col)

    def emit(self, f: InjectedFault, horizon: int) -> list[tuple[int, MemoryAddress, ErrorBitmap | None]]:
        rng, cfg = self.rng, self.cfg
        pools = {
            "rows": [int(v) for v in rng.integers(0, 1 << 17, size=5)],
            "cols": [int(v) for v in rng.integers(0, 1 << 10, size=5)],
            "banks": [(int(a), int(b)) for a, b in rng.integers(0, 4, size=(4, 2))],
        }
        anchor = (int(rng.integers(0, self.w)), int(rng.integers(0, BEATS)))
        stop = min(f.end, horizon)
        rate = cfg.ce_rate[f.fault_type] / DAY
        degrade_from = stop + 1
        visible = rng.random() < cfg.visible_degradation_prob
        if f.escalates:
            lo, hi = cfg.degradation_days
            span = lo if hi == lo else math.exp(rng.uniform(math.log(lo), math.log(hi)))
            degrade_from = max(f.ue_ts - max(60, int(span * DAY)), f.onset)
        times = []
        t = float(f.onset)
        while True:
            t += rng.exponential(1.0 / rate)
            if t >= min(stop, degrade_from):
                break
            times.append(int(t))
        if f.escalates and degrade_from < stop:
            n = int(rng.integers(cfg.degradation_ces[0], cfg.degradation_ces[1] + 1))
            length = f.ue_ts - degrade_from
            times.extend(sorted(degrade_from + int(length * math.sqrt(u)) for u in rng.random(n)))
        out = []
        for ts in times:
            if f.escalates and ts >= degrade_from:
                severity = min(1.0, max(0.05, (ts - degrade_from) / max(1, f.ue_ts - degrade_from)))
            else:
                severity = 0.0
            burst = 1
            if severity == 0.0 and rng.random() < cfg.storm_prob:
                burst = int(rng.integers(cfg.storm_size[0], cfg.storm_size[1] + 1))
            ets = ts
            for k in range(burst):
                if k:
                    ets += int(rng.integers(1, 240))
                if ets >= stop:
                    break
                if rng.random() < cfg.missing_bitmap_prob:
                    bm = None
                elif severity > 0:
                    bm = _degraded_bitmap(rng, self.w, severity, anchor, visible)
                else:
                    bm = _bitmap(rng, self.w, f.fault_type, anchor)
                out.append((ets, self.address(f, pools), bm))
        return out


def generate(cfg: GeneratorConfig = GeneratorConfig()) -> Fleet:
    """Generate a fleet; identical configs give identical fleets."""
    if not cfg.duration_days > 0:
        raise ValueError("duration must be positive")
    start, end = cfg.start_ts, cfg.start_ts + int(cfg.duration_days * DAY)
    width = len(str(cfg.n_dimms - 1))
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_dimms)
    ces: list[CEEvent] = []
    ues: list[UEEvent] = []
    specs: dict[str, DimmSpec] = {}
    truth = GroundTruth({})
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        dimm_id = f"DIMM{i:0{width}d}"
        spec = _sample_spec(rng, dimm_id, cfg)
        specs[dimm_id] = spec
        slot = (int(rng.integers(0, 2)), int(rng.integers(0, 6)), int(rng.integers(0, 2)))
        gen = _DimmGen(rng, dimm_id, spec, cfg, slot)
        if rng.random() < cfg.sudden_ue_fraction:
            ue_ts = int(rng.integers(start, end))
            truth.dimms[dimm_id] = DimmTruth(dimm_id, [], ue_ts, sudden=True)
            ues.append(UEEvent(ue_ts, dimm_id))
            continue
        n_faults = 1 + int(rng.poisson(cfg.extra_faults_mean))
        faults = [gen.fault(_pick(rng, cfg.fault_weights), start, end) for _ in range(n_faults)]
        scheduled = [f.ue_ts for f in faults if f.escalates]
        ue_ts = min(scheduled) if scheduled else None
        horizon = min(end, ue_ts) if ue_ts is not None else end
        emitted = []
        for k, f in enumerate(faults):
            for ts, addr, bm in gen.emit(f, horizon):
                emitted.append((ts, k, addr, bm))
                f.ce_count += 1
        emitted.sort(key=lambda x: (x[0], x[1]))
        seen = set()
        for ts, k, addr, bm in emitted:
            if (ts, addr, bm) in seen:
                # an exact duplicate would be dropped by the log parser
                faults[k].ce_count -= 1
                continue
            seen.add((ts, addr, bm))
            ces.append(CEEvent(ts, dimm_id, addr, bm))
            truth.ce_fault.append((dimm_id, k))
        logged_ue = ue_ts if ue_ts is not None and ue_ts < end else None
        truth.dimms[dimm_id] = DimmTruth(dimm_id, faults, logged_ue)
        if logged_ue is not None:
            ues.append(UEEvent(logged_ue, dimm_id))
    return Fleet(ces, ues, specs, truth, cfg)

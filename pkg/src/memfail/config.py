"""Run configuration: one JSON file with optional sections, plus flag overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .faults import LEVELS, FaultThresholds
from .features import LIFETIME, WindowConfig
from .model import Hyperparams
from .risk import DEFAULT_RULES, dump_rules, load_rules
from .synthgen import DAY, GeneratorConfig

_UNITS = {"s": 1, "m": 60, "h": 3600, "d": DAY}
_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([smhd]?)\s*$")
WINDOW_DURATIONS = ("observation", "prediction", "lead", "predict_interval", "aggregation",
                    "label_interval", "storm_window", "fault_window")


class ConfigError(ValueError):
    pass


def parse_duration(value, allow_lifetime: bool = False) -> float:
    """Seconds from ``90``, ``"90"``, ``"15m"``, ``"72h"``, ``"5d"`` (or ``"lifetime"``)."""
    if isinstance(value, bool):
        raise ConfigError(f"bad duration {value!r}")
    if isinstance(value, (int, float)):
        seconds = float(value)
    else:
        text = str(value).strip().lower()
        if text == "lifetime":
            if not allow_lifetime:
                raise ConfigError("'lifetime' is only allowed for the labeling interval")
            return LIFETIME
        m = _DURATION_RE.match(text)
        if not m:
            raise ConfigError(f"bad duration {value!r} (use e.g. 30s, 15m, 72h, 5d)")
        seconds = float(m.group(1)) * _UNITS[m.group(2) or "s"]
    if seconds < 0 or not math.isfinite(seconds):
        raise ConfigError(f"bad duration {value!r}")
    return seconds


def _whole(seconds: float, what: str) -> int:
    if seconds != int(seconds):
        raise ConfigError(f"{what} must be a whole number of seconds")
    return int(seconds)


@dataclass(frozen=True)
class RunConfig:
    window: WindowConfig = WindowConfig()
    faults: FaultThresholds = FaultThresholds()
    model: Hyperparams = Hyperparams()
    generator: GeneratorConfig = GeneratorConfig()
    rules_path: str | None = None
    threshold: float = 0.3
    y_c: float = 0.1
    seed: int = 0
    # train on CEs before start + train_days, evaluate on the rest
    train_days: float = 275.0
    leads: tuple = (1, 900, 3600)
    oversample_ratio: float = 0.3
    threads: int = 1
    rules: tuple = field(default=DEFAULT_RULES, compare=False)

    def __post_init__(self) -> None:
        if not 0 <= self.threshold <= 1:
            raise ConfigError("threshold must lie in [0, 1]")
        if not 0 <= self.y_c <= 1:
            raise ConfigError("y_c must lie in [0, 1]")
        if not 0 < self.train_days < self.generator.duration_days:
            raise ConfigError("train_days must lie strictly inside the generator duration")
        if not self.leads:
            raise ConfigError("at least one lead time is required")
        for lead in self.leads:
            WindowConfig(lead=lead)
        if self.oversample_ratio < 0:
            raise ConfigError("oversample_ratio must be non-negative")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_dict(self) -> dict:
        w = dataclasses.asdict(self.window)
        if w["label_interval"] == LIFETIME:
            w["label_interval"] = "lifetime"
        return {
            "window": w,
            "faults": dataclasses.asdict(self.faults),
            "model": dataclasses.asdict(self.model),
            "generator": self.generator.to_dict(),
            "rules": [json.loads(line) for line in dump_rules(self.rules).splitlines()],
            "threshold": self.threshold,
            "y_c": self.y_c,
            "seed": self.seed,
            "train_days": self.train_days,
            "leads": list(self.leads),
            "oversample_ratio": self.oversample_ratio,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        """Digest of everything that affects outputs (thread count excluded)."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def split_ts(self) -> int:
        return self.generator.start_ts + int(self.train_days * DAY)

    @property
    def end_ts(self) -> int:
        return self.generator.start_ts + int(self.generator.duration_days * DAY)


def _check_keys(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


def _window_from(d: dict) -> WindowConfig:
    _check_keys("window", d, WindowConfig.__dataclass_fields__)
    kw = {}
    for k, v in d.items():
        if k in WINDOW_DURATIONS:
            if v is None and k == "fault_window":
                kw[k] = None
                continue
            sec = parse_duration(v, allow_lifetime=(k == "label_interval"))
            kw[k] = sec if k == "label_interval" else _whole(sec, k)
        else:
            kw[k] = v
    return WindowConfig(**kw)


def _faults_from(d: dict) -> FaultThresholds:
    _check_keys("faults", d, FaultThresholds.__dataclass_fields__)
    comps = d.get("comparators")
    if comps is not None:
        _check_keys("faults.comparators", comps, LEVELS)
        d = {**d, "comparators": {**FaultThresholds().comparators, **comps}}
    return FaultThresholds(**d)


def from_dict(d: dict, base_dir: Path | None = None) -> RunConfig:
    """Build and validate a RunConfig; every unknown key is an error."""
    top = {"window", "faults", "model", "generator", "rules", "threshold", "y_c", "seed",
           "train_days", "split", "leads", "oversample_ratio", "threads", "t_i"}
    _check_keys("config", d, top)
    try:
        window = _window_from(dict(d.get("window", {})))
        if "t_i" in d:
            window = dataclasses.replace(window, label_interval=parse_duration(d["t_i"], allow_lifetime=True))
        faults = _faults_from(dict(d.get("faults", {})))
        model_d = dict(d.get("model", {}))
        _check_keys("model", model_d, Hyperparams.__dataclass_fields__)
        gen_d = dict(d.get("generator", {}))
        _check_keys("generator", gen_d, GeneratorConfig.__dataclass_fields__)
        seed = int(d.get("seed", 0))
        # one seed drives generation, oversampling and training unless a section pins its own
        generator = GeneratorConfig.from_dict({"seed": seed, **gen_d})
        model = Hyperparams(**{"seed": seed, **model_d})
        rules_path, rules = None, DEFAULT_RULES
        if d.get("rules") is not None:
            p = Path(d["rules"])
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            rules_path = str(p)
            rules = load_rules(p.read_text())
        train_days = float(d.get("train_days", 275.0))
        if "split" in d:
            train_days = parse_duration(d["split"]) / DAY
        leads = tuple(_whole(parse_duration(x), "lead") for x in d.get("leads", (1, 900, 3600)))
        return RunConfig(
            window=window, faults=faults, model=model, generator=generator,
            rules_path=rules_path, threshold=float(d.get("threshold", 0.3)),
            y_c=float(d.get("y_c", 0.1)), seed=seed, train_days=train_days, leads=leads,
            oversample_ratio=float(d.get("oversample_ratio", 0.3)),
            threads=int(d.get("threads", 1)), rules=tuple(rules),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError, OSError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config (or defaults when ``path`` is None) and apply flag overrides.

    Overrides use top-level keys (``seed``, ``threshold``, ``t_i``, ``leads``,
    ``threads``); flags win over the file.
    """
    d: dict = {}
    base = None
    if path is not None:
        p = Path(path)
        try:
            d = json.loads(p.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {p}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        base = p.parent
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k == "seed":
            # an explicit seed flag reseeds every stage
            d = {**d, "seed": v}
            for sec in ("generator", "model"):
                if sec in d:
                    d[sec] = {kk: vv for kk, vv in d[sec].items() if kk != "seed"}
        else:
            d = {**d, k: v}
    return from_dict(d, base)


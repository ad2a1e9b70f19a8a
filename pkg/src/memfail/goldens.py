"""Checked-in golden corpus: a pinned small run whose outputs must reproduce byte-exactly."""

from __future__ import annotations

import difflib
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .config import load_config
from .pipeline import analyze_stage, run_pipeline

DEFAULT_DIR = Path(__file__).resolve().parents[2] / "goldens"
RUN_FILE = "run.json"
OUTPUTS = ("config.json", "events.jsonl", "specs.csv", "truth.jsonl", "train.csv", "manifest.json",
           "model.jsonl", "metrics.csv", "rates.csv", "sweeps.csv")


@dataclass
class GoldenReport:
    results: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return bool(self.results) and all(v == "ok" for v in self.results.values())

    def text(self) -> str:
        lines = [f"{'PASS' if v == 'ok' else 'FAIL'} {name}: {v}" for name, v in self.results.items()]
        lines.append("goldens: " + ("PASS" if self.ok else "FAIL"))
        return "\n".join(lines)


def produce(run_file: Path, out: Path, seed: int | None = None) -> None:
    cfg = load_config(run_file, {"seed": seed})
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    run_pipeline(cfg, out)
    analyze_stage(cfg, out / "events.jsonl", out / "specs.csv", out)


def _first_diff(expected: str, actual: str) -> str:
    for line in difflib.unified_diff(expected.splitlines(), actual.splitlines(), lineterm="", n=0):
        if line.startswith(("-", "+")) and not line.startswith(("---", "+++")):
            return line[:120]
    return "content differs"


def verify_goldens(golden_dir: Path | None = None, seed: int | None = None) -> GoldenReport:
    """Re-run the pinned config and compare every golden file; ``seed`` overrides the pinned seed."""
    gdir = Path(golden_dir) if golden_dir is not None else DEFAULT_DIR
    report = GoldenReport()
    run_file = gdir / RUN_FILE
    if not run_file.exists():
        report.results[RUN_FILE] = f"missing in {gdir}"
        return report
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp)
        try:
            produce(run_file, out, seed)
        except Exception as exc:  # any failure to reproduce is a verification failure
            report.results["run"] = f"pipeline failed: {exc}"
            return report
        for name in OUTPUTS:
            exp_path, act_path = gdir / name, out / name
            if not exp_path.exists():
                report.results[name] = "golden file missing"
            elif not act_path.exists():
                report.results[name] = "not produced"
            else:
                exp, act = exp_path.read_bytes(), act_path.read_bytes()
                report.results[name] = "ok" if exp == act else _first_diff(exp.decode(), act.decode())
    return report


def regenerate(golden_dir: Path | None = None) -> None:
    """Overwrite the golden outputs from the pinned run file."""
    gdir = Path(golden_dir) if golden_dir is not None else DEFAULT_DIR
    produce(gdir / RUN_FILE, gdir)

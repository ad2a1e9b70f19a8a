import json
import subprocess
import sys

import pytest

from memfail.cli import run
from memfail.ingest import SPEC_COLUMNS

SMALL = {"generator": {"n_dimms": 150, "duration_days": 60}, "train_days": 40, "model": {"n_trees": 10}}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_pipeline_twice_byte_identical(tmp_path, config, capsys):
    for name in ("a", "b"):
        assert run(["pipeline", "--config", str(config), "--seed", "7", "--out-dir", str(tmp_path / name)]) == 0
    for f in ("metrics.csv", "model.jsonl", "events.jsonl", "train.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    out = capsys.readouterr().out
    assert "stage=pipeline seed=7 config_hash=" in out and "effective config: {" in out


def test_threads_do_not_change_outputs(tmp_path, config):
    assert run(["pipeline", "--config", str(config), "--out-dir", str(tmp_path / "1")]) == 0
    assert run(["pipeline", "--config", str(config), "--threads", "3", "--out-dir", str(tmp_path / "3")]) == 0
    for f in ("metrics.csv", "model.jsonl", "train.csv"):
        assert (tmp_path / "1" / f).read_bytes() == (tmp_path / "3" / f).read_bytes(), f


def test_stages_compose_to_pipeline(tmp_path, config):
    common = ["--config", str(config), "--seed", "2"]
    assert run(["pipeline", *common, "--out-dir", str(tmp_path / "p")]) == 0
    s = tmp_path / "s"
    for stage in ("gen", "featurize", "train", "evaluate"):
        assert run([stage, *common, "--out-dir", str(s)]) == 0
    for f in ("events.jsonl", "train.csv", "model.jsonl", "metrics.csv"):
        assert (tmp_path / "p" / f).read_bytes() == (s / f).read_bytes(), f


def test_evaluate_reports_virr_at_lead(tmp_path, config, capsys):
    out = tmp_path / "o"
    assert run(["pipeline", "--config", str(config), "--out-dir", str(out)]) == 0
    capsys.readouterr()
    assert run(["evaluate", "--config", str(config), "--lead", "15m", "--out-dir", str(out)]) == 0
    text = capsys.readouterr().out
    assert "VIRR" in text and "y_c=0.1" in text
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[1].split(",")[-1] == "virr"
    assert [ln.split(",")[1] for ln in lines[2:]] == ["15m", "15m"]


def test_featurize_empty_log(tmp_path, capsys):
    (tmp_path / "events.jsonl").write_text("")
    (tmp_path / "specs.csv").write_text(",".join(SPEC_COLUMNS) + "\n")
    assert run(["featurize", "--out-dir", str(tmp_path)]) == 0
    err = capsys.readouterr().err
    assert "warning:" in err
    rows = [ln for ln in (tmp_path / "train.csv").read_text().splitlines() if not ln.startswith("#")]
    assert len(rows) == 1  # header only


def test_missing_input_exits_nonzero(tmp_path, capsys):
    assert run(["featurize", "--out-dir", str(tmp_path)]) == 1
    assert run(["evaluate", "--model", str(tmp_path / "nope.jsonl"), "--out-dir", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_bad_config_exits_2_before_work(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"window": {"observation": "5x"}}))
    out = tmp_path / "o"
    assert run(["gen", "--config", str(bad), "--out-dir", str(out)]) == 2
    assert not out.exists()
    assert run(["gen", "--lead", "soon", "--out-dir", str(out)]) == 2
    assert run(["gen", "--threshold", "2", "--out-dir", str(out)]) == 2
    assert "invalid config" in capsys.readouterr().err


def test_train_single_class_fails(tmp_path, config):
    assert run(["gen", "--config", str(config), "--out-dir", str(tmp_path)]) == 0
    assert run(["featurize", "--config", str(config), "--out-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "train.csv").read_text().splitlines()
    header = [i for i, ln in enumerate(lines) if not ln.startswith("#")][0]
    keep = lines[:header + 1] + [ln for ln in lines[header + 1:] if ln.endswith(",0")]
    (tmp_path / "neg.csv").write_text("\n".join(keep) + "\n")
    assert run(["train", "--dataset", str(tmp_path / "neg.csv"), "--out-dir", str(tmp_path)]) == 1


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "memfail.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for stage in ("gen", "featurize", "train", "evaluate", "analyze", "pipeline", "verify-goldens"):
        assert stage in res.stdout


def test_analyze_writes_tables(tmp_path, config):
    assert run(["gen", "--config", str(config), "--out-dir", str(tmp_path)]) == 0
    assert run(["analyze", "--config", str(config), "--out-dir", str(tmp_path)]) == 0
    rates = (tmp_path / "rates.csv").read_text()
    assert "max_error_bits" in rates and "fault_level" in rates
    assert "R1>0" in (tmp_path / "sweeps.csv").read_text()

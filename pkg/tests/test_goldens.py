import shutil

from memfail.cli import run
from memfail.goldens import DEFAULT_DIR, OUTPUTS, RUN_FILE, verify_goldens


def test_checked_in_goldens_reproduce():
    report = verify_goldens()
    assert report.ok, report.text()
    assert set(report.results) == set(OUTPUTS)


def test_perturbed_seed_fails():
    report = verify_goldens(seed=8)
    assert not report.ok
    assert "FAIL events.jsonl" in report.text()


def test_edited_golden_is_detected(tmp_path, capsys):
    gdir = tmp_path / "g"
    shutil.copytree(DEFAULT_DIR, gdir)
    lines = (gdir / "metrics.csv").read_text().splitlines()
    lines[-1] = lines[-1][:-1] + ("0" if lines[-1][-1] != "0" else "1")
    (gdir / "metrics.csv").write_text("\n".join(lines) + "\n")
    assert run(["verify-goldens", "--goldens", str(gdir)]) == 1
    out = capsys.readouterr().out
    assert "FAIL metrics.csv" in out and "PASS model.jsonl" in out


def test_missing_run_file(tmp_path):
    report = verify_goldens(tmp_path)
    assert not report.ok and RUN_FILE in report.results


def test_golden_virr_column_matches_formula():
    from memfail.evaluate import virr
    for name in ("metrics.csv", "sweeps.csv"):
        rows = [ln.split(",") for ln in (DEFAULT_DIR / name).read_text().splitlines()[2:]]
        assert rows
        for r in rows:
            p, rec, v = float(r[7]), float(r[8]), float(r[10])
            if p > 0:
                assert abs(virr(p, rec, 0.1) - v) < 5e-6


def test_goldens_are_small():
    assert sum(p.stat().st_size for p in DEFAULT_DIR.iterdir()) <= 5 * 1024 * 1024

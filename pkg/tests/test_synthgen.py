import math

import numpy as np
import pytest

from memfail.ingest import parse_events
from memfail.risk import DEFAULT_RULES, match_rules
from memfail.synthgen import DAY, FAULT_TYPES, GeneratorConfig, generate


def only(ft, **kw):
    weights = {t: 0.0 for t in FAULT_TYPES}
    weights[ft] = 1.0
    base = dict(fault_weights=weights, extra_faults_mean=0.0, sudden_ue_fraction=0.0,
                storm_prob=0.0, missing_bitmap_prob=0.0)
    base.update(kw)
    return GeneratorConfig(**base)


def test_deterministic_bytes():
    cfg = GeneratorConfig(n_dimms=80, duration_days=60, seed=5)
    a, b = generate(cfg), generate(cfg)
    assert a.event_log() == b.event_log()
    assert a.spec_table() == b.spec_table() and a.truth.dumps() == b.truth.dumps()
    assert generate(GeneratorConfig(n_dimms=80, duration_days=60, seed=6)).event_log() != a.event_log()


def test_log_parses_back():
    fleet = generate(GeneratorConfig(n_dimms=60, duration_days=60, seed=2))
    parsed = parse_events(fleet.event_log())
    assert parsed.ces == fleet.ces and parsed.ues == fleet.ues and not parsed.warnings


def test_single_stuck_cell_one_address_no_ue():
    fleet = generate(only("stuck_cell", n_dimms=1, duration_days=120, seed=0,
                          escalation_prob={t: 0.0 for t in FAULT_TYPES}))
    assert fleet.ces and not fleet.ues
    assert len({e.address for e in fleet.ces}) == 1


def test_escalating_fault_ue_after_delay():
    n_checked = 0
    for seed in range(20):
        cfg = only("row", n_dimms=1, duration_days=60, seed=seed,
                   escalation_prob={t: 1.0 for t in FAULT_TYPES}, escalation_delay_days=(1.0, 1.0))
        fleet = generate(cfg)
        (truth,) = fleet.truth.dimms.values()
        f = truth.faults[0]
        assert f.escalates and f.ue_ts == f.onset + DAY
        if f.ue_ts < fleet.end:
            n_checked += 1
            assert [u.ts for u in fleet.ues] == [f.ue_ts]
            assert all(e.ts < f.ue_ts for e in fleet.ces)
        else:
            assert not fleet.ues  # censored by the end of the run
    assert n_checked > 10


@pytest.mark.parametrize("bad", [
    dict(duration_days=0), dict(n_dimms=0),
    dict(fault_weights={"row": 0.5}),
    dict(fault_weights={"row": 1.5, "column": -0.5}),
    dict(fault_weights={"nope": 1.0}),
    dict(ce_rate={"row": 0.0}),
    dict(escalation_prob={"row": 1.2}),
    dict(sudden_ue_fraction=-0.1),
    dict(degradation_days=(0.0, 1.0)),
])
def test_invalid_config_rejected(bad):
    with pytest.raises(ValueError):
        generate(GeneratorConfig(**bad))


def test_from_dict_rejects_unknown():
    with pytest.raises(ValueError):
        GeneratorConfig.from_dict({"n_dimm": 3})
    assert GeneratorConfig.from_dict({"storm_size": [3, 4]}).storm_size == (3, 4)


def test_every_ce_traces_to_one_fault(small_fleet):
    truth = small_fleet.truth
    assert len(truth.ce_fault) == len(small_fleet.ces)
    counts = {}
    for e, (d, k) in zip(small_fleet.ces, truth.ce_fault):
        assert e.dimm_id == d and 0 <= k < len(truth.dimms[d].faults)
        counts[(d, k)] = counts.get((d, k), 0) + 1
    for d, t in truth.dimms.items():
        for k, f in enumerate(t.faults):
            assert counts.get((d, k), 0) == f.ce_count
    for u in small_fleet.ues:
        assert truth.dimms[u.dimm_id].ue_ts == u.ts


def test_device_faults_match_rule_a_more_than_cells():
    rate = {}
    for ft in ("device", "stuck_cell"):
        fleet = generate(only(ft, n_dimms=150, duration_days=60, seed=4,
                              escalation_prob={t: 0.0 for t in FAULT_TYPES}))
        hits = [bool(match_rules(e.bitmap, DEFAULT_RULES[:1])) for e in fleet.ces if e.bitmap]
        rate[ft] = sum(hits) / len(hits)
    assert rate["device"] > rate["stuck_cell"]


def test_ce_counts_near_poisson_mean():
    days = 1000.0
    cfg = only("stuck_cell", n_dimms=200, duration_days=days, seed=9, active_days=(days, days),
               escalation_prob={t: 0.0 for t in FAULT_TYPES})
    fleet = generate(cfg)
    lam = cfg.ce_rate["stuck_cell"]
    for t in fleet.truth.dimms.values():
        f = t.faults[0]
        mean = lam * (min(f.end, fleet.end) - f.onset) / DAY
        if mean > 20:
            assert abs(f.ce_count - mean) <= 3 * math.sqrt(mean) + 3
    total_mean = sum(lam * (fleet.end - t.faults[0].onset) / DAY for t in fleet.truth.dimms.values())
    total = sum(t.faults[0].ce_count for t in fleet.truth.dimms.values())
    assert abs(total - total_mean) <= 3 * math.sqrt(total_mean)


def test_sudden_ues_have_no_ces():
    fleet = generate(GeneratorConfig(n_dimms=300, duration_days=60, seed=1, sudden_ue_fraction=0.2))
    sudden = {d for d, t in fleet.truth.dimms.items() if t.sudden}
    assert sudden and not sudden & {e.dimm_id for e in fleet.ces}
    assert sudden <= {u.dimm_id for u in fleet.ues}


def test_ces_within_run_and_sorted_per_dimm(small_fleet):
    ts = np.array([e.ts for e in small_fleet.ces])
    assert ts.min() >= small_fleet.start and ts.max() < small_fleet.end

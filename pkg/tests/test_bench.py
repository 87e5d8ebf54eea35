import csv
import io
import json

import numpy as np
import pytest

from visric.bench import (REFERENCE_SUPPORT, BenchConfig, BenchReport, Cell, CellReport, LatencyRecord, Thresholds,
                          check_fifo, frontier_violations, nearest_rank, run_cell, run_repetition, run_sweep,
                          summarize, trend_violations)


def recs_ms(*ms):
    return [LatencyRecord(1, i, 0, int(m * 1_000_000)) for i, m in enumerate(ms)]


def test_summary_one_to_five():
    s = summarize(recs_ms(1, 2, 3, 4, 5))
    assert (s.count, s.mean_ms, s.p50_ms, s.max_ms) == (5, 3.0, 3.0, 5.0)


def test_summary_all_equal():
    s = summarize(recs_ms(*[0.25] * 100))
    assert s.mean_ms == s.p50_ms == s.p95_ms == s.p99_ms == s.max_ms == 0.25


def test_summary_empty_raises():
    with pytest.raises(ValueError):
        summarize([])


def test_summary_against_sort_oracle():
    rng = np.random.default_rng(11)
    d = rng.integers(1_000, 10_000_000, size=100_000)
    s = summarize(d)
    srt = sorted(d.tolist())
    n = len(srt)
    # nearest rank: the ceil(p/100 * n)-th smallest value
    for p, got in ((50, s.p50_ms), (95, s.p95_ms), (99, s.p99_ms)):
        k = -(-p * n // 100)
        assert got == srt[k - 1] / 1e6
    assert s.mean_ms == pytest.approx(sum(srt) / n / 1e6, rel=1e-12)
    assert s.max_ms == srt[-1] / 1e6


def test_nearest_rank_small():
    a = np.array([10, 20, 30, 40])
    assert [nearest_rank(a, p) for p in (1, 25, 26, 50, 75, 100)] == [10, 10, 20, 20, 30, 40]


def test_fifo_check():
    ok = np.array([[1, 1, 0, 0], [2, 1, 0, 0], [1, 2, 0, 0], [2, 5, 0, 0]])
    bad = np.array([[1, 2, 0, 0], [1, 1, 0, 0]])
    assert check_fifo(ok) and not check_fifo(bad) and check_fifo(np.zeros((0, 4)))


@pytest.mark.parametrize("kw", [dict(rates_per_agent=(0,)), dict(duration_s=0.5), dict(repetitions=0),
                                dict(agents=()), dict(mode="diagonal"), dict(agents=(0,))])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        BenchConfig(**kw)


def test_cell_validation():
    with pytest.raises(ValueError):
        Cell(1, 16, 0)


def test_views_cover_one_factor_sweeps():
    cfg = BenchConfig(agents=(1, 2), sizes_bytes=(16, 64), rates_per_agent=(500, 1000))
    keys = {(c.agents, c.size_bytes, c.rate_per_agent) for c in cfg.cells()}
    assert keys == {(1, 16, 1000), (1, 64, 1000), (2, 16, 1000), (2, 64, 1000), (1, 16, 500), (2, 16, 500)}
    assert len(BenchConfig(agents=(1, 2), sizes_bytes=(16, 64), rates_per_agent=(500, 1000),
                           mode="grid").cells()) == 8


def test_config_roundtrip():
    cfg = BenchConfig(agents=(2,), thresholds=Thresholds(2.0, 9.0, 1))
    assert BenchConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# --------------------------------------------------------------------------- runs


@pytest.mark.slow
def test_two_agents_count_arithmetic():
    r = run_repetition(Cell(2, 16, 1000), duration_s=2.0)
    assert r.valid and r.invariants_ok, (r.error, r.audit)
    # 2 agents x 1000 msg/s x 2 s
    assert r.sent == 4000 == sum(s.sent_count for s in r.send_reports)
    assert r.received == 4000 and r.loss == 0
    assert r.stats.count == 4000 and r.stats.mean_ms > 0
    assert {s.wire_size for s in r.send_reports} == {49}


def _fake(cell, mean, supported=True, valid=True):
    return CellReport(cell, [], mean, mean, mean, mean, mean, 0, 0, supported, valid, True)


def test_trend_checker():
    cfg = BenchConfig()
    rep = BenchReport(cfg, [_fake(Cell(1, 16, 500), 1.0), _fake(Cell(1, 16, 5000), 0.7),
                            _fake(Cell(2, 16, 500), 0.9), _fake(Cell(2, 64, 1000), 0.1)])
    bad = trend_violations(rep, 0.8)
    # only the rate pair drops below 0.8x; 0.9 is within tolerance; (2,64,1000) differs in two factors
    assert len(bad) == 1 and "5000" in bad[0]


def test_frontier_checker():
    cfg = BenchConfig()
    rep = BenchReport(cfg, [_fake(Cell(1, 16, 500), 1.0, supported=False), _fake(Cell(1, 16, 1000), 1.0)])
    assert len(frontier_violations(rep)) == 1
    rep.cells[0].valid = False  # invalid cells do not count against the frontier
    assert frontier_violations(rep) == []


@pytest.mark.slow
def test_throttled_broker_frontier():
    # 1 ms of routing work per message caps the broker near 1000 msg/s
    th = Thresholds(mean_ms=5.0, p99_ms=20.0)
    cells = [Cell(1, 16, 200), Cell(2, 16, 200), Cell(1, 16, 2000)]
    reports = [run_cell(c, 1.0, 1, th, route_delay_us=1000.0) for c in cells]
    rep = BenchReport(BenchConfig(route_delay_us=1000.0), reports)
    assert rep.cell(1, 16, 200).supported
    assert not rep.cell(1, 16, 2000).supported
    assert rep.cell(1, 16, 2000).mean_ms > rep.cell(1, 16, 200).mean_ms
    assert frontier_violations(rep) == []
    assert rep.invariants_ok


@pytest.mark.slow
def test_sweep_outputs(tmp_path):
    cfg = BenchConfig(agents=(1,), sizes_bytes=(16,), rates_per_agent=(500,), duration_s=1.0, repetitions=2,
                      fixed_rate=500, keep_raw=True)
    rep = run_sweep(cfg)
    paths = rep.write(tmp_path)
    rows = list(csv.DictReader(io.StringIO(paths["cells.csv"].read_text())))
    assert [r["repetition"] for r in rows] == ["0", "1", "agg"]
    assert rows[0]["wire_size_bytes"] == "49"
    assert int(rows[2]["count"]) == 1000
    for name in ("latency_vs_size.csv", "latency_vs_agents.csv", "latency_vs_rate.csv"):
        assert paths[name].read_text().splitlines()[0].endswith("mean_ms,p99_ms,supported")
    doc = json.loads(paths["report.json"].read_text())
    assert doc["reference_support"] == REFERENCE_SUPPORT
    assert doc["cells"][0]["hosts"] and doc["host"]["cpu_count"] >= 1
    raw = paths["raw_records.csv"].read_text().splitlines()
    assert len(raw) == 1 + 1000

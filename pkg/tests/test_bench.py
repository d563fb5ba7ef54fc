import csv
import random

import pytest
from hypothesis import given, strategies as st

from livekv.bench.cli import _points, main as bench_main
from livekv.bench.experiments import scaling_run, verify_deadlock
from livekv.bench.runner import parse_addr, run_bench
from livekv.bench.stats import (BIN_US, RECORD_FIELDS, SYNC_FIELDS, Record, bin_counts, bin_index,
                                format_summary, linear_fit, percentile, read_records, read_syncs,
                                summarize, summarize_records, window_max, write_records)
from livekv.bench.workload import (PatchEvent, PatchSchedule, Periodic, WorkloadError,
                                   WorkloadSpec, parse_offsets, parse_workload)


def rec(ts, lat, term=0, gen=0, ok=True):
    return Record(ts, term, "PING", lat, gen, ok)


def test_nearest_rank_oracle():
    vals = list(range(1, 101))
    assert percentile(vals, 50) == 50
    assert percentile(vals, 99) == 99
    assert percentile(vals, 99.95) == 100
    assert percentile([7], 50) == 7
    with pytest.raises(ValueError):
        percentile([], 50)


@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=300), st.floats(0.1, 100))
def test_percentile_matches_sort_oracle(vals, p):
    s = sorted(vals)
    got = percentile(s, p)
    # nearest rank: smallest value with at least p% of samples at or below it
    oracle = next(v for v in s if sum(x <= v for x in s) * 100 >= p * len(s) - 1e-6)
    assert got == oracle


def test_equal_latencies():
    s = summarize_records([rec(i * 10, 42) for i in range(50)])
    assert s.p50 == s.p99 == s.p9995 == s.max == 42
    assert s.extremes == []


def test_bin_convention():
    assert bin_index(99_999) == 0
    assert bin_index(100_000) == 1
    assert BIN_US == 100_000
    assert bin_counts([rec(0, 1), rec(100_000, 1), rec(250_000, 1)], 0.5) == [1, 1, 1, 0, 0]


def test_summary_fields_and_extremes():
    recs = [rec(i * 1000, 100) for i in range(3000)] + [rec(5_000, 90_000, term=3)]
    s = summarize_records(recs, 3.0)
    assert s.count == 3001 and s.max == 90_000
    assert [r.latency_us for r in s.extremes] == [90_000]
    assert s.throughput == pytest.approx(3001 / 3.0)
    text = format_summary(s)
    assert "p99_95_us=" in text and "extreme ts_us=5000 terminal=3" in text
    with pytest.raises(ValueError):
        summarize_records([])


def test_summarize_deterministic(tmp_path):
    rng = random.Random(5)
    recs = [rec(i * 37, rng.randint(50, 5000), term=i % 4) for i in range(2000)]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_records(a, recs)
    write_records(b, list(read_records(a)))
    assert a.read_bytes() == b.read_bytes()
    assert format_summary(summarize(a)) == format_summary(summarize(b))
    with open(a) as f:
        assert f.readline().strip() == ",".join(RECORD_FIELDS)


def test_window_max_and_fit():
    recs = [rec(0, 5), rec(1_000_000, 50), rec(2_600_000, 500)]
    assert window_max(recs, 1_000_000, 1_500_000) == 50
    assert window_max(recs, 10_000_000, 1) == 0
    slope, icpt, r2 = linear_fit([1, 2, 3, 4], [2, 4, 6, 8])
    assert slope == pytest.approx(2) and icpt == pytest.approx(0) and r2 == pytest.approx(1)


def test_workload_parsing():
    assert parse_workload("noop").kind == "noop"
    assert parse_workload("kvmix:90").read_pct == 90
    w = parse_workload("txnmix:4:16")
    assert (w.ops_per_txn, w.lock_keys) == (4, 16)
    w = parse_workload("olap:500..5000")
    assert (w.sleep_lo_ms, w.sleep_hi_ms) == (500, 5000)
    assert parse_workload("noop").probe_interval == 1 and w.probe_interval == 10
    for bad in ("kvmix", "olap:5..", "fly"):
        with pytest.raises(WorkloadError):
            parse_workload(bad)
    with pytest.raises(WorkloadError):
        WorkloadSpec(terminals=0)
    with pytest.raises(WorkloadError):
        WorkloadSpec("kvmix", read_pct=101)
    assert parse_offsets("5,10,15") == [5.0, 10.0, 15.0]
    assert _points("1k,2k,4096") == [1024, 2048, 4096]


def test_txnmix_units_lock_in_order():
    w = WorkloadSpec("txnmix", ops_per_txn=5, lock_keys=8)
    units = w.units(0)
    for _ in range(50):
        u = next(units)
        assert u[0] == "BEGIN" and u[-1] == "COMMIT"
        keys = [int(c.split()[1][1:]) for c in u[1:-1]]
        assert keys == sorted(set(keys))


def test_schedule():
    s = PatchSchedule([PatchEvent(5, "builtin:p1-render-4k", "global")],
                      Periodic(100, 3, "local"))
    s.validate(30)
    fires = s.fire_times()
    assert [f[0] for f in fires] == [0.0, 0.1, 0.2, 5]
    assert fires[0][1] == "builtin:noop"
    with pytest.raises(WorkloadError):
        PatchSchedule([PatchEvent(40, "x", "global")]).validate(30)
    with pytest.raises(WorkloadError):
        PatchSchedule([PatchEvent(1, "x", "sideways")]).validate(30)


def test_parse_addr():
    assert parse_addr("127.0.0.1:7474") == ("127.0.0.1", 7474)
    assert parse_addr("[::1]:80") == ("::1", 80)
    with pytest.raises(ValueError):
        parse_addr("nohost")


def test_run_bench_outputs(start_server, tmp_path):
    srv = start_server(policy="otpc")
    spec = WorkloadSpec("kvmix", terminals=3, duration_s=1.5, warmup_s=0.3, read_pct=80)
    sched = PatchSchedule([PatchEvent(0.5, "builtin:p1-render-4k", "local"),
                           PatchEvent(1.0, "builtin:p2-upper-16k", "global")])
    res = run_bench(srv.address, spec, sched, tmp_path)
    assert res.records and all(0 <= r.ts_us < 1_500_000 for r in res.records)  # warm-up excluded
    assert res.sent == len(res.records) + res.in_flight
    assert res.schedule_errors == []
    assert [r["method"] for r in res.syncs] == ["local", "global"]
    rows = read_syncs(tmp_path / "syncs.csv")
    assert len(rows) == 2 and tuple(rows[0]) == SYNC_FIELDS
    assert rows[0]["clone_us"] != "" and rows[1]["clone_us"] == ""
    assert all(r.ok for r in res.records)
    summary = (tmp_path / "summary.txt").read_text()
    assert f"sent={res.sent}" in summary and "syncs=2" in summary
    for versions in res.versions.values():
        gens = [g for _, g in versions]
        assert gens == sorted(gens)


def test_run_bench_records_schedule_errors(start_server):
    srv = start_server(policy="otpc")
    spec = WorkloadSpec("noop", terminals=1, duration_s=0.5, warmup_s=0.1)
    sched = PatchSchedule([PatchEvent(0.1, "builtin:x1-process-4k", "local")])
    res = run_bench(srv.address, spec, sched)
    assert res.syncs == [] and len(res.schedule_errors) == 1
    assert "422" in res.schedule_errors[0]


def test_verify_deadlock_priority_single_run():
    tally = verify_deadlock("priority", 1)
    assert tally.deadlocks == 0 and tally.synchronized == 1
    assert tally.sync_times_us[0] < 50_000 + 2 * 20_000  # contention pauses included


def test_scaling_single_point(tmp_path):
    out = tmp_path / "scaling.csv"
    rows = scaling_run("patchsize", [4096], out, reps=2)
    assert [r["method"] for r in rows] == ["global", "local"]
    with open(out) as f:
        assert len(list(csv.DictReader(f))) == 2


def test_cli_summarize(tmp_path, capsys):
    path = tmp_path / "records.csv"
    write_records(path, [rec(i * 1000, i + 1) for i in range(100)])
    assert bench_main(["summarize", str(path)]) == 0
    out = capsys.readouterr().out
    assert "p50_us=50" in out and "records=100" in out
    assert bench_main(["summarize", str(tmp_path / "missing.csv")]) == 2

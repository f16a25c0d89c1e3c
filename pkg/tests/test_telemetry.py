from __future__ import annotations

import math
import random
import statistics

import pytest
from hypothesis import given, settings, strategies as st

from ranorch.errors import NoHistory, UnknownProfile
from ranorch.telemetry import (
    LoadEvent,
    PerformanceModel,
    TestRecord,
    TestStore,
    UeSeries,
    compare_baseline,
    export_csv,
    summarize,
    synthesize_performance,
)


@pytest.fixture(scope="module")
def model():
    return PerformanceModel.load()


def _record(scenario=1, stack="oai", profile="gh200-arc", ue="u1", start=0.0, values=(1.0, 2.0)):
    s = UeSeries(ue, [float(i + 1) for i in range(len(values))], list(values), [18.0] * len(values))
    return TestRecord(scenario, stack, profile, "dl", "sierra", start, start + len(values), [s])


def test_calibrated_anchor_mean(model):
    s = synthesize_performance(model, "gh200-arc", "sierra", "dl", 60, seed=1)
    assert len(s) == 60
    assert abs(s.mean_throughput - 275) / 275 < 0.05
    assert abs(statistics.fmean(s.rtt_ms) - 18) / 18 < 0.05


def test_zero_duration_empty(model):
    assert len(synthesize_performance(model, "gh200-arc", "sierra", "dl", 0, seed=1)) == 0


def test_seed_determinism(model):
    a = synthesize_performance(model, "gigabyte-arc", "sierra", "ul", 60, seed=5)
    b = synthesize_performance(model, "gigabyte-arc", "sierra", "ul", 60, seed=5)
    c = synthesize_performance(model, "gigabyte-arc", "sierra", "ul", 60, seed=6)
    assert a == b and a != c


def test_unknown_profile(model):
    with pytest.raises(UnknownProfile):
        synthesize_performance(model, "nope", "sierra", "dl", 10, seed=1)


def test_offered_rate_caps(model):
    s = synthesize_performance(model, "gh200-arc", "sierra", "dl", 30, seed=2, offered_mbps=25)
    assert max(s.throughput_mbps) <= 25


def test_load_events_ignored_by_default(model):
    base = synthesize_performance(model, "gh200-arc", "sierra", "dl", 60, seed=3)
    loaded = synthesize_performance(model, "gh200-arc", "sierra", "dl", 60, seed=3,
                                    load_events=[LoadEvent("shared_core", 8), LoadEvent("second_cell")])
    assert base == loaded


def test_what_if_degradation_skips_isolated(model):
    m = PerformanceModel(model.throughput, model.latency, degrade_on_load=True, degrade_factor=0.1)
    base = synthesize_performance(m, "gh200-arc", "sierra", "dl", 60, seed=3)
    iso = synthesize_performance(m, "gh200-arc", "sierra", "dl", 60, seed=3, load_events=[LoadEvent("isolated_core", 4)])
    shared = synthesize_performance(m, "gh200-arc", "sierra", "dl", 60, seed=3, load_events=[LoadEvent("shared_core", 4)])
    assert base == iso
    assert shared.mean_throughput < base.mean_throughput


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(PerformanceModel.load().profiles()), st.integers(0, 300), st.integers(0, 2**31))
def test_series_shape_and_bounds(key, duration, seed):
    m = PerformanceModel.load()
    profile, direction, ue_class = key
    s = synthesize_performance(m, profile, ue_class, direction, duration, seed)
    cap = m.params(profile, ue_class, direction).cap
    assert len(s) == duration
    assert all(0 <= x <= cap for x in s.throughput_mbps)
    assert all(0 <= x <= m.latency_params(profile).cap for x in s.rtt_ms)


def test_summary_recomputable():
    rec = _record(values=(10.0, 20.0, 30.0))
    assert rec.summary == summarize(rec.series)
    assert rec.mean_throughput == 20.0
    assert TestRecord.from_dict(rec.to_dict()).summary == rec.summary


def test_store_record_and_query(tmp_path):
    store = TestStore(tmp_path)
    assert store.query_history() == []
    rid = store.record(_record(scenario=3))
    assert rid == "rec-000001"
    got = store.query_history(scenario_id=3)
    assert [r.record_id for r in got] == [rid]
    assert got[0].series == _record(scenario=3).series


def test_store_filter_matches_linear_scan(tmp_path):
    rng = random.Random(4)
    store = TestStore(tmp_path)
    recs = []
    for i in range(100):
        rec = _record(scenario=rng.randint(1, 4), stack=rng.choice(["oai", "srsran"]),
                      ue=rng.choice(["a", "b"]), start=i * 5000.0, values=(rng.random(),))
        store.record(rec)
        recs.append(rec)
    oai = store.query_history(stack="oai")
    assert [r.record_id for r in oai] == [r.record_id for r in recs if r.stack == "oai"]
    window = store.query_history(since=100_000, until=200_000, ue="a")
    assert [r.record_id for r in window] == [r.record_id for r in recs
                                             if 100_000 <= r.started_at <= 200_000 and "a" in r.ues]
    # records spanning several days land in several files
    assert len(list(tmp_path.glob("records-day-*.jsonl"))) > 1


def test_csv_export(tmp_path):
    text = export_csv([_record(values=(1.5, 2.5))], tmp_path / "x.csv")
    lines = text.splitlines()
    assert lines[0].startswith("record_id,")
    assert len(lines) == 3
    assert (tmp_path / "x.csv").read_text() == text


def test_compare_baseline_examples():
    assert compare_baseline(270, [275]).status == "ok"
    assert compare_baseline(0, [275, 280]).degraded
    assert compare_baseline(75.0, [100.0], threshold=0.25).status == "ok"
    assert compare_baseline(74.999, [100.0], threshold=0.25).status == "degraded"
    with pytest.raises(NoHistory):
        compare_baseline(1, [])


def test_compare_baseline_history_of_records():
    hist = [_record(values=(100.0,)), _record(values=(200.0, 200.0, 200.0, 200.0))]
    v = compare_baseline(_record(values=(134.0,)), hist, threshold=0.1)
    assert v.history_mean == 150.0
    assert v.status == "degraded"
    assert math.isclose(v.latest_mean, 134.0)

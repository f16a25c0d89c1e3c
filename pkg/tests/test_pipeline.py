from __future__ import annotations

import dataclasses
import json

import pytest

from oracles import pull_seconds
from ranorch.cluster import PoolBundle
from ranorch.config import NetworkScenario, UESpec, load_fixture, parse_test_file
from ranorch.errors import (
    AlreadyDeployed,
    DeploymentNotReady,
    MissingParent,
    NoPoolNode,
    StartTimeout,
    UnknownImage,
    UnknownUe,
    WrongPool,
)
from ranorch.pipeline import Engine, ImageDescriptor, Reconciler, load_declared
from ranorch.telemetry import TestStore

FH72 = {"core": "open5gs", "cu": "oai", "du_high": "oai", "du_low": "none", "ru": "foxconn"}
USRP = {"core": "open5gs", "cu": "srsran", "du_high": "srsran", "du_low": "none", "ru": "usrp_x410"}
EX_TEST = parse_test_file(load_fixture("example_test.json"))

DEPS = ImageDescriptor("ran-deps", "dpdk-22.11", 6.0, None, 900)
OAI_A = ImageDescriptor("oai-gnb", "2025.w01", 9.0, "ran-deps:dpdk-22.11", 600)
OAI_B = ImageDescriptor("oai-gnb", "2025.w02", 9.0, "ran-deps:dpdk-22.11", 600)


def test_build_chain_and_leaf_only_rebuild():
    eng = Engine(prepull=False, images={})
    first = eng.build_image_chain([DEPS, OAI_A], "worker-gh")
    assert first.built == (DEPS.ref, OAI_A.ref)
    assert eng.registry.get(OAI_A.ref, "worker-gh").parent == DEPS.ref
    second = eng.build_image_chain([DEPS, OAI_B], "worker-gh")
    assert second.built == (OAI_B.ref,) and second.reused == (DEPS.ref,)
    assert second.charged_s < first.charged_s
    assert eng.registry.children(DEPS.ref, "worker-gh") == [OAI_A.ref, OAI_B.ref]


def test_build_errors():
    eng = Engine(prepull=False, images={})
    with pytest.raises(MissingParent):
        eng.build_image_chain([OAI_A], "worker-gh")
    eng.cluster.register_pool(PoolBundle("empty"))
    with pytest.raises(NoPoolNode):
        eng.build_image_chain([DEPS], "empty")


def test_pull_cold_warm_and_gates():
    eng = Engine(prepull=False)
    cold = eng.pull_image("gh200-1", "cubb:24-3")
    assert cold == pytest.approx(pull_seconds(40))
    assert 32 <= cold <= 45
    assert eng.pull_image("gh200-1", "cubb:24-3") < 0.1
    eng.registry.evict_cache("gh200-1", "cubb:24-3")
    assert eng.pull_image("gh200-1", "cubb:24-3") == pytest.approx(cold)
    with pytest.raises(WrongPool):
        eng.pull_image("microway-1", "cubb:24-3")
    with pytest.raises(UnknownImage):
        eng.pull_image("gh200-1", "nope:1")


@pytest.mark.parametrize("assign,setup,profile", [
    (None, 18.0, "arc"),
    (FH72, 8.0, "fh72"),
    (USRP, 10.0, "usrp"),
])
def test_gnb_setup_per_stack(engine, example_scenario, assign, setup, profile):
    s = example_scenario if assign is None else NetworkScenario.from_assignments(assign)
    rec = engine.deploy(s)
    assert rec.resolved.stack_profile == profile
    assert rec.breakdown["gnb_setup"] == pytest.approx(setup)


def test_fh72_on_gigabyte(engine):
    rec = engine.deploy(NetworkScenario.from_assignments(FH72), pool="worker-gigabyte")
    assert rec.resolved.target_node.startswith("gigabyte")
    assert rec.breakdown["gnb_setup"] == pytest.approx(8.0)


def test_e2e_under_a_minute(engine, example_scenario):
    rec = engine.deploy(example_scenario)
    engine.run_test_pipeline(EX_TEST, rec)
    assert None not in rec.breakdown.values()
    assert rec.total_duration < 60


def test_test_pipeline_persists(tmp_path, example_scenario):
    eng = Engine(seed=2, store=TestStore(tmp_path))
    rec = eng.deploy(example_scenario)
    t = eng.run_test_pipeline(EX_TEST, rec)
    assert t.summary["samples"] == 60
    assert t.ended_at - t.started_at >= 60
    assert [r.record_id for r in eng.store.query_history(scenario_id=1)] == [t.record_id]


def test_back_to_back_tests_single_setup(engine, example_scenario):
    engine.deploy(example_scenario)
    engine.run_test_pipeline(EX_TEST)
    engine.run_test_pipeline(EX_TEST)
    starts = [t for r in engine.runs for t in r.tasks if t.name in ("start-gnb", "restart-gnb")]
    assert len(starts) == 1
    engine.run_test_pipeline(EX_TEST, restart=True)
    starts = [t for r in engine.runs for t in r.tasks if t.name in ("start-gnb", "restart-gnb")]
    assert len(starts) == 2


def test_unknown_ue(engine, example_scenario):
    engine.deploy(example_scenario)
    ue = dataclasses.replace(EX_TEST.ue_specifications[0], ue_serial="not-a-ue")
    with pytest.raises(UnknownUe):
        engine.run_test_pipeline(dataclasses.replace(EX_TEST, ue_specifications=(ue,)))


def test_too_many_ues(engine, example_scenario):
    engine.deploy(example_scenario)
    ues = tuple(EX_TEST.ue_specifications * 4)
    with pytest.raises(UnknownUe):
        engine.run_test_pipeline(dataclasses.replace(EX_TEST, ue_specifications=ues))


def test_not_deployed(engine):
    with pytest.raises(DeploymentNotReady):
        engine.run_test_pipeline(EX_TEST)


def test_already_deployed(engine, example_scenario):
    engine.deploy(example_scenario)
    with pytest.raises(AlreadyDeployed):
        engine.deploy(example_scenario)


def test_start_timeout(engine, example_scenario):
    engine.timing.start_timeout_s = 5
    with pytest.raises(StartTimeout):
        engine.deploy(example_scenario)


def test_runs_interleave_and_keep_task_order(engine, example_scenario):
    a = engine.start_deployment(engine.specialize(example_scenario))
    b = engine.start_deployment(engine.specialize(NetworkScenario.from_assignments(USRP, 2)))
    engine.wait_all([a.run, b.run])
    for rec in (a, b):
        names = [t.name for t in rec.run.tasks]
        assert names == ["emit-specialized-config", "pull-image", "start-gnb", "ready"]
        ends = [t.end for t in rec.run.tasks]
        assert ends == sorted(ends)
    # both started at t=0, so they overlapped
    assert a.run.started_at == b.run.started_at == 0
    assert a.run.ended_at != b.run.ended_at


def test_run_ledger_jsonl(engine, example_scenario):
    rec = engine.deploy(example_scenario)
    lines = [json.loads(x) for x in rec.run.dumps_ledger().splitlines()]
    assert [x["task"] for x in lines] == [t.name for t in rec.run.tasks]
    assert sum(x["duration"] for x in lines) == pytest.approx(rec.run.ended_at - rec.run.started_at)


def test_usrp_failure_timeline(engine):
    engine.scheduler.eviction_timeout = 30
    rec = engine.deploy(NetworkScenario.from_assignments(USRP))
    engine.run_test_pipeline(EX_TEST, rec)
    t0 = engine.cluster.now
    engine.cluster.inject_failure(rec.resolved.target_node)
    engine.cluster.run_until_idle()
    ev = {e["event"]: e["time"] - t0 for e in engine.cluster.log if e["time"] >= t0}
    assert ev["node_failure_observed"] == pytest.approx(40)
    assert ev["workload_evicted"] == pytest.approx(70)
    assert ev["gnb_ready"] == pytest.approx(80, abs=0.1)
    assert ev["ue_traffic_resumed"] - ev["gnb_ready"] == pytest.approx(30, rel=0.15)


# -- reconcile ----------------------------------------------------------------

def test_reconcile_examples(engine, example_scenario):
    r = Reconciler(engine)
    assert [a.kind for a in r.diff([example_scenario])] == ["deploy"]
    acts = r.reconcile([example_scenario, EX_TEST])
    assert [(a.kind, a.outcome) for a in acts] == [("deploy", "ok"), ("test", "ok")]
    assert r.reconcile([example_scenario, EX_TEST]) == []
    acts = r.reconcile([])
    assert [(a.kind, a.scenario_id) for a in acts] == [("teardown", 1)]
    assert engine.deployments == {}
    assert engine.scheduler.audit() == []


def test_reconcile_redeploy_on_change(engine, example_scenario):
    r = Reconciler(engine)
    r.reconcile([example_scenario])
    changed = NetworkScenario.from_assignments(FH72, 1)
    acts = r.reconcile([changed])
    assert [a.kind for a in acts] == ["redeploy"]
    assert engine.deployments[1].scenario == changed
    assert r.diff([changed]) == []


def test_reconcile_skips_undeclared_test(engine):
    r = Reconciler(engine)
    assert r.reconcile([EX_TEST]) == []
    assert r.warnings


def test_load_declared(tmp_path):
    (tmp_path / "a.json").write_text(load_fixture("example_deployment.json"))
    (tmp_path / "b.json").write_text(load_fixture("example_test.json"))
    items = load_declared(tmp_path)
    assert isinstance(items[0], NetworkScenario) and not isinstance(items[1], NetworkScenario)
    assert isinstance(items[1].ue_specifications[0], UESpec)

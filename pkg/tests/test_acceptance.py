"""The ten acceptance criteria, each at its stated tolerance.

Every test records PASS or FAIL for its criterion; the terminal summary
prints one line per criterion at the end of the session.
"""

from __future__ import annotations

import functools
import itertools
import json
import math
import random
import statistics
import time

import pytest
from hypothesis import given, settings, strategies as st

import conftest
from agent_tables import random_table
from oracles import NAMES, ROLE_ORDER, VALID_ROWS, VfLedger, all_assignments, oracle_validate, pull_seconds
from ranorch.agent import AgentSession, ScriptedBackend, run_intent
from ranorch.catalog import Catalog
from ranorch.cli import Context, execute, failure_timeline, resolve_settings
from ranorch.cluster import Cluster, VfHandle
from ranorch.config import (
    NetworkScenario,
    load_fixture,
    parse_deployment_file,
    parse_test_file,
    parse_ue_database,
    round_trip,
    serialize,
)
from ranorch.errors import NoFeasibleNode, VfExhausted
from ranorch.pipeline import Engine, Reconciler
from ranorch.scheduler import PlacementState, Scheduler, VfRequest, WorkloadRequirements
from ranorch.telemetry import LoadEvent, PerformanceModel, synthesize_performance

EX_DEPLOY = load_fixture("example_deployment.json")
EX_TEST = load_fixture("example_test.json")
EX_UEDB = load_fixture("example_ue_db.json")
FH72 = {"core": "open5gs", "cu": "oai", "du_high": "oai", "du_low": "none", "ru": "foxconn"}
USRP = {"core": "open5gs", "cu": "srsran", "du_high": "srsran", "du_low": "none", "ru": "usrp_x410"}


def criterion(n: int, title: str):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kw):
            try:
                fn(*args, **kw)
            except BaseException:
                conftest.ACCEPTANCE_RESULTS[n] = ("FAIL", title)
                print(f"criterion {n} FAIL  {title}")
                raise
            conftest.ACCEPTANCE_RESULTS[n] = ("PASS", title)
            print(f"criterion {n} PASS  {title}")
        return wrapper
    return deco


def zero_jitter_engine(seed=11, **kw) -> Engine:
    eng = Engine(seed=seed, **kw)
    eng.timing.jitter = 0.0
    return eng


# -- 1 ------------------------------------------------------------------------

@criterion(1, "end-to-end under 60 s simulated, per-stack gNB setup, < 1 s wall")
def test_c1_end_to_end(tmp_path):
    dep = tmp_path / "dep.json"
    dep.write_text(EX_DEPLOY)
    t0 = time.perf_counter()
    code, doc, _ = execute(["--jitter", "0", "run", "--deploy", str(dep)], env={})
    wall = time.perf_counter() - t0
    assert code == 0
    bd = doc["deployment"]["breakdown"]
    assert doc["deployment"]["total_duration"] < 60
    assert None not in bd.values()
    assert wall < 1.0
    expected = {"arc": 18.0, "fh72": 8.0, "usrp": 10.0}
    for assign, pool, profile in ((None, None, "arc"), (FH72, "worker-gigabyte", "fh72"), (USRP, None, "usrp")):
        eng = zero_jitter_engine()
        scenario = parse_deployment_file(EX_DEPLOY) if assign is None else NetworkScenario.from_assignments(assign)
        rec = eng.deploy(scenario, pool)
        assert rec.resolved.stack_profile == profile
        assert rec.breakdown["gnb_setup"] == pytest.approx(expected[profile], rel=0.15)
    # with the default jitter the setup bar still stays inside the band
    for seed in range(20):
        rec = Engine(seed=seed).deploy(parse_deployment_file(EX_DEPLOY))
        assert rec.breakdown["gnb_setup"] == pytest.approx(18.0, rel=0.15)


# -- 2 ------------------------------------------------------------------------

@criterion(2, "cold pull of a 40 GB image in [32, 45] s, warm < 0.1 s, seeded")
def test_c2_pull_model():
    eng = Engine(prepull=False, seed=3)
    assert eng.registry.get("cubb:24-3", "worker-gh").size_gb == 40
    cold = eng.pull_image("gh200-1", "cubb:24-3")
    assert 32 <= cold <= 45
    assert cold == pytest.approx(pull_seconds(40))
    assert eng.pull_image("gh200-1", "cubb:24-3") < 0.1
    again = Engine(prepull=False, seed=3)
    assert again.pull_image("gh200-1", "cubb:24-3") == cold
    # the pull bar shows up in a cold deployment
    e1, e2 = Engine(prepull=False, seed=3), Engine(prepull=False, seed=3)
    r1, r2 = e1.deploy(parse_deployment_file(EX_DEPLOY)), e2.deploy(parse_deployment_file(EX_DEPLOY))
    pulls = [t.duration for t in r1.run.tasks if t.name == "pull-image"]
    assert pulls and pulls[0] >= cold
    assert r1.to_dict() == r2.to_dict()


# -- 3 ------------------------------------------------------------------------

@criterion(3, "exhaustive validate_scenario agrees with the pairwise-edge oracle, < 1 s")
def test_c3_oracle_equivalence():
    catalog = Catalog.seeded()
    t0 = time.perf_counter()
    n = 0
    for assign in all_assignments():
        filled = {r: v for r, v in assign.items() if v is not None}
        rep = catalog.validate_scenario(filled)
        status, missing, conflicts = oracle_validate(assign)
        assert rep.status.value == status, assign
        assert {r.value for r in rep.missing_roles} == missing
        assert {(a.value, b.value) for a, b, *_ in rep.conflicts} == conflicts
        n += 1
    assert time.perf_counter() - t0 < 1.0
    assert n == math.prod(len(v) + 1 for v in NAMES.values())
    assert n <= 500


# -- 4 ------------------------------------------------------------------------

@criterion(4, "1000 random scripted tables: safe, terminating, convergent when built to be")
def test_c4_agent_safety():
    rng = random.Random(2024)
    converged = 0
    for i in range(1000):
        mode = "deploy" if i % 2 == 0 else "test"
        convergent = rng.random() < 0.5
        budget = rng.choice((4, 8, 16))
        intent, turns, target = random_table(rng, mode, budget=budget, convergent=convergent)
        res = run_intent(intent, mode, ScriptedBackend({intent: turns}), budget=budget)
        assert res.metrics.iterations <= budget
        assert res.session.phase in ("done", "failed")
        if res.config is not None:
            check = AgentSession(mode, intent)
            check.working.update(res.session.working)
            assert check.validate().valid
            if mode == "deploy":
                row = tuple(res.session.working[r] for r in ROLE_ORDER)
                assert row in VALID_ROWS
        else:
            assert res.error is not None
        if convergent:
            assert res.metrics.success, res.trace_jsonl()
            converged += 1
    assert converged > 300


# -- 5 ------------------------------------------------------------------------

def _random_failure_script(seed: int) -> list[str]:
    rng = random.Random(seed)
    cluster = Cluster.load(seed=seed)
    timeout = rng.choice((0.0, 30.0, 300.0, math.inf))
    cluster.detection_delay = rng.choice((10.0, 40.0))
    s = Scheduler(cluster, eviction_timeout=timeout)
    problems: list[str] = []

    def check(old, new):
        if new.pool != old.pool or cluster.nodes[new.node_id].pool != old.requirements.pool_selector:
            problems.append(f"{old.workload_id}: {old.node_id} -> {new.node_id} crossed pools")

    s.on_redeployed(check)
    pools = ("worker-gh", "worker-gigabyte", "worker-microway", "control-plane")
    for i in range(rng.randint(1, 5)):
        pool = rng.choice(pools)
        req = WorkloadRequirements(pool, needs_gpu=pool in ("worker-gh", "worker-gigabyte") and rng.random() < 0.5,
                                   vf_requests=tuple(VfRequest() for _ in range(rng.randint(0, 2))),
                                   isolated_core_request=0 if pool == "control-plane" else rng.randint(0, 6),
                                   split=rng.choice(("7.2", "8.1", None)))
        try:
            s.place(req, f"w{i}")
        except NoFeasibleNode:
            pass
    nodes = sorted(cluster.nodes)
    for _ in range(rng.randint(1, 3)):
        cluster.inject_failure(rng.choice(nodes), at=rng.uniform(0, 200))
    if rng.random() < 0.3:
        try:
            cluster.relabel_node(rng.choice(nodes), rng.choice(pools))
        except Exception:
            pass
    cluster.run_until_idle()
    for ev in cluster.log:
        if ev["event"] == "workload_evicted":
            if ev["payload"]["pool"] != s.placements[ev["payload"]["workload"]].requirements.pool_selector:
                problems.append(f"evicted across pools: {ev}")
    return problems + s.audit()


@criterion(5, "failure timeline +40/+70/ready/+30, no cross-pool eviction in 10,000 scripts")
def test_c5_resilience():
    ctx = Context(resolve_settings(type("A", (), {"seed": 1, "cluster": None, "config": None, "store": None,
                                                  "jitter": 0.0, "backend": None})(), env={}))
    events = failure_timeline(ctx, "microway-1", 40.0, 30.0)
    rel = {e["event"]: e["t_rel"] for e in events}
    assert rel["node_failure_observed"] == 40.0
    assert rel["workload_evicted"] == 70.0
    assert rel["gnb_ready"] - rel["workload_evicted"] == pytest.approx(10.0, rel=0.15)
    assert rel["ue_traffic_resumed"] - rel["gnb_ready"] == pytest.approx(30.0, rel=0.15)
    bad = []
    for seed in range(10_000):
        bad += _random_failure_script(seed)
        if bad:
            break
    assert bad == []


# -- 6 ------------------------------------------------------------------------

@criterion(6, "10,000-op resource script conserves VFs, cores and GPU partitions; 9th VF fails")
def test_c6_resource_conservation():
    rng = random.Random(6)
    cluster = Cluster.load(seed=6)
    s = Scheduler(cluster, auto_redeploy=False)
    ledger = VfLedger(8)
    isolated = {n.id: len(n.applied.performance.isolated_cores)
                for n in cluster.nodes.values() if n.applied and n.applied.performance}
    gpu_budget = {n.id: len(n.spec.gpus) * s.gpu_partitions for n in cluster.nodes.values()}
    raw: list[VfHandle] = []
    pools = ("worker-gh", "worker-gigabyte", "worker-microway", "control-plane", "edge")
    next_id = itertools.count()
    ops = {"place": 0, "terminate": 0, "drain": 0, "redeploy": 0, "alloc": 0, "release": 0, "vf_refused": 0}
    for step in range(10_000):
        op = rng.choice(("place", "place", "terminate", "drain", "redeploy", "alloc", "alloc", "release"))
        live = [p for p in s.placements.values() if p.state is PlacementState.RUNNING]
        if op == "place":
            pool = rng.choice(pools)
            req = WorkloadRequirements(pool, needs_gpu=rng.random() < 0.4,
                                       vf_requests=tuple(VfRequest() for _ in range(rng.randint(0, 3))),
                                       isolated_core_request=rng.randint(0, 12) if pool.startswith("worker") else 0)
            try:
                p = s.place(req, f"w{next(next_id)}")
            except NoFeasibleNode:
                continue
            for h in p.vf_handles:
                assert ledger.grant(h.node, h.nic), "scheduler granted a VF the ledger says is gone"
        elif op == "terminate" and live:
            p = rng.choice(live)
            handles = p.vf_handles
            s.terminate(p.workload_id)
            for h in handles:
                ledger.release(h.node, h.nic)
        elif op == "drain" and live:
            node = rng.choice(live).node_id
            for p in s.live_on(node):
                for h in p.vf_handles:
                    ledger.release(h.node, h.nic)
            s.drain(node)
        elif op == "redeploy":
            evicted = [p for p in s.placements.values() if p.state is PlacementState.EVICTED]
            if not evicted:
                continue
            try:
                p = s.redeploy(rng.choice(evicted))
            except NoFeasibleNode:
                continue
            for h in p.vf_handles:
                assert ledger.grant(h.node, h.nic)
        elif op == "alloc":
            node = rng.choice(sorted(cluster.nodes))
            nic = next(iter(cluster.nodes[node].vf_pools))
            expect = ledger.held.get((node, nic), 0) < 8
            try:
                raw.append(cluster.allocate_vf(node, nic))
                assert expect
                ledger.grant(node, nic)
            except VfExhausted:
                assert not expect
                ops["vf_refused"] += 1
        elif op == "release" and raw:
            h = raw.pop(rng.randrange(len(raw)))
            cluster.release_vf(h)
            ledger.release(h.node, h.nic)
        ops[op] += 1
        # conservation after every operation
        for node in cluster.nodes.values():
            for nic, pool in node.vf_pools.items():
                assert len(pool.allocated) == ledger.held.get((node.id, nic), 0) <= 8
            held = s.live_on(node.id)
            assert sum(len(p.cores) for p in held) <= isolated.get(node.id, 0)
            assert sum(1 for p in held if p.gpu_slot is not None) <= gpu_budget[node.id]
        if step % 50 == 0:
            assert s.audit() == []
    assert s.audit() == []
    assert min(ops.values()) > 0
    # the ninth VF on a fresh NIC always fails
    fresh = Cluster.load(seed=0)
    for node in fresh.nodes.values():
        for nic in node.vf_pools:
            for _ in range(8):
                fresh.allocate_vf(node.id, nic)
            with pytest.raises(VfExhausted):
                fresh.allocate_vf(node.id, nic)


# -- 7 ------------------------------------------------------------------------

def _cell_mean(seed: int, *, second_cell: bool, load_events=()) -> float:
    eng = zero_jitter_engine(seed=seed)
    eng.cluster.nodes.pop("gh200-2")  # force co-location on one GH200
    rec = eng.deploy(parse_deployment_file(EX_DEPLOY))
    if second_cell:
        other = eng.deploy(NetworkScenario.from_assignments(dict(zip(ROLE_ORDER, (
            "open5gs", "oai", "oai", "cubb", "rusim"))), 2))
        assert other.resolved.target_node == rec.resolved.target_node
    test = parse_test_file(EX_TEST)
    t = eng.run_test_pipeline(test, rec, seed=seed, load_events=load_events)
    return t.mean_throughput


@criterion(7, "co-located load and a second cell leave throughput unchanged (< 2% over 30 runs)")
def test_c7_coexistence():
    base = [_cell_mean(s, second_cell=False) for s in range(30)]
    loads = (LoadEvent("shared_core", 8), LoadEvent("isolated_core", 4))
    for kw in ({"second_cell": True}, {"second_cell": False, "load_events": loads},
               {"second_cell": True, "load_events": loads}):
        other = [_cell_mean(s, **kw) for s in range(30)]
        diff = abs(statistics.fmean(other) - statistics.fmean(base)) / statistics.fmean(base)
        assert diff < 0.02, (kw, diff)


# -- 8 ------------------------------------------------------------------------

@criterion(8, "30 synthesized 60 s runs per profile land within 5% of 275/75/820/1600 Mbps and 18 ms")
def test_c8_calibration():
    model = PerformanceModel.load()
    targets = [(("gh200-arc", "sierra", "dl"), 275.0), (("gigabyte-arc", "sierra", "ul"), 75.0),
               (("gh200-arc", "s23", "dl"), 820.0), (("gh200-arc", "rusim15", "dl"), 1600.0)]
    for (profile, ue, direction), want in targets:
        runs = [synthesize_performance(model, profile, ue, direction, 60, seed=s) for s in range(30)]
        got = statistics.fmean(r.mean_throughput for r in runs)
        assert abs(got - want) / want < 0.05, (profile, ue, direction, got)
        rtt = statistics.fmean(statistics.fmean(r.rtt_ms) for r in runs)
        assert abs(rtt - 18.0) / 18.0 < 0.05


# -- 9 ------------------------------------------------------------------------

def _logged_session(seed: int) -> tuple[str, str]:
    eng = Engine(seed=seed)
    rec = eng.deploy(parse_deployment_file(EX_DEPLOY))
    eng.run_test_pipeline(parse_test_file(EX_TEST), rec)
    eng.scheduler.eviction_timeout = 30
    eng.cluster.inject_failure(rec.resolved.target_node)
    eng.cluster.run_until_idle()
    return eng.cluster.dumps_log(), json.dumps(rec.to_dict(), sort_keys=True, default=str)


@criterion(9, "same seed gives byte-identical logs and --json output; fixtures round-trip bit-stably")
def test_c9_determinism(tmp_path, capsys):
    a, b = _logged_session(42), _logged_session(42)
    assert a == b
    assert _logged_session(43) != a
    dep, test = tmp_path / "d.json", tmp_path / "t.json"
    dep.write_text(EX_DEPLOY)
    test.write_text(EX_TEST)
    from ranorch.cli import main
    outs = []
    for i in range(2):
        log_path = tmp_path / f"events{i}.jsonl"
        main(["--json", "--seed", "8", "run", "--deploy", str(dep), "--test", str(test), "--event-log", str(log_path)])
        outs.append((capsys.readouterr().out, log_path.read_bytes()))
    assert outs[0] == outs[1]
    for text, parse in ((EX_DEPLOY, parse_deployment_file), (EX_TEST, parse_test_file), (EX_UEDB, parse_ue_database)):
        value = parse(text)
        once = round_trip(value)
        assert once == value and serialize(once) == serialize(value)
        assert serialize(round_trip(once)) == serialize(once)


# -- 10 -----------------------------------------------------------------------

MUTATIONS = st.lists(st.tuples(st.sampled_from(["add", "drop", "change", "test", "retest"]),
                               st.integers(1, 3), st.integers(0, len(VALID_ROWS) - 1), st.integers(1, 40)),
                     min_size=1, max_size=8)
ROWS = sorted(VALID_ROWS)


def _declared(state: dict, tests: dict) -> list:
    base = parse_test_file(EX_TEST)
    out = [NetworkScenario.from_assignments(dict(zip(ROLE_ORDER, ROWS[r])), sid) for sid, r in sorted(state.items())]
    for sid, bw in sorted(tests.items()):
        ues = tuple(u.__class__(**dict(u.__dict__, bandwidth_mbps=bw)) for u in base.ue_specifications)
        out.append(base.__class__(sid, ues))
    return out


@criterion(10, "reconcile reaches zero diff within 2 passes and stays there")
@settings(max_examples=60, deadline=None)
@given(MUTATIONS)
def test_c10_reconcile_convergence(mutations):
    eng = Engine(seed=1)
    rec = Reconciler(eng)
    state: dict[int, int] = {}
    tests: dict[int, int] = {}
    for kind, sid, row, bw in mutations:
        if kind == "add" or kind == "change":
            state[sid] = row
        elif kind == "drop":
            state.pop(sid, None)
            tests.pop(sid, None)
        elif kind in ("test", "retest") and sid in state:
            tests[sid] = bw
        declared = _declared(state, tests)
        passes = 0
        while rec.diff(declared):
            passes += 1
            assert passes <= 2, [a.to_dict() for a in rec.diff(declared)]
            actions = rec.reconcile(declared)
            assert all(a.outcome == "ok" for a in actions), [a.to_dict() for a in actions]
        assert rec.reconcile(declared) == []
        assert set(eng.deployments) == set(state)
        assert eng.scheduler.audit() == []

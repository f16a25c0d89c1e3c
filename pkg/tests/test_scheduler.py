from __future__ import annotations

import math

import pytest

from ranorch.errors import NoFeasibleNode
from ranorch.scheduler import PlacementState, Scheduler, VfRequest, WorkloadRequirements

ARC = WorkloadRequirements("worker-gh", needs_gpu=True, vf_requests=(VfRequest(None),),
                           isolated_core_request=16, needs_ptp=True, split="7.2", kind="gnb-arc")
USRP = WorkloadRequirements("worker-microway", vf_requests=(VfRequest(None, 9000),),
                            isolated_core_request=4, split="8.1", kind="gnb-usrp")


def test_arc_lands_on_gh200(scheduler):
    p = scheduler.place(ARC, "gnb-1")
    assert scheduler.cluster.nodes[p.node_id].spec.model == "GH200"
    assert p.gpu_slot is not None and len(p.vf_handles) == 1 and len(p.cores) == 16


def test_core_pod_no_gpu(scheduler):
    p = scheduler.place(WorkloadRequirements("control-plane", kind="core"), "core-1")
    assert p.node_id.startswith("cp-") and p.gpu_slot is None and p.vf_handles == ()


def test_two_arc_on_one_gh200_partitioned(cluster):
    cluster.nodes.pop("gh200-2")
    s = Scheduler(cluster)
    a, b = s.place(ARC, "a"), s.place(ARC, "b")
    assert a.node_id == b.node_id == "gh200-1"
    assert a.gpu_slot != b.gpu_slot
    assert {h.index for h in a.vf_handles}.isdisjoint({h.index for h in b.vf_handles})
    with pytest.raises(NoFeasibleNode) as info:
        s.place(ARC, "c")
    assert "GPU" in info.value.reasons["gh200-1"]


def test_tie_break_spreads(scheduler):
    a, b = scheduler.place(USRP, "a"), scheduler.place(USRP, "b")
    assert (a.node_id, b.node_id) == ("microway-1", "microway-2")


def test_reasons_name_first_unsatisfied(scheduler):
    req = WorkloadRequirements("worker-microway", needs_gpu=True)
    with pytest.raises(NoFeasibleNode) as info:
        scheduler.place(req)
    assert info.value.reasons == {"microway-1": "no GPU", "microway-2": "no GPU"}


def _fail_and_run(scheduler, node, until):
    c = scheduler.cluster
    c.inject_failure(node)
    return c.tick(until)


@pytest.mark.parametrize("timeout,evicted_at", [(30, 70), (0, 40), (300, 340)])
def test_eviction_timing(cluster, timeout, evicted_at):
    s = Scheduler(cluster, eviction_timeout=timeout)
    s.place(USRP, "g")
    events = _fail_and_run(s, "microway-1", 1000)
    ev = [e for e in events if e["event"] == "workload_evicted"]
    assert [e["time"] for e in ev] == [evicted_at]
    assert s.placements["g"].node_id == "microway-2"
    assert s.placements["g"].state is PlacementState.RUNNING


def test_infinite_timeout_never_evicts(cluster):
    s = Scheduler(cluster, eviction_timeout=math.inf)
    s.place(USRP, "g")
    events = _fail_and_run(s, "microway-1", 1e6)
    assert not [e for e in events if e["event"] == "workload_evicted"]
    assert s.placements["g"].state is PlacementState.EVICTING


def test_single_node_pool_redeploy_fails(cluster):
    cluster.nodes.pop("microway-2")
    s = Scheduler(cluster, eviction_timeout=30)
    s.place(USRP, "g")
    events = _fail_and_run(s, "microway-1", 1000)
    assert [e["event"] for e in events if e["event"] == "redeploy_failed"] == ["redeploy_failed"]
    assert s.placements["g"].state is PlacementState.EVICTED


def test_redeploy_stays_in_pool(cluster):
    s = Scheduler(cluster, eviction_timeout=0)
    s.place(ARC, "g")
    first = s.placements["g"].node_id
    _fail_and_run(s, first, 100)
    p = s.placements["g"]
    assert p.pool == "worker-gh" and p.node_id != first
    assert p.metadata.get("ru_reset") is True
    assert s.audit() == []


def test_release_on_terminate(scheduler):
    p = scheduler.place(USRP, "g")
    pool = scheduler.cluster.vf_pool(p.node_id, p.vf_handles[0].nic)
    assert pool.free == 7
    scheduler.terminate("g")
    assert pool.free == 8
    assert scheduler.audit() == []


def test_audit_allows_unobserved_failure(cluster):
    s = Scheduler(cluster)
    s.place(USRP, "g")
    cluster.inject_failure("microway-1")
    cluster.tick(10)
    assert s.audit() == []

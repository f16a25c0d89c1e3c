"""Workload placement, eviction and same-pool redeployment."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .cluster import Cluster, Node, NodeState, VfHandle
from .errors import NoFeasibleNode

log = logging.getLogger(__name__)

DEFAULT_EVICTION_TIMEOUT_S = 300.0
DEFAULT_GPU_PARTITIONS = 2


@dataclass(frozen=True)
class VfRequest:
    vlan: int | None = None
    mtu: int = 9216


@dataclass(frozen=True)
class WorkloadRequirements:
    pool_selector: str
    namespace: str = "default"
    needs_gpu: bool = False
    gpu_model: str | None = None
    vf_requests: tuple[VfRequest, ...] = ()
    isolated_core_request: int = 0
    arch: str | None = None
    needs_ptp: bool = False
    split: str | None = None
    kind: str = "generic"

    def to_dict(self) -> dict:
        return {
            "pool_selector": self.pool_selector,
            "namespace": self.namespace,
            "needs_gpu": self.needs_gpu,
            "gpu_model": self.gpu_model,
            "vf_requests": [{"vlan": r.vlan, "mtu": r.mtu} for r in self.vf_requests],
            "isolated_core_request": self.isolated_core_request,
            "arch": self.arch,
            "needs_ptp": self.needs_ptp,
            "split": self.split,
            "kind": self.kind,
        }


class PlacementState(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    EVICTING = "evicting"
    EVICTED = "evicted"
    TERMINATED = "terminated"


HOLDS_RESOURCES = (PlacementState.PENDING, PlacementState.RUNNING, PlacementState.EVICTING)


@dataclass
class Placement:
    workload_id: str
    requirements: WorkloadRequirements
    node_id: str
    vf_handles: tuple[VfHandle, ...] = ()
    cores: tuple[int, ...] = ()
    gpu_slot: tuple[int, int] | None = None
    state: PlacementState = PlacementState.RUNNING
    placed_at: float = 0.0
    eviction_due: float | None = None
    generation: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def pool(self) -> str:
        return self.requirements.pool_selector

    def to_dict(self) -> dict:
        return {
            "workload_id": self.workload_id,
            "node": self.node_id,
            "pool": self.pool,
            "state": self.state.value,
            "vfs": [str(h) for h in self.vf_handles],
            "cores": list(self.cores),
            "gpu_slot": list(self.gpu_slot) if self.gpu_slot else None,
            "placed_at": self.placed_at,
            "generation": self.generation,
        }


class Scheduler:
    """Places workloads inside machine-config-pool boundaries.

    Ties among feasible nodes break by fewest live workloads, then lowest
    node id. Resources (VFs, isolated cores, GPU partitions) are debited at
    placement and credited back on eviction or termination.
    """

    def __init__(self, cluster: Cluster, eviction_timeout: float = DEFAULT_EVICTION_TIMEOUT_S,
                 gpu_partitions: int = DEFAULT_GPU_PARTITIONS, auto_redeploy: bool = True):
        self.cluster = cluster
        self.eviction_timeout = float(eviction_timeout)
        self.gpu_partitions = gpu_partitions
        self.auto_redeploy = auto_redeploy
        self.placements: dict[str, Placement] = {}
        self.history: list[Placement] = []
        self._ids = itertools.count(1)
        self._redeploy_listeners: list[Callable[[Placement, Placement], None]] = []
        cluster.on("node_failure_observed", lambda ev: self.on_node_failure_observed(ev.payload["node"]))
        cluster.on("node_draining", lambda ev: self.drain(ev.payload["node"]))

    def on_redeployed(self, fn: Callable[[Placement, Placement], None]) -> None:
        self._redeploy_listeners.append(fn)

    # -- accounting ---------------------------------------------------------

    def live_on(self, node_id: str) -> list[Placement]:
        return [p for _, p in sorted(self.placements.items())
                if p.node_id == node_id and p.state in HOLDS_RESOURCES]

    def _used_cores(self, node_id: str) -> set[int]:
        return {c for p in self.live_on(node_id) for c in p.cores}

    def _used_gpu_slots(self, node_id: str) -> set[tuple[int, int]]:
        return {p.gpu_slot for p in self.live_on(node_id) if p.gpu_slot is not None}

    def _free_gpu_slot(self, node: Node, model: str | None) -> tuple[int, int] | None:
        used = self._used_gpu_slots(node.id)
        for gi, gpu in enumerate(node.spec.gpus):
            if model is not None and gpu.model != model:
                continue
            for slot in range(self.gpu_partitions):
                if (gi, slot) not in used:
                    return gi, slot
        return None

    def _pick_nic(self, node: Node, count: int) -> str | None:
        for nic_id, pool in sorted(node.vf_pools.items()):
            if pool.free >= count:
                return nic_id
        return None

    def unsatisfied(self, node: Node, req: WorkloadRequirements) -> str | None:
        """First requirement ``node`` fails, or None when it is feasible."""
        if node.pool != req.pool_selector:
            return f"not in pool {req.pool_selector}"
        if node.state is not NodeState.READY:
            return f"node is {node.state.value}"
        if req.arch is not None and node.spec.arch != req.arch:
            return f"arch {node.spec.arch} != {req.arch}"
        if req.needs_ptp and node.ptp_state != "locked":
            return f"ptp {node.ptp_state}"
        if req.needs_gpu and self._free_gpu_slot(node, req.gpu_model) is None:
            return "no free GPU partition" if node.spec.gpus else "no GPU"
        if req.isolated_core_request:
            isolated = node.applied.performance.isolated_cores if node.applied and node.applied.performance else frozenset()
            free = len(isolated - self._used_cores(node.id))
            if free < req.isolated_core_request:
                return f"needs {req.isolated_core_request} isolated cores, {free} free"
        if req.vf_requests and self._pick_nic(node, len(req.vf_requests)) is None:
            return f"no NIC with {len(req.vf_requests)} free VFs"
        return None

    # -- placement ----------------------------------------------------------

    def place(self, req: WorkloadRequirements, workload_id: str | None = None) -> Placement:
        self.cluster.pool(req.pool_selector)  # UnknownPool
        candidates = self.cluster.nodes_in_pool(req.pool_selector)
        if not candidates:
            raise NoFeasibleNode(f"pool {req.pool_selector} has no nodes")
        reasons: dict[str, str] = {}
        feasible = []
        for node in candidates:
            why = self.unsatisfied(node, req)
            if why is None:
                feasible.append(node)
            else:
                reasons[node.id] = why
        if not feasible:
            raise NoFeasibleNode(f"no feasible node in pool {req.pool_selector}", reasons)
        node = min(feasible, key=lambda n: (len(self.live_on(n.id)), n.id))
        wid = workload_id or f"wl-{next(self._ids):04d}"
        return self._commit(node, req, wid)

    def _commit(self, node: Node, req: WorkloadRequirements, wid: str) -> Placement:
        gpu_slot = self._free_gpu_slot(node, req.gpu_model) if req.needs_gpu else None
        cores: tuple[int, ...] = ()
        if req.isolated_core_request:
            free = sorted(node.applied.performance.isolated_cores - self._used_cores(node.id))
            cores = tuple(free[: req.isolated_core_request])
        handles: list[VfHandle] = []
        if req.vf_requests:
            nic = self._pick_nic(node, len(req.vf_requests))
            for vf in req.vf_requests:
                handles.append(self.cluster.allocate_vf(node.id, nic, vf.vlan, vf.mtu, owner=wid))
        prev = self.placements.get(wid)
        placement = Placement(
            workload_id=wid, requirements=req, node_id=node.id, vf_handles=tuple(handles),
            cores=cores, gpu_slot=gpu_slot, state=PlacementState.RUNNING,
            placed_at=self.cluster.now, generation=(prev.generation + 1) if prev else 0,
        )
        if prev is not None:
            self.history.append(prev)
        self.placements[wid] = placement
        self.cluster.emit("workload_placed", {
            "workload": wid, "node": node.id, "pool": req.pool_selector,
            "vfs": [str(h) for h in handles], "kind": req.kind,
        })
        return placement

    def _release(self, placement: Placement) -> None:
        for h in placement.vf_handles:
            self.cluster.release_vf(h)
        placement.vf_handles = ()
        placement.cores = ()
        placement.gpu_slot = None

    def terminate(self, workload_id: str) -> Placement:
        placement = self.placements[workload_id]
        if placement.state in HOLDS_RESOURCES:
            self._release(placement)
        placement.state = PlacementState.TERMINATED
        self.cluster.emit("workload_terminated", {"workload": workload_id, "node": placement.node_id})
        return placement

    # -- failures -----------------------------------------------------------

    def on_node_failure_observed(self, node_id: str) -> list[tuple[str, float]]:
        timers = []
        for placement in self.live_on(node_id):
            if placement.state is not PlacementState.RUNNING:
                continue
            placement.state = PlacementState.EVICTING
            due = self.cluster.now + self.eviction_timeout
            placement.eviction_due = due
            timers.append((placement.workload_id, due))
            self.cluster.emit("eviction_timer_started", {
                "workload": placement.workload_id, "node": node_id,
                "timeout": None if math.isinf(self.eviction_timeout) else self.eviction_timeout,
            })
            if math.isinf(due):
                continue
            self.cluster.schedule_at(
                due, "eviction_timer_expired", {"workload": placement.workload_id, "node": node_id},
                lambda ev, p=placement: self._expire(p))
        return timers

    def _expire(self, placement: Placement) -> None:
        if placement.state is not PlacementState.EVICTING:
            return
        self._evict(placement)

    def _evict(self, placement: Placement) -> None:
        self._release(placement)
        placement.state = PlacementState.EVICTED
        self.cluster.emit("workload_evicted", {
            "workload": placement.workload_id, "node": placement.node_id, "pool": placement.pool,
        })
        if self.auto_redeploy:
            self._auto_redeploy(placement)

    def _auto_redeploy(self, placement: Placement) -> None:
        try:
            new = self.redeploy(placement)
        except NoFeasibleNode as exc:
            self.cluster.emit("redeploy_failed", {"workload": placement.workload_id, "reason": str(exc)})
            return
        for fn in self._redeploy_listeners:
            fn(placement, new)

    def drain(self, node_id: str) -> list[str]:
        """Evict every live workload from a node immediately (planned reboot)."""
        moved = []
        for placement in self.live_on(node_id):
            moved.append(placement.workload_id)
            self._evict(placement)
        return moved

    def redeploy(self, placement: Placement) -> Placement:
        """Fresh placement restricted to the original pool."""
        if placement.state is not PlacementState.EVICTED:
            raise ValueError(f"{placement.workload_id} is {placement.state.value}, not evicted")
        new = self.place(placement.requirements, workload_id=placement.workload_id)
        payload = {"workload": placement.workload_id, "from": placement.node_id,
                   "to": new.node_id, "pool": new.pool}
        if placement.requirements.split == "7.2":
            new.metadata["ru_reset"] = True
            new.metadata["du_mac_changed"] = True
            payload["ru_reset"] = True
        self.cluster.emit("workload_redeployed", payload)
        return new

    # -- audit --------------------------------------------------------------

    def audit(self) -> list[str]:
        """Check feasibility and conservation invariants; return violations."""
        problems = []
        for wid, p in sorted(self.placements.items()):
            if p.state not in HOLDS_RESOURCES:
                continue
            node = self.cluster.nodes.get(p.node_id)
            if node is None:
                problems.append(f"{wid}: on unknown node {p.node_id}")
                continue
            if node.pool != p.pool and p.state is PlacementState.RUNNING and node.state is NodeState.READY:
                problems.append(f"{wid}: running outside pool {p.pool}")
            if p.state is PlacementState.RUNNING and node.state is not NodeState.READY:
                unobserved = node.state is NodeState.FAILED and not node.observed_failed
                if not unobserved:
                    problems.append(f"{wid}: running on {node.state.value} node {node.id}")
            req = p.requirements
            if req.needs_gpu and p.gpu_slot is None:
                problems.append(f"{wid}: GPU required but none granted")
            if len(p.vf_handles) != len(req.vf_requests):
                problems.append(f"{wid}: {len(p.vf_handles)} VFs granted, {len(req.vf_requests)} requested")
            if len(p.cores) != req.isolated_core_request:
                problems.append(f"{wid}: {len(p.cores)} cores granted, {req.isolated_core_request} requested")
        for node_id, node in sorted(self.cluster.nodes.items()):
            live = self.live_on(node_id)
            cores = [c for p in live for c in p.cores]
            if len(cores) != len(set(cores)):
                problems.append(f"{node_id}: isolated cores double-granted")
            isolated = (node.applied.performance.isolated_cores
                        if node.applied and node.applied.performance else None)
            if isolated is not None and not set(cores) <= isolated and any(p.state is PlacementState.RUNNING for p in live):
                problems.append(f"{node_id}: granted cores outside isolated set")
            slots = [p.gpu_slot for p in live if p.gpu_slot is not None]
            if len(slots) != len(set(slots)) or any(s[1] >= self.gpu_partitions for s in slots):
                problems.append(f"{node_id}: GPU partitions oversubscribed")
            for nic, pool in node.vf_pools.items():
                if len(pool.allocated) > pool.vf_capacity:
                    problems.append(f"{node_id}/{nic}: VF pool over capacity")
                if pool.allocations - pool.releases != len(pool.allocated):
                    problems.append(f"{node_id}/{nic}: VF accounting drift")
                owned = {h.index for p in live for h in p.vf_handles if h.nic == nic}
                if owned != set(pool.allocated) and all(g.owner in self.placements for g in pool.allocated.values()):
                    problems.append(f"{node_id}/{nic}: VF ownership mismatch")
        return problems

    def snapshot(self) -> list[dict]:
        return [p.to_dict() for _, p in sorted(self.placements.items())]

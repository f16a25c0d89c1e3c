"""Deterministic discrete-event simulation of the compute cluster.

Time is simulated seconds. Events fire in nondecreasing time order and ties
break by insertion sequence, so a given seed plus a given command sequence
always yields the same event log.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .errors import (
    DuplicateNode,
    InvalidTransition,
    NodeFailed,
    ProfileError,
    UnknownNic,
    UnknownNode,
    UnknownPool,
    VfExhausted,
)

log = logging.getLogger(__name__)

DEFAULT_PROVISIONING_S = 2400.0
DEFAULT_RECONFIG_S = 600.0
DEFAULT_DETECTION_DELAY_S = 40.0
DEFAULT_NUM_VFS = 8


class NodeState(str, Enum):
    PROVISIONING = "provisioning"
    READY = "ready"
    CORDONED = "cordoned"
    FAILED = "failed"


_P, _R, _C, _F = NodeState
TRANSITIONS = frozenset({(_P, _R), (_R, _C), (_C, _R), (_P, _F), (_R, _F), (_C, _F), (_F, _P)})


def parse_cpu_list(text: str | Iterable[int]) -> frozenset[int]:
    """Parse a kernel-style cpu list such as ``"0-3,65-71"``."""
    if not isinstance(text, str):
        return frozenset(int(c) for c in text)
    cores: set[int] = set()
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, _, hi = part.partition("-")
        lo_i = int(lo)
        hi_i = int(hi) if hi else lo_i
        if hi_i < lo_i:
            raise ProfileError(f"bad cpu range {part!r}")
        cores.update(range(lo_i, hi_i + 1))
    return frozenset(cores)


def format_cpu_list(cores: Iterable[int]) -> str:
    out = []
    for _, grp in itertools.groupby(enumerate(sorted(cores)), lambda t: t[1] - t[0]):
        run = [c for _, c in grp]
        out.append(str(run[0]) if len(run) == 1 else f"{run[0]}-{run[-1]}")
    return ",".join(out)


# -- hardware ---------------------------------------------------------------

@dataclass(frozen=True)
class GpuSpec:
    model: str
    memory_gb: int


@dataclass(frozen=True)
class NicSpec:
    id: str
    capacity_gbps: float = 100.0
    vf_capacity: int = DEFAULT_NUM_VFS


@dataclass(frozen=True)
class NodeSpec:
    id: str
    model: str
    arch: str
    cpu_cores: int
    gpus: tuple[GpuSpec, ...] = ()
    nics: tuple[NicSpec, ...] = ()
    labels: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.arch not in ("x86", "arm"):
            raise ValueError(f"arch must be x86 or arm, got {self.arch!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "NodeSpec":
        return cls(
            id=d["id"],
            model=d["model"],
            arch=d["arch"],
            cpu_cores=int(d["cpu_cores"]),
            gpus=tuple(GpuSpec(g["model"], int(g["memory_gb"])) for g in d.get("gpus", [])),
            nics=tuple(NicSpec(n["id"], float(n.get("capacity_gbps", 100.0)),
                               int(n.get("vf_capacity", DEFAULT_NUM_VFS))) for n in d.get("nics", [])),
            labels=frozenset(d.get("labels", [])),
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "model": self.model,
            "arch": self.arch,
            "cpu_cores": self.cpu_cores,
            "gpus": [{"model": g.model, "memory_gb": g.memory_gb} for g in self.gpus],
            "nics": [{"id": n.id, "capacity_gbps": n.capacity_gbps, "vf_capacity": n.vf_capacity}
                     for n in self.nics],
            "labels": sorted(self.labels),
        }


@dataclass(frozen=True)
class VfHandle:
    node: str
    nic: str
    index: int

    def __str__(self) -> str:
        return f"{self.node}/{self.nic}/vf{self.index}"


@dataclass(frozen=True)
class VfGrant:
    index: int
    owner: str | None
    vlan: int | None
    mtu: int


class VirtualFunctionPool:
    """SR-IOV virtual functions carved from one physical NIC."""

    def __init__(self, nic: NicSpec):
        self.nic = nic
        self.vf_capacity = nic.vf_capacity
        self.allocated: dict[int, VfGrant] = {}
        self.allocations = 0
        self.releases = 0

    @property
    def free(self) -> int:
        return self.vf_capacity - len(self.allocated)

    def allocate(self, owner: str | None, vlan: int | None, mtu: int) -> int:
        for idx in range(self.vf_capacity):
            if idx not in self.allocated:
                self.allocated[idx] = VfGrant(idx, owner, vlan, mtu)
                self.allocations += 1
                return idx
        raise VfExhausted(f"all {self.vf_capacity} VFs of {self.nic.id} are allocated")

    def release(self, index: int) -> None:
        if index not in self.allocated:
            raise KeyError(f"VF {index} of {self.nic.id} is not allocated")
        del self.allocated[index]
        self.releases += 1


# -- profiles ---------------------------------------------------------------

@dataclass(frozen=True)
class PerformanceProfile:
    name: str
    reserved_cores: frozenset[int]
    isolated_cores: frozenset[int]
    hugepage_size: int
    hugepage_count: int
    realtime: bool = True
    high_power: bool = True

    def __post_init__(self):
        object.__setattr__(self, "reserved_cores", parse_cpu_list(self.reserved_cores))
        object.__setattr__(self, "isolated_cores", parse_cpu_list(self.isolated_cores))
        if self.reserved_cores & self.isolated_cores:
            raise ProfileError(f"profile {self.name}: reserved and isolated cores overlap")

    def check_fits(self, spec: NodeSpec) -> None:
        extra = (self.reserved_cores | self.isolated_cores) - set(range(spec.cpu_cores))
        if extra:
            raise ProfileError(
                f"profile {self.name} references cores {format_cpu_list(extra)} "
                f"absent on {spec.id} ({spec.cpu_cores} cores)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PerformanceProfile":
        return cls(d["name"], d["reserved"], d["isolated"], int(d["hugepage_size"]),
                   int(d["hugepage_count"]), bool(d.get("realtime", True)),
                   bool(d.get("high_power", True)))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "reserved": format_cpu_list(self.reserved_cores),
            "isolated": format_cpu_list(self.isolated_cores),
            "hugepage_size": self.hugepage_size,
            "hugepage_count": self.hugepage_count,
            "realtime": self.realtime,
            "high_power": self.high_power,
        }


@dataclass(frozen=True)
class PtpProfile:
    name: str
    interface: str
    scheduling_policy: str = "SCHED_FIFO"
    scheduling_priority: int = 65
    max_offset_ns: int = 50
    min_offset_ns: int = -50
    holdover_timeout_s: int = 5
    # servo constants are carried for fidelity only; nothing reads them
    servo: Mapping[str, float] = field(default_factory=dict)
    lock_time_s: float = 0.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "PtpProfile":
        return cls(
            d["name"], d["interface"], d.get("scheduling_policy", "SCHED_FIFO"),
            int(d.get("scheduling_priority", 65)), int(d.get("max_offset_ns", 50)),
            int(d.get("min_offset_ns", -50)), int(d.get("holdover_timeout_s", 5)),
            dict(d.get("servo", {})), float(d.get("lock_time_s", 0.0)),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "interface": self.interface,
            "scheduling_policy": self.scheduling_policy,
            "scheduling_priority": self.scheduling_priority,
            "max_offset_ns": self.max_offset_ns,
            "min_offset_ns": self.min_offset_ns,
            "holdover_timeout_s": self.holdover_timeout_s,
            "servo": dict(self.servo),
            "lock_time_s": self.lock_time_s,
        }


@dataclass(frozen=True)
class PoolBundle:
    """Everything a machine-config pool applies to its nodes."""

    name: str
    performance: PerformanceProfile | None = None
    ptp: PtpProfile | None = None
    operators: tuple[str, ...] = ()
    workload_classes: tuple[str, ...] = ()
    provisioning_duration: float = DEFAULT_PROVISIONING_S
    reconfig_duration: float = DEFAULT_RECONFIG_S

    @classmethod
    def from_dict(cls, d: Mapping) -> "PoolBundle":
        return cls(
            name=d["name"],
            performance=PerformanceProfile.from_dict(d["performance"]) if d.get("performance") else None,
            ptp=PtpProfile.from_dict(d["ptp"]) if d.get("ptp") else None,
            operators=tuple(d.get("operators", ())),
            workload_classes=tuple(d.get("workload_classes", ())),
            provisioning_duration=float(d.get("provisioning_duration", DEFAULT_PROVISIONING_S)),
            reconfig_duration=float(d.get("reconfig_duration", DEFAULT_RECONFIG_S)),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "performance": self.performance.to_dict() if self.performance else None,
            "ptp": self.ptp.to_dict() if self.ptp else None,
            "operators": list(self.operators),
            "workload_classes": list(self.workload_classes),
            "provisioning_duration": self.provisioning_duration,
            "reconfig_duration": self.reconfig_duration,
        }


class Node:
    """Runtime state of one node. Hardware lives in ``spec``."""

    def __init__(self, spec: NodeSpec, pool: str):
        self.spec = spec
        self.pool = pool
        self.state = NodeState.PROVISIONING
        self.applied: PoolBundle | None = None
        self.ptp_state = "unsynced"
        self.observed_failed = False
        self.failed_at: float | None = None
        self.vf_pools = {nic.id: VirtualFunctionPool(nic) for nic in spec.nics}
        self.pending: list[Event] = []

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def labels(self) -> frozenset[str]:
        return self.spec.labels | {f"node-role.kubernetes.io/{self.pool}"}

    def to_dict(self) -> dict:
        return {
            **self.spec.to_dict(),
            "labels": sorted(self.labels),
            "pool": self.pool,
            "state": self.state.value,
            "ptp": self.ptp_state,
            "profile": self.applied.name if self.applied else None,
            "vfs": {nic: {"allocated": len(p.allocated), "capacity": p.vf_capacity}
                    for nic, p in sorted(self.vf_pools.items())},
        }


# -- event queue ------------------------------------------------------------

@dataclass
class Event:
    time: float
    seq: int
    kind: str
    payload: dict
    action: Callable[["Event"], None] | None = field(default=None, repr=False)
    cancelled: bool = False

    def __lt__(self, other: "Event") -> bool:
        return (self.time, self.seq) < (other.time, other.seq)

    def record(self) -> dict:
        return {"time": self.time, "event": self.kind, "payload": self.payload}


class SimClock:
    def __init__(self, seed: int = 0):
        self.now = 0.0
        self.seed = seed
        self._heap: list[Event] = []
        self._seq = itertools.count()

    def schedule(self, at: float, kind: str, payload: dict | None = None, action=None) -> Event:
        if at < self.now:
            raise ValueError(f"cannot schedule {kind} in the past ({at} < {self.now})")
        ev = Event(float(at), next(self._seq), kind, dict(payload or {}), action)
        heapq.heappush(self._heap, ev)
        return ev

    def stamp(self, kind: str, payload: dict | None = None) -> Event:
        return Event(self.now, next(self._seq), kind, dict(payload or {}))

    def peek_time(self) -> float | None:
        while self._heap and self._heap[0].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0].time if self._heap else None

    def pop_due(self, until: float) -> Event | None:
        t = self.peek_time()
        if t is None or t > until:
            return None
        ev = heapq.heappop(self._heap)
        self.now = ev.time
        return ev

    def __len__(self) -> int:
        return sum(1 for e in self._heap if not e.cancelled)


# -- the cluster ------------------------------------------------------------

class Cluster:
    """Nodes, pools and the simulation clock that drives them."""

    def __init__(self, pools: Iterable[PoolBundle] = (), seed: int = 0,
                 detection_delay: float = DEFAULT_DETECTION_DELAY_S):
        self.clock = SimClock(seed)
        self.rng = random.Random(seed)
        self.seed = seed
        self.detection_delay = float(detection_delay)
        self.pools: dict[str, PoolBundle] = {}
        self.nodes: dict[str, Node] = {}
        self.log: list[dict] = []
        self._listeners: dict[str, list[Callable[[Event], None]]] = {}
        self.presets: dict[str, dict] = {}
        for bundle in pools:
            self.register_pool(bundle)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_seed(cls, data: Mapping, seed: int = 0, **kw) -> "Cluster":
        cluster = cls((PoolBundle.from_dict(p) for p in data.get("pools", [])), seed=seed, **kw)
        presets = data.get("presets", {})
        cluster.presets = {k: dict(v) for k, v in presets.items()}
        for entry in data.get("nodes", []):
            base = dict(presets.get(entry.get("preset"), {}))
            base.update({k: v for k, v in entry.items() if k not in ("preset", "pool", "state")})
            spec = NodeSpec.from_dict(base)
            if entry.get("state", "ready") == "ready":
                cluster.seed_node(spec, entry["pool"])
            else:
                cluster.add_node(spec, entry["pool"])
        return cluster

    @classmethod
    def load(cls, path: str | Path | None = None, seed: int = 0, **kw) -> "Cluster":
        if path is None:
            text = resources.files("ranorch.data").joinpath("cluster.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_seed(json.loads(text), seed=seed, **kw)

    def spec_from_preset(self, preset: str, node_id: str) -> NodeSpec:
        if preset not in self.presets:
            raise UnknownNode(f"unknown hardware preset {preset!r}; known: {', '.join(sorted(self.presets))}")
        return NodeSpec.from_dict(dict(self.presets[preset], id=node_id))

    def register_pool(self, bundle: PoolBundle) -> None:
        self.pools[bundle.name] = bundle

    @property
    def now(self) -> float:
        return self.clock.now

    # -- events -------------------------------------------------------------

    def on(self, kind: str, fn: Callable[[Event], None]) -> None:
        self._listeners.setdefault(kind, []).append(fn)

    def _fire(self, ev: Event) -> None:
        self.log.append(ev.record())
        log.debug("t=%.3f %s %s", ev.time, ev.kind, ev.payload)
        if ev.action is not None:
            ev.action(ev)
        for fn in self._listeners.get(ev.kind, ()):
            fn(ev)

    def emit(self, kind: str, payload: dict | None = None) -> Event:
        """Record an instantaneous event at the current time and notify listeners."""
        ev = self.clock.stamp(kind, payload)
        self._fire(ev)
        return ev

    def schedule(self, delay: float, kind: str, payload: dict | None = None, action=None) -> Event:
        if delay < 0:
            raise ValueError("delay must be non-negative")
        return self.clock.schedule(self.clock.now + delay, kind, payload, action)

    def schedule_at(self, at: float, kind: str, payload: dict | None = None, action=None) -> Event:
        return self.clock.schedule(at, kind, payload, action)

    def tick(self, until: float) -> list[dict]:
        """Fire every event with time <= until, in order, then set now = until."""
        if until < self.clock.now:
            raise ValueError(f"until ({until}) is before now ({self.clock.now})")
        mark = len(self.log)
        while (ev := self.clock.pop_due(until)) is not None:
            self._fire(ev)
        self.clock.now = float(until)
        # includes events emitted by actions and listeners along the way
        return self.log[mark:]

    def advance(self, delta: float) -> list[dict]:
        return self.tick(self.clock.now + delta)

    def run_until(self, predicate: Callable[[], bool], horizon: float = 1e7) -> float:
        """Fire events one by one until ``predicate()`` holds; return the time."""
        limit = self.clock.now + horizon
        while not predicate():
            t = self.clock.peek_time()
            if t is None or t > limit:
                raise RuntimeError("simulation went idle before the condition held")
            self.tick(t)
        return self.clock.now

    def run_until_idle(self, horizon: float = 1e7) -> float:
        limit = self.clock.now + horizon
        while (t := self.clock.peek_time()) is not None and t <= limit:
            self.tick(t)
        return self.clock.now

    def dumps_log(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)

    def export_log(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps_log())

    # -- node lifecycle -----------------------------------------------------

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"unknown node {node_id!r}") from None

    def pool(self, name: str) -> PoolBundle:
        try:
            return self.pools[name]
        except KeyError:
            raise UnknownPool(f"unknown pool {name!r}") from None

    def nodes_in_pool(self, pool: str) -> list[Node]:
        return [self.nodes[k] for k in sorted(self.nodes) if self.nodes[k].pool == pool]

    def _transition(self, node: Node, new: NodeState) -> None:
        if (node.state, new) not in TRANSITIONS:
            raise InvalidTransition(f"{node.id}: {node.state.value} -> {new.value} not allowed")
        node.state = new

    def _apply_bundle(self, node: Node, bundle: PoolBundle) -> None:
        node.applied = bundle
        if bundle.ptp is None:
            node.ptp_state = "unsynced"
        elif bundle.ptp.lock_time_s <= 0:
            node.ptp_state = "locked"
        else:
            node.ptp_state = "unsynced"
            node.pending.append(self.schedule(
                bundle.ptp.lock_time_s, "ptp_locked", {"node": node.id},
                lambda ev, n=node: setattr(n, "ptp_state", "locked") if n.state is NodeState.READY else None))

    def _check_bundle_fits(self, spec: NodeSpec, bundle: PoolBundle) -> None:
        if bundle.performance is not None:
            bundle.performance.check_fits(spec)

    def seed_node(self, spec: NodeSpec, pool: str) -> str:
        """Insert an already-provisioned node (cluster seed files)."""
        bundle = self.pool(pool)
        if spec.id in self.nodes:
            raise DuplicateNode(f"node {spec.id!r} already present")
        self._check_bundle_fits(spec, bundle)
        node = Node(spec, pool)
        node.state = NodeState.READY
        self.nodes[spec.id] = node
        self._apply_bundle(node, bundle)
        return spec.id

    def add_node(self, spec: NodeSpec, pool: str) -> str:
        bundle = self.pool(pool)
        existing = self.nodes.get(spec.id)
        if existing is not None and existing.state is not NodeState.FAILED:
            raise DuplicateNode(f"node {spec.id!r} already present")
        self._check_bundle_fits(spec, bundle)
        node = Node(spec, pool)
        if existing is not None:
            # re-add after failure: failed -> provisioning
            node.state = NodeState.FAILED
            self._transition(node, NodeState.PROVISIONING)
        self.nodes[spec.id] = node
        self.emit("node_added", {"node": spec.id, "pool": pool, "model": spec.model})

        def ready(ev, node=node, bundle=bundle):
            node.pending = [e for e in node.pending if e is not ev]
            self._transition(node, NodeState.READY)
            self._apply_bundle(node, bundle)

        node.pending.append(self.schedule(
            bundle.provisioning_duration, "node_ready",
            {"node": spec.id, "pool": pool, "profile": bundle.name}, ready))
        return spec.id

    def relabel_node(self, node_id: str, pool: str) -> None:
        node = self.node(node_id)
        bundle = self.pool(pool)
        if node.state is NodeState.FAILED:
            raise NodeFailed(f"node {node_id} has failed")
        if node.state is NodeState.PROVISIONING:
            raise InvalidTransition(f"node {node_id} is still provisioning")
        if pool == node.pool:
            return
        self._check_bundle_fits(node.spec, bundle)
        old = node.pool
        if node.state is NodeState.READY:
            self._transition(node, NodeState.CORDONED)
        self.emit("node_relabel_started", {"node": node_id, "from": old, "to": pool})
        # workloads leave before the reboot; listeners (scheduler) act on this
        self.emit("node_draining", {"node": node_id, "pool": old})
        node.pool = pool
        node.applied = None
        node.ptp_state = "unsynced"

        def back(ev, node=node, bundle=bundle):
            node.pending = [e for e in node.pending if e is not ev]
            self._transition(node, NodeState.READY)
            self._apply_bundle(node, bundle)

        node.pending.append(self.schedule(
            bundle.reconfig_duration, "node_reconfigured",
            {"node": node_id, "pool": pool, "profile": bundle.name}, back))

    def cordon(self, node_id: str) -> None:
        node = self.node(node_id)
        self._transition(node, NodeState.CORDONED)
        self.emit("node_cordoned", {"node": node_id})

    def uncordon(self, node_id: str) -> None:
        node = self.node(node_id)
        self._transition(node, NodeState.READY)
        self.emit("node_uncordoned", {"node": node_id})

    def inject_failure(self, node_id: str, at: float | None = None) -> None:
        self.node(node_id)
        at = self.clock.now if at is None else float(at)

        def fail(ev):
            node = self.nodes[node_id]
            if node.state is NodeState.FAILED:
                return
            self._transition(node, NodeState.FAILED)
            node.failed_at = ev.time
            node.observed_failed = False
            for pending in node.pending:
                pending.cancelled = True
            node.pending = []
            node.ptp_state = "unsynced"
            self.schedule(self.detection_delay, "node_failure_observed",
                          {"node": node_id, "failed_at": ev.time},
                          lambda ev2, n=node: setattr(n, "observed_failed", True))

        self.schedule_at(at, "node_failed", {"node": node_id}, fail)

    # -- SR-IOV -------------------------------------------------------------

    def vf_pool(self, node_id: str, nic: str) -> VirtualFunctionPool:
        node = self.node(node_id)
        try:
            return node.vf_pools[nic]
        except KeyError:
            raise UnknownNic(f"node {node_id} has no NIC {nic!r}") from None

    def allocate_vf(self, node_id: str, nic: str, vlan: int | None = None, mtu: int = 9216,
                    owner: str | None = None) -> VfHandle:
        pool = self.vf_pool(node_id, nic)
        node = self.nodes[node_id]
        if node.state is not NodeState.READY:
            raise VfExhausted(f"node {node_id} is {node.state.value}; no VFs can be granted")
        idx = pool.allocate(owner, vlan, mtu)
        return VfHandle(node_id, nic, idx)

    def release_vf(self, handle: VfHandle) -> None:
        self.vf_pool(handle.node, handle.nic).release(handle.index)

    # -- views --------------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "now": self.clock.now,
            "nodes": [self.nodes[k].to_dict() for k in sorted(self.nodes)],
            "pools": sorted(self.pools),
        }


def infinite(value: float | str | None) -> float:
    """Parse a timeout that may be spelled ``inf``/``never``."""
    if value is None:
        return math.inf
    if isinstance(value, str) and value.lower() in ("inf", "infinite", "never", "infinity"):
        return math.inf
    return float(value)

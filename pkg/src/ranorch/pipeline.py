"""Deployment and test pipelines, the image registry, and the reconciler.

Pipelines are sequences of tasks executed one after the other in simulated
time. Several runs may be in flight at once; their task events interleave
on the shared cluster clock.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .catalog import Catalog
from .cluster import Cluster
from .config import (
    STACK_USRP,
    NetworkScenario,
    ResolvedDeployment,
    RuInventory,
    TestSpec,
    UERecord,
    default_catalog,
    load_fixture,
    parse_deployment_file,
    parse_test_file,
    parse_ue_database,
    specialize_deployment,
)
from .errors import (
    AlreadyDeployed,
    DeploymentNotReady,
    MissingParent,
    NoPoolNode,
    RanOrchError,
    StartTimeout,
    UnknownImage,
    UnknownUe,
    WrongPool,
)
from .scheduler import Placement, PlacementState, Scheduler
from .telemetry import PerformanceModel, TestRecord, TestStore, UeSeries, synthesize_performance

log = logging.getLogger(__name__)

FIG8_BARS = ("test_specification", "gnb_setup", "ue_connection", "data_collection")


def _data(name: str) -> dict:
    return json.loads(resources.files("ranorch.data").joinpath(name).read_text())


# -- timing -----------------------------------------------------------------

@dataclass
class TimingModel:
    tasks: dict[str, float]
    gnb_setup: dict[str, float]
    jitter: float = 0.1
    link_rate_gbps: float = 10.0
    layer_overhead_s_per_gb: float = 0.1
    warm_pull_s: float = 0.005
    start_timeout_s: float = 120.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "TimingModel":
        return cls(dict(d["tasks"]), dict(d["gnb_setup"]), float(d.get("jitter", 0.1)),
                   float(d.get("link_rate_gbps", 10.0)), float(d.get("layer_overhead_s_per_gb", 0.1)),
                   float(d.get("warm_pull_s", 0.005)), float(d.get("start_timeout_s", 120.0)))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "TimingModel":
        data = _data("timing.json") if path is None else json.loads(Path(path).read_text())
        return cls.from_dict(data)

    def cold_pull(self, size_gb: float) -> float:
        return size_gb * 8.0 / self.link_rate_gbps + size_gb * self.layer_overhead_s_per_gb


# -- image registry ---------------------------------------------------------

@dataclass(frozen=True)
class ImageDescriptor:
    name: str
    tag: str
    size_gb: float
    parent: str | None = None
    build_s: float = 600.0

    @property
    def ref(self) -> str:
        return f"{self.name}:{self.tag}"

    @classmethod
    def from_dict(cls, d: Mapping) -> "ImageDescriptor":
        return cls(d["name"], d["tag"], float(d["size_gb"]), d.get("parent"), float(d.get("build_s", 600.0)))


@dataclass(frozen=True)
class BuildReport:
    pool: str
    node: str
    built: tuple[str, ...]
    reused: tuple[str, ...]
    charged_s: float


class Registry:
    """Images keyed by (name:tag, pool) plus a per-node pull cache."""

    def __init__(self):
        self.images: dict[tuple[str, str], ImageDescriptor] = {}
        self.cache: dict[str, set[tuple[str, str]]] = {}

    def has(self, ref: str, pool: str) -> bool:
        return (ref, pool) in self.images

    def get(self, ref: str, pool: str) -> ImageDescriptor:
        try:
            return self.images[(ref, pool)]
        except KeyError:
            if any(r == ref for r, _ in self.images):
                raise WrongPool(f"{ref} is not built for pool {pool}") from None
            raise UnknownImage(f"unknown image {ref}") from None

    def children(self, ref: str, pool: str) -> list[str]:
        return sorted(r for (r, p), d in self.images.items() if p == pool and d.parent == ref)

    def cached(self, node: str, ref: str, pool: str) -> bool:
        return (ref, pool) in self.cache.get(node, set())

    def evict_cache(self, node: str, ref: str | None = None) -> None:
        if ref is None:
            self.cache.pop(node, None)
        else:
            self.cache[node] = {k for k in self.cache.get(node, set()) if k[0] != ref}


# -- runs -------------------------------------------------------------------

@dataclass
class TaskRecord:
    name: str
    start: float
    end: float | None = None
    outcome: str = "running"
    detail: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return (self.end - self.start) if self.end is not None else 0.0

    def to_dict(self) -> dict:
        return {"task": self.name, "start": self.start, "end": self.end,
                "duration": self.duration, "outcome": self.outcome, "detail": self.detail}


# A task body returns (duration, detail) when the task starts. Raising aborts
# the run.
TaskFn = Callable[["PipelineRun"], tuple[float, dict]]


@dataclass
class PipelineRun:
    run_id: str
    kind: str
    tasks: list[TaskRecord] = field(default_factory=list)
    status: str = "pending"
    started_at: float | None = None
    ended_at: float | None = None
    error: str | None = None
    context: dict = field(default_factory=dict, repr=False)
    on_done: list[Callable[["PipelineRun"], None]] = field(default_factory=list, repr=False)

    @property
    def done(self) -> bool:
        return self.status in ("succeeded", "failed")

    def task(self, name: str) -> TaskRecord:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "kind": self.kind, "status": self.status,
                "started_at": self.started_at, "ended_at": self.ended_at, "error": self.error,
                "tasks": [t.to_dict() for t in self.tasks]}

    def dumps_ledger(self) -> str:
        return "".join(json.dumps({"run_id": self.run_id, **t.to_dict()}, sort_keys=True) + "\n"
                       for t in self.tasks)


@dataclass
class DeploymentRecord:
    resolved: ResolvedDeployment
    run: PipelineRun
    breakdown: dict[str, float | None]
    ready_at: float | None = None
    ues_attached: bool = False
    tests_run: int = 0

    @property
    def scenario(self) -> NetworkScenario:
        return self.resolved.scenario

    @property
    def total_duration(self) -> float:
        return math.fsum(v for v in self.breakdown.values() if v is not None)

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario.id,
            "resolved": self.resolved.to_dict(),
            "breakdown": dict(self.breakdown),
            "total_duration": self.total_duration,
            "ready_at": self.ready_at,
            "run": self.run.to_dict(),
        }


# -- engine -----------------------------------------------------------------

def node_slug(model: str) -> str:
    return model.split()[0].lower()


class Engine:
    """Owns the simulation and executes pipelines against it."""

    def __init__(self, cluster: Cluster | None = None, scheduler: Scheduler | None = None, *,
                 catalog: Catalog | None = None, inventory: RuInventory | None = None,
                 timing: TimingModel | None = None, model: PerformanceModel | None = None,
                 store: TestStore | None = None, ue_db: Mapping[str, UERecord] | None = None,
                 images: Mapping | None = None, prepull: bool = True, seed: int = 0):
        self.cluster = cluster or Cluster.load(seed=seed)
        self.scheduler = scheduler or Scheduler(self.cluster)
        self.catalog = catalog or default_catalog()
        self.inventory = inventory or RuInventory.load()
        self.timing = timing or TimingModel.load()
        self.model = model or PerformanceModel.load()
        self.store = store
        self.ue_db = dict(ue_db) if ue_db is not None else parse_ue_database(load_fixture("example_ue_db.json"))
        self.rng = random.Random(seed)
        self.seed = seed
        self.registry = Registry()
        self.deployments: dict[int, DeploymentRecord] = {}
        self.runs: list[PipelineRun] = []
        self.executed_tests: dict[str, str] = {}
        self._run_ids = 0
        self._test_seq = 0
        images = images if images is not None else _data("images.json")
        self.stack_images: dict[str, list[str]] = {k: list(v) for k, v in images.get("stack_images", {}).items()}
        for pool, stacks in images.get("pool_stacks", {}).items():
            if pool not in self.cluster.pools:
                continue
            for chain in images.get("chains", []):
                leaf_refs = {f"{d['name']}:{d['tag']}" for d in chain}
                if any(ref in leaf_refs for s in stacks for ref in self.stack_images.get(s, [])):
                    self.register_prebuilt([ImageDescriptor.from_dict(d) for d in chain], pool)
        if prepull:
            self.prepull_all()
        self.scheduler.on_redeployed(self._on_redeployed)

    # -- timing helpers -----------------------------------------------------

    def jittered(self, base: float) -> float:
        j = self.timing.jitter
        if j <= 0 or base <= 0:
            return float(base)
        return base * (1.0 + self.rng.uniform(-j, j))

    def stack_key(self, resolved: ResolvedDeployment) -> str:
        if resolved.stack_profile == STACK_USRP:
            return f"usrp-{resolved.scenario.du_high.name}"
        return resolved.stack_profile

    def perf_profile(self, resolved: ResolvedDeployment) -> str:
        return f"{node_slug(resolved.node_model)}-{self.stack_key(resolved)}"

    # -- registry -----------------------------------------------------------

    def register_prebuilt(self, chain: Sequence[ImageDescriptor], pool: str) -> None:
        for img in chain:
            self.registry.images.setdefault((img.ref, pool), img)

    def build_image_chain(self, chain: Sequence[ImageDescriptor], pool: str) -> BuildReport:
        """Build a parent-first chain on a node of ``pool``; reuse what exists."""
        self.cluster.pool(pool)
        nodes = [n for n in self.cluster.nodes_in_pool(pool) if n.state.value == "ready"]
        if not nodes:
            raise NoPoolNode(f"pool {pool} has no ready node to build on")
        node = nodes[0].id
        known = {ref for ref, p in self.registry.images if p == pool}
        built, reused, charged = [], [], 0.0
        for img in chain:
            if img.parent is not None and img.parent not in known:
                raise MissingParent(f"{img.ref}: parent {img.parent} not in registry for {pool}")
            existing = self.registry.images.get((img.ref, pool))
            if existing is not None and existing.parent == img.parent:
                reused.append(img.ref)
                continue
            self.registry.images[(img.ref, pool)] = img
            known.add(img.ref)
            built.append(img.ref)
            charged += img.build_s
        if built:
            self.cluster.emit("image_build_started", {"pool": pool, "node": node, "images": built})
            self.cluster.schedule(charged, "image_built", {"pool": pool, "node": node, "images": built,
                                                            "charged_s": charged})
        return BuildReport(pool, node, tuple(built), tuple(reused), charged)

    def pull_image(self, node_id: str, ref: str) -> float:
        node = self.cluster.node(node_id)
        img = self.registry.get(ref, node.pool)
        key = (ref, node.pool)
        if key in self.registry.cache.get(node_id, set()):
            return self.timing.warm_pull_s
        self.registry.cache.setdefault(node_id, set()).add(key)
        return self.timing.cold_pull(img.size_gb)

    def prepull_all(self) -> None:
        for node in self.cluster.nodes.values():
            for (ref, pool) in self.registry.images:
                if pool == node.pool:
                    self.registry.cache.setdefault(node.id, set()).add((ref, pool))

    # -- process runner -----------------------------------------------------

    def _new_run(self, kind: str) -> PipelineRun:
        self._run_ids += 1
        run = PipelineRun(f"{kind}-{self._run_ids:04d}", kind)
        self.runs.append(run)
        return run

    def start(self, run: PipelineRun, steps: Sequence[tuple[str, TaskFn]]) -> PipelineRun:
        run.status = "running"
        run.started_at = self.cluster.now
        self.cluster.emit("pipeline_started", {"run": run.run_id, "kind": run.kind})
        self._step(run, list(steps), 0)
        return run

    def _step(self, run: PipelineRun, steps, i: int) -> None:
        if i == len(steps):
            self._finish(run, "succeeded")
            return
        name, fn = steps[i]
        rec = TaskRecord(name, self.cluster.now)
        run.tasks.append(rec)
        try:
            duration, detail = fn(run)
        except RanOrchError as exc:
            rec.end = self.cluster.now
            rec.outcome = "failed"
            rec.detail = {"error": str(exc)}
            run.error = f"{type(exc).__name__}: {exc}"
            run.context["exception"] = exc
            self._finish(run, "failed")
            return
        rec.detail = detail

        def complete(ev, rec=rec):
            rec.end = ev.time
            rec.outcome = "ok"
            self._step(run, steps, i + 1)

        self.cluster.schedule(duration, "task_finished", {"run": run.run_id, "task": name}, complete)

    def _finish(self, run: PipelineRun, status: str) -> None:
        run.status = status
        run.ended_at = self.cluster.now
        self.cluster.emit("pipeline_finished", {"run": run.run_id, "kind": run.kind, "status": status})
        for fn in run.on_done:
            fn(run)

    def wait(self, run: PipelineRun) -> PipelineRun:
        self.cluster.run_until(lambda: run.done)
        return run

    def wait_all(self, runs: Iterable[PipelineRun]) -> None:
        runs = list(runs)
        self.cluster.run_until(lambda: all(r.done for r in runs))

    @staticmethod
    def raise_if_failed(run: PipelineRun) -> None:
        if run.status == "failed" and "exception" in run.context:
            raise run.context["exception"]

    # -- deployment ---------------------------------------------------------

    def specialize(self, scenario: NetworkScenario, pool: str | None = None) -> ResolvedDeployment:
        if scenario.id in self.deployments:
            raise AlreadyDeployed(f"scenario {scenario.id} is already deployed")
        return specialize_deployment(scenario, self.scheduler, catalog=self.catalog,
                                     inventory=self.inventory, pool=pool)

    def _pull_task(self, record_holder: dict) -> TaskFn:
        def pull(run):
            resolved = record_holder["resolved"]
            pulls = {ref: self.pull_image(resolved.target_node, ref)
                     for ref in self.stack_images.get(self.stack_key(resolved), [])}
            return math.fsum(pulls.values()), {"node": resolved.target_node, "pulls": pulls}
        return pull

    def _start_task(self, record_holder: dict) -> TaskFn:
        def start_gnb(run):
            resolved = record_holder["resolved"]
            self._require_running(resolved)
            t = self.jittered(self.timing.gnb_setup[resolved.stack_profile])
            if t > self.timing.start_timeout_s:
                raise StartTimeout(f"gNB start took {t:.1f}s > {self.timing.start_timeout_s}s")
            return t, {"stack": resolved.stack_profile, "containers": list(resolved.containers),
                       "api_calls": 1}
        return start_gnb

    def _require_running(self, resolved: ResolvedDeployment) -> Placement:
        placement = self.scheduler.placements.get(resolved.workload_id)
        if placement is None or placement.state is not PlacementState.RUNNING:
            raise DeploymentNotReady(f"workload {resolved.workload_id} is not running")
        return placement

    def start_deployment(self, resolved: ResolvedDeployment) -> DeploymentRecord:
        run = self._new_run("deployment")
        holder = {"resolved": resolved}
        record = DeploymentRecord(resolved, run, {k: None for k in FIG8_BARS})
        self.deployments[resolved.scenario.id] = record

        def emit_config(run):
            return self.jittered(self.timing.tasks["test_specification"]), {"resolved": resolved.to_dict()}

        def ready(run):
            return 0.0, {"node": resolved.target_node}

        def done(run):
            if run.status != "succeeded":
                return
            spec_t = run.task("emit-specialized-config").duration + run.task("pull-image").duration
            record.breakdown["test_specification"] = spec_t
            record.breakdown["gnb_setup"] = run.task("start-gnb").duration
            record.ready_at = run.ended_at
            self.cluster.emit("gnb_ready", {"scenario": resolved.scenario.id, "node": resolved.target_node})

        run.on_done.append(done)
        self.start(run, [
            ("emit-specialized-config", emit_config),
            ("pull-image", self._pull_task(holder)),
            ("start-gnb", self._start_task(holder)),
            ("ready", ready),
        ])
        return record

    def run_deployment_pipeline(self, resolved: ResolvedDeployment) -> DeploymentRecord:
        record = self.start_deployment(resolved)
        self.wait(record.run)
        self.raise_if_failed(record.run)
        return record

    def deploy(self, scenario: NetworkScenario, pool: str | None = None) -> DeploymentRecord:
        return self.run_deployment_pipeline(self.specialize(scenario, pool))

    def teardown(self, scenario_id: int) -> PipelineRun:
        record = self.deployments.pop(scenario_id)
        run = self._new_run("teardown")

        def stop(run):
            placement = self.scheduler.placements.get(record.resolved.workload_id)
            if placement is not None and placement.state is not PlacementState.TERMINATED:
                self.scheduler.terminate(record.resolved.workload_id)
            return self.timing.tasks.get("teardown", 3.0), {"workload": record.resolved.workload_id}

        self.start(run, [("teardown", stop)])
        return run

    # -- redeploy after eviction --------------------------------------------

    def _on_redeployed(self, old: Placement, new: Placement) -> None:
        record = next((r for r in self.deployments.values()
                       if r.resolved.workload_id == old.workload_id), None)
        if record is None:
            return
        resolved = dataclasses.replace(
            record.resolved, target_node=new.node_id, vf_grants=new.vf_handles,
            node_model=self.cluster.nodes[new.node_id].spec.model)
        record.resolved = resolved
        holder = {"resolved": resolved}
        run = self._new_run("redeploy")

        def reconnect(run):
            return self.timing.tasks.get("ue_reconnect", 30.0), {"ues": "reattach"}

        def gnb_up(run):
            record.ready_at = self.cluster.now
            self.cluster.emit("gnb_ready", {"scenario": resolved.scenario.id, "node": resolved.target_node,
                                            "redeploy": True, "ru_reset": bool(new.metadata.get("ru_reset"))})
            return 0.0, {"node": resolved.target_node}

        steps = [("pull-image", self._pull_task(holder)), ("start-gnb", self._start_task(holder)),
                 ("ready", gnb_up)]
        if record.ues_attached:
            steps.append(("ue-reconnect", reconnect))
            run.on_done.append(lambda r: r.status == "succeeded" and self.cluster.emit(
                "ue_traffic_resumed", {"scenario": resolved.scenario.id}))
        self.start(run, steps)

    # -- testing ------------------------------------------------------------

    def _assign_ues(self, test: TestSpec) -> list[UERecord]:
        pool = list(self.ue_db.values())
        chosen: list[UERecord] = []
        taken: set[str] = set()
        for ue in test.ue_specifications:
            if ue.ue_serial is not None:
                if ue.ue_serial not in self.ue_db:
                    raise UnknownUe(f"UE {ue.ue_serial!r} is not in the UE database")
                rec = self.ue_db[ue.ue_serial]
            else:
                free = [r for r in pool if r.serial_number not in taken]
                if not free:
                    raise UnknownUe(f"test needs {len(test.ue_specifications)} UEs, "
                                    f"database has {len(pool)}")
                rec = free[0]
            taken.add(rec.serial_number)
            chosen.append(rec)
        return chosen

    def start_test(self, test: TestSpec, deployment: DeploymentRecord | None = None, *,
                   restart: bool = False, ue_class: str = "sierra",
                   load_events: Sequence = (), seed: int | None = None,
                   smoke: bool = False) -> PipelineRun:
        """Schedule a test run. ``smoke`` only attaches UEs and collects, no traffic."""
        deployment = deployment or self.deployments.get(test.scenario_id)
        run = self._new_run("test")
        self._test_seq += 1
        seq = self._test_seq
        base_seed = self.seed * 1_000_003 + seq if seed is None else seed
        state: dict = {}

        def check(run):
            if deployment is None or deployment.ready_at is None:
                raise DeploymentNotReady(f"scenario {test.scenario_id} is not deployed")
            self._require_running(deployment.resolved)
            return 0.0, {}

        def restart_gnb(run):
            return self._start_task({"resolved": deployment.resolved})(run)

        def activate(run):
            ues = self._assign_ues(test)
            state["ues"] = ues
            return self.jittered(self.timing.tasks["ue_connection"]), {"ues": [u.serial_number for u in ues]}

        def traffic(run):
            self._require_running(deployment.resolved)
            deployment.ues_attached = True
            resolved = deployment.resolved
            profile = self.perf_profile(resolved)
            series = []
            direction = "dl"
            for i, (spec, ue) in enumerate(zip(test.ue_specifications, state["ues"])):
                direction = "dl" if spec.reverse else "ul"
                s = synthesize_performance(self.model, profile, ue_class, direction, spec.duration,
                                           base_seed * 101 + i, load_events=load_events,
                                           offered_mbps=spec.bandwidth_mbps)
                series.append(UeSeries(ue.serial_number, s.times, s.throughput_mbps, s.rtt_ms))
            state["series"] = series
            state["direction"] = direction
            state["profile"] = profile
            state["traffic_start"] = self.cluster.now
            return float(test.duration), {"profile": profile, "ues": len(series)}

        def collect(run):
            return self.jittered(self.timing.tasks["data_collection"]), {}

        def persist(run):
            resolved = deployment.resolved
            rec = TestRecord(
                scenario_id=test.scenario_id, stack=resolved.scenario.du_high.name,
                profile=state["profile"], direction=state["direction"], ue_class=ue_class,
                started_at=state["traffic_start"], ended_at=self.cluster.now, series=state["series"],
                metadata={"node": resolved.target_node, "stack_profile": resolved.stack_profile,
                          "du_low": resolved.scenario.du_low.name, "ru": resolved.scenario.ru.name,
                          "run_id": run.run_id, "test": test.to_dict()["network_scenario"]},
            )
            if self.store is not None:
                self.store.record(rec)
            run.context["record"] = rec
            return 0.0, {"record_id": rec.record_id}

        def done(run):
            if run.status != "succeeded":
                return
            if deployment.tests_run == 0:
                deployment.breakdown["ue_connection"] = run.task("activate-ues").duration
                deployment.breakdown["data_collection"] = run.task("collect-results").duration
            deployment.tests_run += 1

        run.on_done.append(done)
        steps = [("check-deployment", check)]
        if restart:
            steps.append(("restart-gnb", restart_gnb))
        if smoke:
            def attached(run):
                deployment.ues_attached = True
                return 0.0, {}
            steps += [("activate-ues", activate), ("attached", attached), ("collect-results", collect)]
        else:
            steps += [("activate-ues", activate), ("generate-traffic", traffic),
                      ("collect-results", collect), ("persist", persist)]
        return self.start(run, steps)

    def run_test_pipeline(self, test: TestSpec, deployment: DeploymentRecord | None = None,
                          **kw) -> TestRecord:
        run = self.start_test(test, deployment, **kw)
        self.wait(run)
        self.raise_if_failed(run)
        return run.context["record"]


# -- reconcile --------------------------------------------------------------

def test_fingerprint(test: TestSpec) -> str:
    return hashlib.sha256(test.dumps().encode()).hexdigest()[:16]


test_fingerprint.__test__ = False


@dataclass
class Action:
    kind: str  # deploy | redeploy | teardown | test
    scenario_id: int
    detail: str = ""
    outcome: str = "pending"
    error: str | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scenario_id": self.scenario_id, "detail": self.detail,
                "outcome": self.outcome, "error": self.error}


class Reconciler:
    """Converges running deployments and executed tests to a declared set."""

    ORDER = {"teardown": 0, "redeploy": 1, "deploy": 2, "test": 3}

    def __init__(self, engine: Engine):
        self.engine = engine
        self.warnings: list[str] = []

    @staticmethod
    def split(declared: Iterable) -> tuple[dict[int, NetworkScenario], list[TestSpec], list[str]]:
        scenarios: dict[int, NetworkScenario] = {}
        tests: list[TestSpec] = []
        warnings = []
        for item in declared:
            if isinstance(item, NetworkScenario):
                if item.id in scenarios and scenarios[item.id] != item:
                    warnings.append(f"scenario id {item.id} declared twice; keeping the first")
                    continue
                scenarios.setdefault(item.id, item)
            elif isinstance(item, TestSpec):
                tests.append(item)
            else:
                raise TypeError(f"cannot declare {type(item).__name__}")
        return scenarios, tests, warnings

    def diff(self, declared: Iterable) -> list[Action]:
        scenarios, tests, self.warnings = self.split(declared)
        running = self.engine.deployments
        actions = [Action("teardown", sid) for sid in sorted(running) if sid not in scenarios]
        for sid, scen in sorted(scenarios.items()):
            if sid not in running:
                actions.append(Action("deploy", sid))
            elif running[sid].scenario != scen:
                actions.append(Action("redeploy", sid))
        seen = set()
        for test in tests:
            fp = test_fingerprint(test)
            if fp in seen or fp in self.engine.executed_tests:
                continue
            seen.add(fp)
            if test.scenario_id not in scenarios:
                self.warnings.append(f"test {fp} targets undeclared scenario {test.scenario_id}")
                continue
            actions.append(Action("test", test.scenario_id, fp))
        actions.sort(key=lambda a: (self.ORDER[a.kind], a.scenario_id, a.detail))
        return actions

    def reconcile(self, declared: Iterable) -> list[Action]:
        declared = list(declared)
        actions = self.diff(declared)
        scenarios, tests, _ = self.split(declared)
        by_fp = {test_fingerprint(t): t for t in tests}
        eng = self.engine

        teardown_runs = []
        for a in actions:
            if a.kind in ("teardown", "redeploy") and a.scenario_id in eng.deployments:
                teardown_runs.append(eng.teardown(a.scenario_id))
                if a.kind == "teardown":
                    a.outcome = "ok"
        if teardown_runs:
            eng.wait_all(teardown_runs)

        deploy_records = []
        for a in actions:
            if a.kind not in ("deploy", "redeploy"):
                continue
            try:
                resolved = eng.specialize(scenarios[a.scenario_id])
            except RanOrchError as exc:
                a.outcome, a.error = "failed", str(exc)
                continue
            deploy_records.append((a, eng.start_deployment(resolved)))
        if deploy_records:
            eng.wait_all(r.run for _, r in deploy_records)
        for a, rec in deploy_records:
            if rec.run.status == "succeeded":
                a.outcome = "ok"
            else:
                a.outcome, a.error = "failed", rec.run.error
                self._release(rec)

        for a in actions:
            if a.kind != "test":
                continue
            run = eng.start_test(by_fp[a.detail])
            eng.wait(run)
            if run.status == "succeeded":
                a.outcome = "ok"
                eng.executed_tests[a.detail] = run.run_id
            else:
                a.outcome, a.error = "failed", run.error
        for a in actions:
            eng.cluster.emit("reconcile_action", a.to_dict())
        return actions

    def _release(self, record: DeploymentRecord) -> None:
        eng = self.engine
        eng.deployments.pop(record.scenario.id, None)
        placement = eng.scheduler.placements.get(record.resolved.workload_id)
        if placement is not None and placement.state is not PlacementState.TERMINATED:
            eng.scheduler.terminate(record.resolved.workload_id)


def load_declared(directory: str | Path, catalog: Catalog | None = None) -> list:
    """Read every *.json in a directory as a deployment or test declaration."""
    out = []
    for path in sorted(Path(directory).glob("*.json")):
        text = path.read_text()
        try:
            body = json.loads(text).get("network_scenario", {})
        except (json.JSONDecodeError, AttributeError):
            body = {}
        if isinstance(body, dict) and "ue_specification" in body:
            out.append(parse_test_file(text, catalog))
        else:
            out.append(parse_deployment_file(text, catalog))
    return out

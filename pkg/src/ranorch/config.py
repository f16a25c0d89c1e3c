"""Deployment files, test files and the UE database.

The JSON schemas match the files the workflows exchange: a deployment file
wraps a ``network_scenario`` with one object per role, a test file wraps a
``network_scenario`` with a ``ue_specification`` list, and the UE database
maps serial numbers to records. Unknown keys are errors everywhere.
"""

from __future__ import annotations

import ipaddress
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .catalog import Catalog, Role
from .errors import (
    BadImsi,
    CatalogError,
    ConfigTypeError,
    DuplicateSerial,
    IncompatibleScenario,
    NoFeasibleNode,
    ParamMismatch,
    RangeError,
    SchemaError,
    UnknownRu,
)

# role -> key used in the deployment file
ROLE_KEYS = {
    Role.CORE: "core_network",
    Role.CU: "cu",
    Role.DU_HIGH: "du-high",
    Role.DU_LOW: "du-low",
    Role.RU: "ru",
}

STACK_ARC = "arc"
STACK_FH72 = "fh72"
STACK_USRP = "usrp"


def dumps(data: Any) -> str:
    """Byte-stable serialization shared by every config artifact."""
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _load_json(text: str | bytes, *, pairs_hook=None) -> Any:
    try:
        return json.loads(text, object_pairs_hook=pairs_hook)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc.msg} at line {exc.lineno}") from None


def _obj(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigTypeError(f"expected object, got {type(value).__name__}", path)
    return value


def _keys(obj: Mapping, path: str, required: set[str], optional: set[str] = frozenset()) -> None:
    missing = sorted(required - obj.keys())
    if missing:
        raise SchemaError(f"missing key(s) {', '.join(missing)}", path)
    extra = sorted(obj.keys() - required - optional)
    if extra:
        raise SchemaError(f"unknown key(s) {', '.join(extra)}", path)


def _str(value, path: str, *, nullable: bool = False) -> str | None:
    if value is None and nullable:
        return None
    if not isinstance(value, str):
        raise ConfigTypeError(f"expected string, got {type(value).__name__}", path)
    return value


def _int(value, path: str, *, nullable: bool = False) -> int | None:
    if value is None and nullable:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigTypeError(f"expected integer, got {type(value).__name__}", path)
    return value


def _num(value, path: str) -> int | float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigTypeError(f"expected number, got {type(value).__name__}", path)
    return value


def _bool(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigTypeError(f"expected boolean, got {type(value).__name__}", path)
    return value


# -- deployment file --------------------------------------------------------

@dataclass(frozen=True)
class ComponentRef:
    name: str
    config_file: str | None = None


@dataclass(frozen=True)
class RuRef:
    name: str
    location: int | None = None
    config_file: str | None = None


@dataclass(frozen=True)
class NetworkScenario:
    id: int
    core_network: ComponentRef
    cu: ComponentRef
    du_high: ComponentRef
    du_low: ComponentRef
    ru: RuRef

    def assignments(self) -> dict[Role, str]:
        return {
            Role.CORE: self.core_network.name,
            Role.CU: self.cu.name,
            Role.DU_HIGH: self.du_high.name,
            Role.DU_LOW: self.du_low.name,
            Role.RU: self.ru.name,
        }

    def to_dict(self) -> dict:
        core = {"name": self.core_network.name}
        if self.core_network.config_file is not None:
            core["config_file"] = self.core_network.config_file
        return {"network_scenario": {
            "id": self.id,
            "core_network": core,
            "cu": {"name": self.cu.name, "config_file": self.cu.config_file},
            "du-high": {"name": self.du_high.name, "config_file": self.du_high.config_file},
            "du-low": {"name": self.du_low.name, "config_file": self.du_low.config_file},
            "ru": {"name": self.ru.name, "location": self.ru.location, "config_file": self.ru.config_file},
        }}

    def dumps(self) -> str:
        return dumps(self.to_dict())

    @classmethod
    def from_assignments(cls, values: Mapping[Role | str, str], scenario_id: int = 1,
                         ru_location: int | None = None) -> "NetworkScenario":
        v = {Role(k): n for k, n in values.items()}
        return cls(
            id=scenario_id,
            core_network=ComponentRef(v[Role.CORE]),
            cu=ComponentRef(v[Role.CU]),
            du_high=ComponentRef(v[Role.DU_HIGH]),
            du_low=ComponentRef(v[Role.DU_LOW]),
            ru=RuRef(v[Role.RU], ru_location),
        )


def _scenario_from_obj(data, catalog: Catalog | None) -> NetworkScenario:
    top = _obj(data, "$")
    _keys(top, "$", {"network_scenario"})
    ns = _obj(top["network_scenario"], "$.network_scenario")
    _keys(ns, "$.network_scenario", {"id", *ROLE_KEYS.values()})
    sid = _int(ns["id"], "$.network_scenario.id")
    if sid < 1:
        raise RangeError(f"$.network_scenario.id: must be >= 1, got {sid}")

    refs = {}
    for role, key in ROLE_KEYS.items():
        path = f"$.network_scenario.{key}"
        obj = _obj(ns[key], path)
        optional = {"config_file", "location"} if role is Role.RU else {"config_file"}
        _keys(obj, path, {"name"}, optional)
        name = _str(obj["name"], f"{path}.name")
        cfg = _str(obj.get("config_file"), f"{path}.config_file", nullable=True)
        if role is Role.RU:
            loc = _int(obj.get("location"), f"{path}.location", nullable=True)
            refs[role] = RuRef(name, loc, cfg)
        else:
            refs[role] = ComponentRef(name, cfg)

    scenario = NetworkScenario(sid, refs[Role.CORE], refs[Role.CU], refs[Role.DU_HIGH],
                               refs[Role.DU_LOW], refs[Role.RU])
    if catalog is not None:
        for role, name in scenario.assignments().items():
            if not catalog.has(role, name):
                raise CatalogError(f"$.network_scenario.{ROLE_KEYS[role]}.name: "
                                   f"no {role.value} component named {name!r}")
        report = catalog.validate_scenario(scenario)
        if not report.valid:
            raise IncompatibleScenario(report)
    return scenario


def parse_deployment_file(text: str | bytes, catalog: Catalog | None = None, *,
                          check_catalog: bool = True) -> NetworkScenario:
    """Parse a deployment file. Names are resolved and the graph is checked."""
    if check_catalog and catalog is None:
        catalog = default_catalog()
    return _scenario_from_obj(_load_json(text), catalog if check_catalog else None)


# -- test file --------------------------------------------------------------

@dataclass(frozen=True)
class UESpec:
    slice_id: int
    test_type: str
    bandwidth_mbps: float
    duration: float
    protocol: str
    reverse: bool
    json_output: bool
    server_hostname: str
    server_port: int
    ue_serial: str | None = None
    distribution: str | None = None
    packet_size_bytes: int | None = None

    def to_dict(self) -> dict:
        out = {
            "slice_id": self.slice_id,
            "test_type": self.test_type,
            "bandwidth_mbps": self.bandwidth_mbps,
            "duration": self.duration,
            "protocol": self.protocol,
            "reverse": self.reverse,
            "json_output": self.json_output,
            "server_hostname": self.server_hostname,
            "server_port": self.server_port,
        }
        for key in ("ue_serial", "distribution", "packet_size_bytes"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out


@dataclass(frozen=True)
class TestSpec:
    scenario_id: int
    ue_specifications: tuple[UESpec, ...]

    __test__ = False  # not a pytest class

    @property
    def duration(self) -> float:
        return max(u.duration for u in self.ue_specifications)

    def to_dict(self) -> dict:
        return {"network_scenario": {
            "id": self.scenario_id,
            "ue_specification": [u.to_dict() for u in self.ue_specifications],
        }}

    def dumps(self) -> str:
        return dumps(self.to_dict())


class TestParameterGraph:
    """Which UE-spec keys each traffic generator accepts."""

    __test__ = False

    def __init__(self, spec: Mapping):
        self.required: frozenset[str] = frozenset(spec["required"])
        self.generators: dict[str, frozenset[str]] = {
            gen: frozenset(opts) for gen, opts in spec["generators"].items()
        }
        self.values: dict[str, tuple[str, ...]] = {k: tuple(v) for k, v in spec.get("values", {}).items()}

    @property
    def all_optional(self) -> frozenset[str]:
        return frozenset().union(*self.generators.values())

    def allowed(self, generator: str) -> frozenset[str]:
        return self.required | self.generators[generator]

    def owners(self, key: str) -> list[str]:
        return sorted(g for g, opts in self.generators.items() if key in opts)


def validate_ue_spec(obj: Mapping, graph: TestParameterGraph, path: str = "$") -> UESpec:
    obj = _obj(obj, path)
    _keys(obj, path, set(graph.required), set(graph.all_optional))
    test_type = _str(obj["test_type"], f"{path}.test_type")
    if test_type not in graph.generators:
        raise RangeError(f"{path}.test_type: must be one of {sorted(graph.generators)}, got {test_type!r}")
    for key in sorted(obj.keys() - graph.allowed(test_type)):
        raise ParamMismatch(f"{path}.{key}: parameter not supported by {test_type} "
                            f"(only {', '.join(graph.owners(key))})")
    protocol = _str(obj["protocol"], f"{path}.protocol")
    if protocol not in graph.values.get("protocol", ("udp", "tcp")):
        raise RangeError(f"{path}.protocol: must be udp or tcp, got {protocol!r}")
    bw = _num(obj["bandwidth_mbps"], f"{path}.bandwidth_mbps")
    if bw <= 0:
        raise RangeError(f"{path}.bandwidth_mbps: must be > 0, got {bw}")
    duration = _num(obj["duration"], f"{path}.duration")
    if duration <= 0:
        raise RangeError(f"{path}.duration: must be > 0, got {duration}")
    port = _int(obj["server_port"], f"{path}.server_port")
    if not 1 <= port <= 65535:
        raise RangeError(f"{path}.server_port: must be in 1..65535, got {port}")
    hostname = _str(obj["server_hostname"], f"{path}.server_hostname")
    if not hostname:
        raise RangeError(f"{path}.server_hostname: must not be empty")
    distribution = _str(obj.get("distribution"), f"{path}.distribution", nullable=True)
    if distribution is not None and distribution not in graph.values.get("distribution", (distribution,)):
        raise RangeError(f"{path}.distribution: unknown distribution {distribution!r}")
    packet = _int(obj.get("packet_size_bytes"), f"{path}.packet_size_bytes", nullable=True)
    if packet is not None and packet <= 0:
        raise RangeError(f"{path}.packet_size_bytes: must be > 0")
    return UESpec(
        slice_id=_int(obj["slice_id"], f"{path}.slice_id"),
        test_type=test_type,
        bandwidth_mbps=bw,
        duration=duration,
        protocol=protocol,
        reverse=_bool(obj["reverse"], f"{path}.reverse"),
        json_output=_bool(obj["json_output"], f"{path}.json_output"),
        server_hostname=hostname,
        server_port=port,
        ue_serial=_str(obj.get("ue_serial"), f"{path}.ue_serial", nullable=True),
        distribution=distribution,
        packet_size_bytes=packet,
    )


def _test_from_obj(data, graph: TestParameterGraph) -> TestSpec:
    top = _obj(data, "$")
    _keys(top, "$", {"network_scenario"})
    ns = _obj(top["network_scenario"], "$.network_scenario")
    _keys(ns, "$.network_scenario", {"id", "ue_specification"})
    sid = _int(ns["id"], "$.network_scenario.id")
    if sid < 1:
        raise RangeError(f"$.network_scenario.id: must be >= 1, got {sid}")
    ues = ns["ue_specification"]
    if not isinstance(ues, list):
        raise ConfigTypeError("expected list", "$.network_scenario.ue_specification")
    if not ues:
        raise SchemaError("at least one UE specification is required", "$.network_scenario.ue_specification")
    specs = tuple(validate_ue_spec(u, graph, f"$.network_scenario.ue_specification[{i}]")
                  for i, u in enumerate(ues))
    return TestSpec(sid, specs)


def parse_test_file(text: str | bytes, catalog: Catalog | None = None) -> TestSpec:
    catalog = catalog or default_catalog()
    return _test_from_obj(_load_json(text), TestParameterGraph(catalog.test_parameters))


# -- UE database ------------------------------------------------------------

UE_KEYS = {"ue_hostname", "ue_imsi", "ue_ip_address", "ue_location", "ue_model", "ue_serial_number"}
_IMSI = re.compile(r"\d{15}")
_LOCATION = re.compile(r"[^/]+/[^/]+")


@dataclass(frozen=True)
class UERecord:
    serial_number: str
    ue_hostname: str
    ue_imsi: str
    ue_ip_address: str
    ue_location: str
    ue_model: str

    def to_dict(self) -> dict:
        return {
            "ue_hostname": self.ue_hostname,
            "ue_imsi": self.ue_imsi,
            "ue_ip_address": self.ue_ip_address,
            "ue_location": self.ue_location,
            "ue_model": self.ue_model,
            "ue_serial_number": self.serial_number,
        }


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateSerial(f"duplicate key {key!r}")
        out[key] = value
    return out


def parse_ue_database(text: str | bytes) -> dict[str, UERecord]:
    data = _obj(_load_json(text, pairs_hook=_reject_duplicates), "$")
    db: dict[str, UERecord] = {}
    for serial, rec in data.items():
        path = f"$.{serial}"
        rec = _obj(rec, path)
        _keys(rec, path, UE_KEYS)
        for key in UE_KEYS:
            _str(rec[key], f"{path}.{key}")
        if rec["ue_serial_number"] != serial:
            raise SchemaError(f"serial number {rec['ue_serial_number']!r} does not match key", path)
        if not _IMSI.fullmatch(rec["ue_imsi"]):
            raise BadImsi(f"{path}.ue_imsi: IMSI must be exactly 15 digits, got {rec['ue_imsi']!r}")
        try:
            ipaddress.IPv4Address(rec["ue_ip_address"])
        except ValueError:
            raise SchemaError(f"not an IPv4 address: {rec['ue_ip_address']!r}", f"{path}.ue_ip_address") from None
        if not _LOCATION.fullmatch(rec["ue_location"]):
            raise SchemaError("location must be room/position", f"{path}.ue_location")
        db[serial] = UERecord(serial, rec["ue_hostname"], rec["ue_imsi"], rec["ue_ip_address"],
                              rec["ue_location"], rec["ue_model"])
    return db


def ue_database_to_dict(db: Mapping[str, UERecord]) -> dict:
    return {serial: rec.to_dict() for serial, rec in db.items()}


def dumps_ue_database(db: Mapping[str, UERecord]) -> str:
    return dumps(ue_database_to_dict(db))


# -- round trip -------------------------------------------------------------

def serialize(value) -> str:
    if isinstance(value, (NetworkScenario, TestSpec)):
        return value.dumps()
    if isinstance(value, Mapping):
        return dumps_ue_database(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def round_trip(value, catalog: Catalog | None = None):
    text = serialize(value)
    if isinstance(value, NetworkScenario):
        return parse_deployment_file(text, catalog)
    if isinstance(value, TestSpec):
        return parse_test_file(text, catalog)
    return parse_ue_database(text)


# -- RU inventory and specialization ----------------------------------------

_MAC = re.compile(r"[0-9a-f]{2}(:[0-9a-f]{2}){5}")


@dataclass(frozen=True)
class RuEntry:
    name: str
    location: int | None
    mac: str
    vlan_cplane: int = 2
    vlan_uplane: int = 3


class RuInventory:
    """Static map from RU name (+ location) to MAC address."""

    def __init__(self, entries: Mapping[str, Any]):
        self._entries: dict[str, list[RuEntry]] = {}
        for name, raw in entries.items():
            items = raw if isinstance(raw, list) else [raw]
            for item in items:
                mac = str(item["mac"]).lower()
                if not _MAC.fullmatch(mac):
                    raise SchemaError(f"bad MAC {item['mac']!r}", f"$.{name}")
                self._entries.setdefault(name, []).append(RuEntry(
                    name, item.get("location"), mac,
                    int(item.get("vlan_cplane", 2)), int(item.get("vlan_uplane", 3))))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "RuInventory":
        if path is None:
            text = resources.files("ranorch.data").joinpath("ru_inventory.json").read_text()
        else:
            text = Path(path).read_text()
        return cls(json.loads(text))

    def resolve(self, name: str, location: int | None = None) -> RuEntry:
        entries = self._entries.get(name)
        if not entries:
            raise UnknownRu(f"no RU named {name!r} in the inventory")
        if location is None:
            return entries[0]
        for entry in entries:
            if entry.location == location:
                return entry
        raise UnknownRu(f"no {name} RU at location {location}")

    def default_location(self, name: str) -> int | None:
        return self.resolve(name).location


@dataclass(frozen=True)
class ResolvedDeployment:
    scenario: NetworkScenario
    ru_mac: str
    target_node: str
    vf_grants: tuple
    pod_layout: str
    containers: tuple[str, ...]
    stack_profile: str
    pool: str
    workload_id: str
    node_model: str = ""

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict()["network_scenario"],
            "ru_mac": self.ru_mac,
            "target_node": self.target_node,
            "node_model": self.node_model,
            "pool": self.pool,
            "workload_id": self.workload_id,
            "vf_grants": [str(h) for h in self.vf_grants],
            "pod_layout": self.pod_layout,
            "containers": list(self.containers),
            "stack_profile": self.stack_profile,
        }


POD_TWO_CONTAINERS = "single_pod_two_containers"
POD_ONE_CONTAINER = "single_pod_single_container"

# isolated cores requested per stack profile
STACK_CORES = {STACK_ARC: 16, STACK_FH72: 8, STACK_USRP: 4}


def stack_profile(scenario: NetworkScenario, catalog: Catalog) -> str:
    if catalog.lookup(Role.DU_LOW, scenario.du_low.name).requires_accelerator:
        return STACK_ARC
    if scenario.ru.name.startswith("usrp"):
        return STACK_USRP
    return STACK_FH72


def workload_requirements(scenario: NetworkScenario, catalog: Catalog, pool: str,
                          ru: RuEntry | None = None, namespace: str = "ran"):
    from .scheduler import VfRequest, WorkloadRequirements

    profile = stack_profile(scenario, catalog)
    if profile == STACK_ARC:
        # the L1 adds the VLAN tag itself, so the port is passed untagged
        vfs = (VfRequest(vlan=None),)
        return WorkloadRequirements(pool, namespace, needs_gpu=True, vf_requests=vfs,
                                    isolated_core_request=STACK_CORES[profile], needs_ptp=True,
                                    split="7.2", kind=f"gnb-{profile}")
    if profile == STACK_FH72:
        cp = ru.vlan_cplane if ru else 2
        up = ru.vlan_uplane if ru else 3
        vfs = (VfRequest(vlan=cp), VfRequest(vlan=up))
        return WorkloadRequirements(pool, namespace, vf_requests=vfs,
                                    isolated_core_request=STACK_CORES[profile], needs_ptp=True,
                                    split="7.2", kind=f"gnb-{profile}")
    return WorkloadRequirements(pool, namespace, vf_requests=(VfRequest(vlan=None, mtu=9000),),
                                isolated_core_request=STACK_CORES[profile], split="8.1",
                                kind=f"gnb-{profile}")


def specialize_deployment(scenario: NetworkScenario, scheduler, *, catalog: Catalog | None = None,
                          inventory: RuInventory | None = None, pool: str | None = None,
                          workload_id: str | None = None) -> ResolvedDeployment:
    """Bind an abstract scenario to an RU MAC, a node, VFs and a pod layout."""
    catalog = catalog or default_catalog()
    inventory = inventory or RuInventory.load()
    report = catalog.validate_scenario(scenario)
    if not report.valid:
        raise IncompatibleScenario(report)
    ru = inventory.resolve(scenario.ru.name, scenario.ru.location)
    profile = stack_profile(scenario, catalog)
    cluster = scheduler.cluster
    if pool is not None:
        pools = [pool]
    else:
        pools = [name for name in sorted(cluster.pools) if profile in cluster.pools[name].workload_classes]
    if not pools:
        raise NoFeasibleNode(f"no pool accepts {profile} workloads")
    wid = workload_id or f"gnb-{scenario.id}"
    reasons: dict[str, str] = {}
    placement = None
    for candidate in pools:
        req = workload_requirements(scenario, catalog, candidate, ru)
        try:
            placement = scheduler.place(req, workload_id=wid)
            break
        except NoFeasibleNode as exc:
            reasons.update(exc.reasons or {candidate: str(exc)})
    if placement is None:
        raise NoFeasibleNode(f"no feasible node for scenario {scenario.id}", reasons)

    accelerated = profile == STACK_ARC
    if accelerated:
        containers = (f"{scenario.du_low.name}-l1", f"{scenario.du_high.name}-l2")
    else:
        containers = (f"{scenario.du_high.name}-gnb",)
    return ResolvedDeployment(
        scenario=scenario,
        ru_mac=ru.mac,
        target_node=placement.node_id,
        vf_grants=placement.vf_handles,
        pod_layout=POD_TWO_CONTAINERS if accelerated else POD_ONE_CONTAINER,
        containers=containers,
        stack_profile=profile,
        pool=placement.pool,
        workload_id=wid,
        node_model=cluster.nodes[placement.node_id].spec.model,
    )


_DEFAULT_CATALOG: Catalog | None = None


def default_catalog() -> Catalog:
    global _DEFAULT_CATALOG
    if _DEFAULT_CATALOG is None:
        _DEFAULT_CATALOG = Catalog.seeded()
    return _DEFAULT_CATALOG


def load_fixture(name: str) -> str:
    """Text of a bundled example file (``example_deployment.json`` etc.)."""
    return resources.files("ranorch.data").joinpath(name).read_text()

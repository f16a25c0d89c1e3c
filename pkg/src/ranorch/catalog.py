"""Component catalog and the pairwise compatibility graph.

A scenario assigns at most one component name to each of the five roles.
It is valid when every role is filled and every pair of filled roles is an
edge in the graph.
"""

from __future__ import annotations

import itertools
import json
import threading
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DuplicateId, UnknownComponent, UnknownPeer


class Role(str, Enum):
    CORE = "core"
    CU = "cu"
    DU_HIGH = "du_high"
    DU_LOW = "du_low"
    RU = "ru"

    def __str__(self) -> str:
        return self.value


ROLES: tuple[Role, ...] = tuple(Role)


@dataclass(frozen=True)
class ComponentDescriptor:
    id: str
    role: Role
    name: str
    requires_accelerator: bool = False
    config_template: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "role": self.role.value,
            "name": self.name,
            "requires_accelerator": self.requires_accelerator,
            "config_template": self.config_template,
        }


class ValidationStatus(str, Enum):
    VALID = "valid"
    MISSING_VALUES = "missing_values"
    INCOMPATIBLE = "incompatible"


@dataclass(frozen=True)
class ValidationReport:
    status: ValidationStatus
    missing_roles: tuple[Role, ...] = ()
    # (role_a, role_b, name_a, name_b), role_a before role_b in ROLES order
    conflicts: tuple[tuple[Role, Role, str, str], ...] = ()
    message: str = ""

    @property
    def valid(self) -> bool:
        return self.status is ValidationStatus.VALID

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "missing_roles": [r.value for r in self.missing_roles],
            "conflicts": [[a.value, b.value, x, y] for a, b, x, y in self.conflicts],
            "message": self.message,
        }


def render_report_message(missing: Iterable[Role], conflicts) -> str:
    missing = list(missing)
    conflicts = list(conflicts)
    if not missing and not conflicts:
        return "configuration is valid"
    parts = []
    if missing:
        parts.append("missing values for: " + ", ".join(r.value for r in missing))
    for ra, rb, a, b in conflicts:
        parts.append(f"incompatible: {ra.value}={a} with {rb.value}={b}")
    return "; ".join(parts)


def _assignments(scenario) -> dict[Role, str | None]:
    """Accept a NetworkScenario-like object or a plain role -> name mapping."""
    if hasattr(scenario, "assignments"):
        raw = scenario.assignments()
    else:
        raw = scenario or {}
    out: dict[Role, str | None] = {r: None for r in ROLES}
    for key, value in raw.items():
        out[Role(key)] = value
    return out


class Catalog:
    """Thread-safe registry of components plus their compatibility edges."""

    def __init__(self, components: Iterable[ComponentDescriptor] = (), edges: Iterable = ()):
        self._lock = threading.RLock()
        self._components: dict[str, ComponentDescriptor] = {}
        self._by_role_name: dict[tuple[Role, str], str] = {}
        self._edges: set[frozenset[str]] = set()
        self.test_parameters: dict = {}
        for desc in components:
            self._add(desc)
        for a, b in edges:
            self._require(a, UnknownPeer)
            self._require(b, UnknownPeer)
            self._edges.add(frozenset((a, b)))

    # -- loading / saving ---------------------------------------------------

    @classmethod
    def from_dict(cls, data: Mapping) -> "Catalog":
        comps = [ComponentDescriptor(**c) for c in data.get("components", [])]
        cat = cls(comps, [tuple(e) for e in data.get("edges", [])])
        cat.test_parameters = dict(data.get("test_parameters", {}))
        return cat

    @classmethod
    def load(cls, path: str | Path) -> "Catalog":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def seeded(cls) -> "Catalog":
        text = resources.files("ranorch.data").joinpath("catalog.json").read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        with self._lock:
            data = {
                "components": [self._components[k].to_dict() for k in sorted(self._components)],
                "edges": sorted(sorted(e) for e in self._edges),
            }
            if self.test_parameters:
                data["test_parameters"] = self.test_parameters
            return data

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # -- registry -----------------------------------------------------------

    def _add(self, desc: ComponentDescriptor) -> None:
        if desc.id in self._components:
            raise DuplicateId(f"component id {desc.id!r} already registered")
        key = (desc.role, desc.name)
        if key in self._by_role_name:
            raise DuplicateId(f"{desc.role.value} component named {desc.name!r} already registered")
        self._components[desc.id] = desc
        self._by_role_name[key] = desc.id

    def _require(self, cid: str, exc=UnknownComponent) -> ComponentDescriptor:
        try:
            return self._components[cid]
        except KeyError:
            raise exc(f"unknown component id {cid!r}") from None

    def register_component(self, descriptor: ComponentDescriptor, compatible_with: Iterable[str] = ()) -> str:
        peers = list(compatible_with)
        with self._lock:
            for peer in peers:
                self._require(peer, UnknownPeer)
            self._add(descriptor)
            for peer in peers:
                self._edges.add(frozenset((descriptor.id, peer)))
        return descriptor.id

    def get(self, cid: str) -> ComponentDescriptor:
        with self._lock:
            return self._require(cid)

    def lookup(self, role: Role | str, name: str) -> ComponentDescriptor:
        role = Role(role)
        with self._lock:
            cid = self._by_role_name.get((role, name))
            if cid is None:
                raise UnknownComponent(f"no {role.value} component named {name!r}")
            return self._components[cid]

    def has(self, role: Role | str, name: str) -> bool:
        with self._lock:
            return (Role(role), name) in self._by_role_name

    def components(self, role: Role | str | None = None) -> list[ComponentDescriptor]:
        with self._lock:
            comps = sorted(self._components.values(), key=lambda d: d.id)
        if role is not None:
            role = Role(role)
            comps = [c for c in comps if c.role is role]
        return comps

    def names(self, role: Role | str) -> list[str]:
        return sorted(c.name for c in self.components(role))

    def edges(self) -> list[tuple[str, str]]:
        with self._lock:
            return sorted(tuple(sorted(e)) for e in self._edges)

    # -- queries ------------------------------------------------------------

    def compatible(self, a: str, b: str) -> bool:
        with self._lock:
            self._require(a)
            self._require(b)
            if a == b:
                return True
            return frozenset((a, b)) in self._edges

    def validate_scenario(self, scenario) -> ValidationReport:
        assign = _assignments(scenario)
        missing = tuple(r for r in ROLES if assign[r] is None)
        filled = [(r, self.lookup(r, assign[r])) for r in ROLES if assign[r] is not None]
        conflicts = tuple(
            (ra, rb, da.name, db.name)
            for (ra, da), (rb, db) in itertools.combinations(filled, 2)
            if not self.compatible(da.id, db.id)
        )
        if conflicts:
            status = ValidationStatus.INCOMPATIBLE
        elif missing:
            status = ValidationStatus.MISSING_VALUES
        else:
            status = ValidationStatus.VALID
        return ValidationReport(status, missing, conflicts, render_report_message(missing, conflicts))

    def allowed_values(self, role: Role | str, partial=None) -> set[str]:
        """Names of ``role`` components compatible with every other filled role."""
        role = Role(role)
        assign = _assignments(partial)
        fixed = [self.lookup(r, n) for r, n in assign.items() if n is not None and r is not role]
        return {
            cand.name
            for cand in self.components(role)
            if all(self.compatible(cand.id, other.id) for other in fixed)
        }

    def describe_graph(self) -> str:
        """Plain-text rendering of the graph, one component per line."""
        lines = []
        for desc in self.components():
            peers = sorted(
                f"{self.get(p).role.value}={self.get(p).name}"
                for e in self._edges if desc.id in e
                for p in e if p != desc.id
            )
            lines.append(f"{desc.role.value}={desc.name}: " + (", ".join(peers) or "(no compatible peers)"))
        return "\n".join(lines)

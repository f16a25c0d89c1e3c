"""Intent agent: a tool-calling loop that fills and validates a configuration.

The backend only ever sees two tools, ``set_parameter`` and ``validate``.
Validation runs after every iteration too, so a session finishes as soon as
the working configuration is valid, and nothing leaves the session otherwise.
"""

from __future__ import annotations

import json
import logging
import os
import re
import statistics
import string
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Iterable, Mapping, Sequence

from .catalog import ROLES, Catalog, Role
from .config import NetworkScenario, RuInventory, TestParameterGraph, TestSpec, default_catalog, validate_ue_spec
from .errors import AgentFailure, BackendUnavailable, BudgetExhausted, ConfigError, WallTimeout

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 16
DEFAULT_WALL_BUDGET_S = 120.0
DEFAULT_HOST = "http://server.automation.otic.open6g.net"
DEFAULT_PORT = 32201
MAX_UES = 64

MODES = ("deploy", "test")
PHASES = ("filling", "validating", "done", "failed")

TOOLS = [
    {
        "type": "function",
        "function": {
            "name": "set_parameter",
            "description": "Set one configuration parameter.",
            "parameters": {
                "type": "object",
                "properties": {"name": {"type": "string"}, "value": {}},
                "required": ["name", "value"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": "validate",
            "description": "Check the current configuration and report problems.",
            "parameters": {"type": "object", "properties": {}},
        },
    },
]

TEST_SCALARS = ("scenario_id", "ue_count")


def _prompt(name: str) -> string.Template:
    return string.Template(resources.files("ranorch.data").joinpath("prompts", name).read_text())


# -- reports ----------------------------------------------------------------

@dataclass(frozen=True)
class AgentReport:
    """Validation outcome in a mode-independent shape."""

    status: str  # valid | missing_values | incompatible
    missing: tuple[str, ...] = ()
    conflicts: tuple[tuple[str, str, Any, Any], ...] = ()
    allowed: tuple[tuple[str, tuple], ...] = ()
    message: str = ""

    @property
    def valid(self) -> bool:
        return self.status == "valid"

    def to_dict(self) -> dict:
        return {"status": self.status, "missing": list(self.missing),
                "conflicts": [list(c) for c in self.conflicts],
                "allowed_values": {k: list(v) for k, v in self.allowed},
                "message": self.message}


@dataclass(frozen=True)
class ToolResult:
    ok: bool
    name: str | None = None
    value: Any = None
    reason: str | None = None  # unknown_path | illegal_value | not_allowed | incompatible
    message: str = ""
    allowed: tuple = ()

    def to_dict(self) -> dict:
        d = {"ok": self.ok, "name": self.name, "value": self.value, "message": self.message}
        if not self.ok:
            d["reason"] = self.reason
            d["allowed_values"] = list(self.allowed)
        return d


# -- session ----------------------------------------------------------------

@dataclass
class TraceEntry:
    iteration: int
    prompt: str
    reply_text: str | None
    tool_calls: list[dict]
    report: dict

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "prompt": self.prompt, "reply": self.reply_text,
                "tool_calls": self.tool_calls, "report": self.report}


@dataclass
class AgentMetrics:
    success: bool
    iterations: int
    runtime: float
    failure_reason: str | None = None

    def to_dict(self) -> dict:
        return {"success": self.success, "iterations": self.iterations,
                "runtime": self.runtime, "failure_reason": self.failure_reason}


class AgentSession:
    """Working configuration plus the two tools that mutate and check it."""

    def __init__(self, mode: str, intent_text: str, *, catalog: Catalog | None = None,
                 budget: int = DEFAULT_BUDGET, wall_budget: float = DEFAULT_WALL_BUDGET_S,
                 max_ues: int = MAX_UES):
        if mode not in MODES:
            raise ValueError(f"mode must be deploy or test, got {mode!r}")
        if budget < 1 or wall_budget <= 0:
            raise ValueError("budgets must be positive")
        self.mode = mode
        self.intent_text = intent_text
        self.catalog = catalog or default_catalog()
        self.graph = TestParameterGraph(self.catalog.test_parameters)
        self.budget = budget
        self.wall_budget = wall_budget
        self.max_ues = max_ues
        self.working: dict[str, Any] = {}
        self.iteration = 0
        self.phase = "filling"
        self.trace: list[TraceEntry] = []
        self.last_report: AgentReport | None = None

    # -- paths ----------------------------------------------------------------

    @property
    def paths(self) -> tuple[str, ...]:
        if self.mode == "deploy":
            return tuple(r.value for r in ROLES)
        return TEST_SCALARS + tuple(sorted(self.graph.required)) + tuple(sorted(self.graph.all_optional - {"ue_serial"}))

    @property
    def required_paths(self) -> tuple[str, ...]:
        if self.mode == "deploy":
            return self.paths
        return TEST_SCALARS + tuple(sorted(self.graph.required))

    # -- tool: set_parameter ------------------------------------------------

    def set_parameter(self, name, value) -> ToolResult:
        if self.phase not in ("filling", "validating"):
            return ToolResult(False, name, value, "closed", f"session is {self.phase}")
        if not isinstance(name, str) or name not in self.paths:
            return ToolResult(False, name, value, "unknown_path",
                              f"unknown parameter {name!r}; known: {', '.join(self.paths)}", self.paths)
        if self.mode == "deploy":
            result = self._set_role(name, value)
        else:
            result = self._set_test(name, value)
        if not result.ok and result.reason == "incompatible":
            if self.mode == "test" and name == "test_type":
                # generator switch: the fields the new generator does not own are re-opened
                for k in [k for k in self.working if k in self.graph.all_optional
                          and k not in self.graph.generators[value]]:
                    del self.working[k]
            self.working.pop(name, None)
            self.phase = "filling"
        return result

    def _set_role(self, role: str, value) -> ToolResult:
        names = self.catalog.names(role)
        if not isinstance(value, str) or value not in names:
            return ToolResult(False, role, value, "illegal_value",
                              f"{value!r} is not a known {role} component", tuple(names))
        partial = {r: v for r, v in self.working.items() if r != role}
        allowed = sorted(self.catalog.allowed_values(role, partial))
        if value not in allowed:
            clashes = [f"{r}={v}" for r, v in sorted(partial.items(), key=lambda kv: ROLES.index(Role(kv[0])))
                       if not self.catalog.compatible(self.catalog.lookup(role, value).id,
                                                      self.catalog.lookup(r, v).id)]
            return ToolResult(False, role, value, "incompatible",
                              f"{role}={value} is incompatible with {', '.join(clashes)}", tuple(allowed))
        self.working[role] = value
        return ToolResult(True, role, value, message=f"{role} set to {value}")

    def _coerce(self, name: str, value):
        """Literal for a test path, or raise ValueError with the reason."""
        ints = {"scenario_id": 1, "ue_count": 1, "slice_id": 0, "server_port": 1, "packet_size_bytes": 1}
        if name in ints:
            if isinstance(value, str) and re.fullmatch(r"\s*-?\d+\s*", value):
                value = int(value)
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValueError(f"{name} must be an integer")
            upper = {"ue_count": self.max_ues, "server_port": 65535}.get(name)
            if value < ints[name] or (upper is not None and value > upper):
                raise ValueError(f"{name} must be in {ints[name]}..{upper or 'inf'}")
            return value
        if name in ("bandwidth_mbps", "duration"):
            if isinstance(value, str):
                try:
                    value = float(value)
                except ValueError:
                    raise ValueError(f"{name} must be a number") from None
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                raise ValueError(f"{name} must be a positive number")
            return int(value) if float(value).is_integer() else float(value)
        if name in ("reverse", "json_output"):
            if isinstance(value, str) and value.lower() in ("true", "false"):
                value = value.lower() == "true"
            if not isinstance(value, bool):
                raise ValueError(f"{name} must be true or false")
            return value
        if not isinstance(value, str) or not value.strip():
            raise ValueError(f"{name} must be a non-empty string")
        if name in self.graph.values and value not in self.graph.values[name]:
            raise ValueError(f"{name} must be one of {', '.join(self.graph.values[name])}")
        return value

    def _set_test(self, name: str, value) -> ToolResult:
        try:
            value = self._coerce(name, value)
        except ValueError as exc:
            return ToolResult(False, name, value, "illegal_value", str(exc),
                              tuple(self.graph.values.get(name, ())))
        if name == "test_type":
            extra = sorted(k for k in self.working if k in self.graph.all_optional
                           and k not in self.graph.generators[value])
            if extra:
                return ToolResult(False, name, value, "incompatible",
                                  f"test_type={value} is incompatible with {', '.join(extra)}",
                                  tuple(sorted(self.graph.owners(extra[0]))))
        elif name in self.graph.all_optional:
            owners = self.graph.owners(name)
            current = self.working.get("test_type")
            if current is not None and current not in owners:
                return ToolResult(False, name, value, "incompatible",
                                  f"{name} is incompatible with test_type={current} (only {', '.join(owners)})",
                                  tuple(owners))
        self.working[name] = value
        return ToolResult(True, name, value, message=f"{name} set to {value}")

    # -- tool: validate -----------------------------------------------------

    def validate(self) -> AgentReport:
        report = self._validate_deploy() if self.mode == "deploy" else self._validate_test()
        self.last_report = report
        if self.phase in ("filling", "validating"):
            if report.valid:
                self.phase = "done"
            elif not report.missing:
                self.phase = "validating"
            else:
                self.phase = "filling"
        return report

    def _validate_deploy(self) -> AgentReport:
        rep = self.catalog.validate_scenario(dict(self.working))
        unresolved = [r for r in ROLES if r in rep.missing_roles or any(r in c[:2] for c in rep.conflicts)]
        allowed = tuple((r.value, tuple(sorted(self.catalog.allowed_values(r, self.working))))
                        for r in unresolved)
        return AgentReport(rep.status.value, tuple(r.value for r in rep.missing_roles),
                           tuple((a.value, b.value, x, y) for a, b, x, y in rep.conflicts),
                           allowed, rep.message)

    def _validate_test(self) -> AgentReport:
        missing = tuple(p for p in self.required_paths if p not in self.working)
        conflicts = []
        tt = self.working.get("test_type")
        if tt is not None:
            for k in sorted(self.working):
                if k in self.graph.all_optional and tt not in self.graph.owners(k):
                    conflicts.append(("test_type", k, tt, self.working[k]))
        allowed = []
        for p in missing:
            if p == "test_type" or p in self.graph.values:
                allowed.append((p, tuple(self.graph.values.get(p, sorted(self.graph.generators)))))
        parts = []
        if missing:
            parts.append("missing values for: " + ", ".join(missing))
        for a, b, x, y in conflicts:
            parts.append(f"incompatible: {a}={x} with {b}={y}")
        if conflicts:
            status = "incompatible"
        elif missing:
            status = "missing_values"
        else:
            try:
                self.to_test_spec()
            except ConfigError as exc:
                return AgentReport("incompatible", (), (), (), str(exc))
            status = "valid"
        return AgentReport(status, missing, tuple(conflicts), tuple(allowed),
                           "; ".join(parts) or "configuration is valid")

    # -- emission -----------------------------------------------------------

    def to_test_spec(self) -> TestSpec:
        w = self.working
        template = {k: w[k] for k in self.graph.required}
        for k in self.graph.all_optional:
            if k in w:
                template[k] = w[k]
        specs = []
        for i in range(w["ue_count"]):
            ue = dict(template, server_port=w["server_port"] + i)
            specs.append(validate_ue_spec(ue, self.graph, f"$.ue_specification[{i}]"))
        return TestSpec(w["scenario_id"], tuple(specs))

    def emit(self, inventory: RuInventory | None = None, scenario_id: int = 1) -> NetworkScenario | TestSpec:
        if self.phase != "done":
            raise AgentFailure(f"session is {self.phase}; nothing to emit")
        if self.mode == "test":
            return self.to_test_spec()
        location = None
        if inventory is not None:
            location = inventory.default_location(self.working["ru"])
        return NetworkScenario.from_assignments(self.working, scenario_id, ru_location=location)


def build_feedback(report: AgentReport, session: AgentSession | None = None) -> str:
    """Deterministic feedback text for a non-valid report."""
    if report.valid:
        raise ValueError("feedback is only built for invalid reports")
    lines = []
    if report.missing:
        lines.append("Missing: " + ", ".join(report.missing) + ".")
    for a, b, x, y in report.conflicts:
        lines.append(f"Conflict: {a}={x} is incompatible with {b}={y}.")
    for role, values in report.allowed:
        lines.append(f"Allowed values for {role}: " + (", ".join(map(str, values)) or "(none; change another field)") + ".")
    if not report.missing and not report.conflicts and report.message:
        lines.append(report.message)
    return _prompt("feedback.txt").substitute(details="\n".join(lines)).rstrip("\n")


def system_prompt(mode: str, catalog: Catalog | None = None) -> str:
    catalog = catalog or default_catalog()
    if mode == "deploy":
        roles = "\n".join(f"- {r.value}: {', '.join(catalog.names(r))}" for r in ROLES)
        return _prompt("system_deploy.txt").substitute(roles=roles, graph=catalog.describe_graph())
    graph = TestParameterGraph(catalog.test_parameters)
    params = "\n".join(f"- {p}" for p in TEST_SCALARS + tuple(sorted(graph.required)))
    gens = "\n".join(f"- {g}: {', '.join(sorted(k for k in opts if k != 'ue_serial')) or '(none)'}"
                     for g, opts in sorted(graph.generators.items()))
    values = "\n".join(f"- {k}: {', '.join(v)}" for k, v in sorted(graph.values.items()))
    return _prompt("system_test.txt").substitute(parameters=params, generators=gens, values=values,
                                                 default_host=DEFAULT_HOST, default_port=DEFAULT_PORT)


# -- backends ---------------------------------------------------------------

@dataclass
class ToolCall:
    name: str
    arguments: dict
    id: str = ""


@dataclass
class BackendReply:
    text: str | None = None
    tool_calls: list[ToolCall] = field(default_factory=list)
    latency_s: float = 0.0


class BackendAdapter:
    """Submit messages plus tool schemas, get back text or tool calls."""

    name = "abstract"
    virtual_time = False

    def complete(self, messages: list[dict], tools: list[dict]) -> BackendReply:
        raise NotImplementedError


def _intent_of(messages: Sequence[Mapping]) -> str:
    for m in messages:
        if m.get("role") == "user":
            return m.get("content", "")
    return ""


def _turn_index(messages: Sequence[Mapping]) -> int:
    return sum(1 for m in messages if m.get("role") == "assistant")


class ScriptedBackend(BackendAdapter):
    """Replays a fixed table: intent -> list of turns.

    A turn is either a string (a free-text reply) or a list of
    ``(tool, args)`` pairs. Past the end of a script the backend answers
    with free text. The backend is stateless; the turn number is the count
    of assistant messages seen so far.
    """

    name = "scripted"
    virtual_time = True

    def __init__(self, table: Mapping[str, Sequence], latency_s: float = 0.5):
        self.table = {k: list(v) for k, v in table.items()}
        self.latency_s = latency_s

    def complete(self, messages, tools) -> BackendReply:
        script = self.table.get(_intent_of(messages), [])
        turn = _turn_index(messages)
        if turn >= len(script):
            return BackendReply(text="I have nothing more to add.", latency_s=self.latency_s)
        step = script[turn]
        if isinstance(step, str):
            return BackendReply(text=step, latency_s=self.latency_s)
        calls = [ToolCall(tool, dict(args), f"call-{turn}-{i}") for i, (tool, args) in enumerate(step)]
        return BackendReply(tool_calls=calls, latency_s=self.latency_s)

    @classmethod
    def from_corpus(cls, corpus: Iterable["CorpusEntry"], **kw) -> "ScriptedBackend":
        table = {}
        for entry in corpus:
            table[entry.prompt] = entry.script or [setting_turn(entry.reference)]
        return cls(table, **kw)


def setting_turn(values: Mapping[str, Any]) -> list[tuple[str, dict]]:
    return [("set_parameter", {"name": k, "value": v}) for k, v in values.items()] + [("validate", {})]


_KEYWORDS = [
    (r"\barc\b|aerial|gpu|accelerat|cubb|cuda", {"du_low": "cubb", "cu": "oai", "du_high": "oai"}),
    (r"srs", {"cu": "srsran", "du_high": "srsran", "du_low": "none"}),
    (r"\boai\b|openairinterface", {"cu": "oai", "du_high": "oai"}),
    (r"x310", {"ru": "usrp_x310", "du_low": "none"}),
    (r"x410", {"ru": "usrp_x410", "du_low": "none"}),
    (r"usrp|software.defined radio|\bsdr\b", {"du_low": "none"}),
    (r"rusim|emulat", {"ru": "rusim"}),
    (r"foxconn|7\.2|fronthaul|o-ru|commercial ru", {"ru": "foxconn"}),
    (r"open5gs|core", {"core": "open5gs"}),
]

_TEST_PATTERNS = [
    (r"(\d+(?:\.\d+)?)\s*mbps", "bandwidth_mbps", float),
    (r"(\d+)\s*(?:ues?|users?|devices?|phones?|modems?)\b", "ue_count", int),
    (r"(\d+)\s*(?:s|sec|secs|seconds)\b", "duration", float),
    (r"(\d+)\s*(?:min|minutes?)\b", "duration", lambda s: float(s) * 60),
    (r"scenario\s*(\d+)", "scenario_id", int),
    (r"slice\s*(\d+)", "slice_id", int),
    (r"port\s*(\d+)", "server_port", int),
    (r"(\d+)\s*(?:byte|bytes|b)\s*packets?", "packet_size_bytes", int),
]


class KeywordBackend(BackendAdapter):
    """Deterministic rule policy; stands in for a model when none is reachable.

    The first turn sets whatever the intent names. Later turns read the last
    validate result and pick the first allowed value for each open field.
    """

    name = "keyword"
    virtual_time = True

    def __init__(self, latency_s: float = 0.5):
        self.latency_s = latency_s

    def complete(self, messages, tools) -> BackendReply:
        text = _intent_of(messages).lower()
        mode = "test" if any("traffic tests" in (m.get("content") or "") for m in messages
                             if m.get("role") == "system") else "deploy"
        turn = _turn_index(messages)
        if turn == 0:
            values = self._from_intent(text, mode)
        else:
            values = self._from_feedback(messages, mode)
        calls = [ToolCall("set_parameter", {"name": k, "value": v}, f"kw-{turn}-{i}")
                 for i, (k, v) in enumerate(values.items())]
        calls.append(ToolCall("validate", {}, f"kw-{turn}-v"))
        return BackendReply(tool_calls=calls, latency_s=self.latency_s)

    @staticmethod
    def _from_intent(text: str, mode: str) -> dict:
        out: dict[str, Any] = {}
        if mode == "deploy":
            for pattern, values in _KEYWORDS:
                if re.search(pattern, text):
                    for k, v in values.items():
                        out.setdefault(k, v)
            return out
        for pattern, key, conv in _TEST_PATTERNS:
            m = re.search(pattern, text)
            if m and key not in out:
                out[key] = conv(m.group(1))
        if "mgen" in text:
            out["test_type"] = "mgen"
            for d in ("burst", "periodic", "poisson"):
                if d in text:
                    out["distribution"] = d
        elif "iperf" in text:
            out["test_type"] = "iperf"
        if "tcp" in text:
            out["protocol"] = "tcp"
        elif "udp" in text:
            out["protocol"] = "udp"
        if re.search(r"uplink|\bul\b", text):
            out["reverse"] = False
        elif re.search(r"downlink|\bdl\b", text):
            out["reverse"] = True
        return out

    @staticmethod
    def _from_feedback(messages, mode: str) -> dict:
        report = None
        for m in reversed(messages):
            if m.get("role") == "tool":
                try:
                    body = json.loads(m["content"])
                except (ValueError, KeyError, TypeError):
                    continue
                if "status" in body:
                    report = body
                    break
        if report is None:
            return {}
        defaults = {"scenario_id": 1, "ue_count": 1, "slice_id": 1, "test_type": "iperf",
                    "protocol": "udp", "duration": 60, "reverse": True, "json_output": True,
                    "server_hostname": DEFAULT_HOST, "server_port": DEFAULT_PORT, "bandwidth_mbps": 25}
        out = {}
        allowed = report.get("allowed_values", {})
        for key in report.get("missing", []):
            if mode == "deploy":
                if allowed.get(key):
                    out[key] = allowed[key][0]
            else:
                out[key] = defaults.get(key, (allowed.get(key) or [None])[0])
        return {k: v for k, v in out.items() if v is not None}


class RemoteBackend(BackendAdapter):
    """OpenAI-compatible chat-completions endpoint with function calling."""

    name = "remote"

    def __init__(self, url: str | None = None, model: str | None = None, api_key: str | None = None,
                 timeout: float = 60.0):
        self.url = url or os.environ.get("RANORCH_LLM_URL", "")
        self.model = model or os.environ.get("RANORCH_LLM_MODEL", "")
        self.api_key = api_key or os.environ.get("RANORCH_LLM_API_KEY", "")
        self.timeout = timeout
        if not self.url:
            raise BackendUnavailable("no endpoint configured (set RANORCH_LLM_URL)")

    @property
    def endpoint(self) -> str:
        url = self.url.rstrip("/")
        return url if url.endswith("/chat/completions") else url + "/chat/completions"

    def complete(self, messages, tools) -> BackendReply:
        body = json.dumps({"model": self.model, "messages": messages, "tools": tools,
                           "tool_choice": "auto", "temperature": 0}).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                data = json.loads(resp.read().decode())
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise BackendUnavailable(f"{self.endpoint}: {exc}") from exc
        try:
            msg = data["choices"][0]["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed reply from {self.endpoint}") from exc
        calls = []
        for i, tc in enumerate(msg.get("tool_calls") or []):
            fn = tc.get("function", {})
            try:
                args = json.loads(fn.get("arguments") or "{}")
            except ValueError:
                args = {"_raw": fn.get("arguments")}
            calls.append(ToolCall(fn.get("name", ""), args if isinstance(args, dict) else {}, tc.get("id", f"r{i}")))
        return BackendReply(text=msg.get("content"), tool_calls=calls)


# -- loop -------------------------------------------------------------------

class VirtualClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self) -> float:
        return self.t

    def advance(self, dt: float) -> None:
        self.t += dt


@dataclass
class AgentResult:
    config: NetworkScenario | TestSpec | None
    metrics: AgentMetrics
    trace: list[TraceEntry]
    session: AgentSession = field(repr=False)
    error: Exception | None = field(default=None, repr=False)

    def unwrap(self):
        if self.error is not None:
            raise self.error
        return self.config

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(t.to_dict(), sort_keys=True, default=str) + "\n" for t in self.trace)


def _dispatch(session: AgentSession, call: ToolCall) -> dict:
    if call.name == "set_parameter":
        args = call.arguments
        if "name" not in args or "value" not in args:
            return ToolResult(False, args.get("name"), args.get("value"), "illegal_value",
                              "set_parameter needs name and value").to_dict()
        return session.set_parameter(args["name"], args["value"]).to_dict()
    if call.name == "validate":
        return session.validate().to_dict()
    return {"ok": False, "reason": "unknown_tool", "message": f"unknown tool {call.name!r}; use set_parameter or validate"}


def run_intent(intent_text: str, mode: str, backend: BackendAdapter, *, catalog: Catalog | None = None,
               inventory: RuInventory | None = None, budget: int = DEFAULT_BUDGET,
               wall_budget: float = DEFAULT_WALL_BUDGET_S, clock: Callable[[], float] | None = None,
               scenario_id: int = 1) -> AgentResult:
    """Drive one session to done or failed."""
    if not intent_text or not intent_text.strip():
        raise AgentFailure("empty intent")
    catalog = catalog or default_catalog()
    session = AgentSession(mode, intent_text, catalog=catalog, budget=budget, wall_budget=wall_budget)
    if clock is None:
        clock = VirtualClock() if backend.virtual_time else time.monotonic
    t0 = clock()
    messages: list[dict] = [{"role": "system", "content": system_prompt(mode, catalog)},
                            {"role": "user", "content": intent_text}]
    prompt = intent_text
    error: Exception | None = None
    reason = None
    while True:
        if session.iteration >= budget:
            reason, error = "budget_exhausted", BudgetExhausted(f"no valid configuration after {budget} iterations")
            break
        if clock() - t0 > wall_budget:
            reason, error = "wall_timeout", WallTimeout(f"exceeded {wall_budget}s")
            break
        session.iteration += 1
        try:
            reply = backend.complete(messages, TOOLS)
        except BackendUnavailable as exc:
            reason, error = "backend_error", exc
            break
        if isinstance(clock, VirtualClock):
            clock.advance(reply.latency_s)
        assistant: dict = {"role": "assistant", "content": reply.text}
        if reply.tool_calls:
            assistant["tool_calls"] = [{"id": c.id, "type": "function",
                                        "function": {"name": c.name, "arguments": json.dumps(c.arguments, sort_keys=True)}}
                                       for c in reply.tool_calls]
        messages.append(assistant)
        calls_log = []
        for call in reply.tool_calls:
            result = _dispatch(session, call)
            calls_log.append({"tool": call.name, "arguments": call.arguments, "result": result})
            messages.append({"role": "tool", "tool_call_id": call.id, "content": json.dumps(result, sort_keys=True, default=str)})
        report = session.validate()
        session.trace.append(TraceEntry(session.iteration, prompt, reply.text, calls_log, report.to_dict()))
        if report.valid:
            break
        if clock() - t0 > wall_budget:
            reason, error = "wall_timeout", WallTimeout(f"exceeded {wall_budget}s")
            break
        if reply.tool_calls:
            prompt = build_feedback(report, session)
        else:
            prompt = "Reply only with tool calls.\n" + build_feedback(report, session)
        messages.append({"role": "user", "content": prompt})

    runtime = clock() - t0
    if error is None:
        config = session.emit(inventory, scenario_id)
        metrics = AgentMetrics(True, session.iteration, runtime)
    else:
        session.phase = "failed"
        config = None
        metrics = AgentMetrics(False, session.iteration, runtime, reason)
    log.info("intent %r: %s after %d iterations", intent_text, "ok" if config else reason, session.iteration)
    return AgentResult(config, metrics, session.trace, session, error)


# -- corpus -----------------------------------------------------------------

@dataclass
class CorpusEntry:
    prompt: str
    mode: str
    predicate: dict
    reference: dict
    script: list | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "CorpusEntry":
        script = d.get("script")
        if script is not None:
            script = [s if isinstance(s, str) else [tuple(c) for c in s] for s in script]
        return cls(d["prompt"], d.get("mode", "deploy"), dict(d["predicate"]), dict(d.get("reference", {})), script)


def load_corpus(path=None) -> list[CorpusEntry]:
    if path is None:
        text = resources.files("ranorch.data").joinpath("corpus.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return [CorpusEntry.from_dict(d) for d in json.loads(text)]


def config_view(config) -> dict:
    """Flat view of an emitted config that predicates are checked against."""
    if isinstance(config, NetworkScenario):
        return {r.value: n for r, n in config.assignments().items()}
    ues = config.ue_specifications
    view = {"scenario_id": config.scenario_id, "ue_count": len(ues)}
    view.update({k: v for k, v in ues[0].to_dict().items() if k != "server_port"})
    view["server_port"] = ues[0].server_port
    return view


def predicate_holds(config, predicate: Mapping) -> bool:
    if config is None:
        return False
    view = config_view(config)
    return all(view.get(k) == v for k, v in predicate.items())


@dataclass
class CorpusReport:
    backend: str
    repetitions: int
    per_prompt: list[dict]
    success_rate: float
    iterations_mean: float | None
    iterations_p50: float | None
    iterations_p90: float | None
    runtime_mean: float | None
    runtime_p50: float | None
    runtime_p90: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def render(self) -> str:
        def fmt(x, unit=""):
            return "-" if x is None else f"{x:.2f}{unit}"
        return "\n".join([
            f"backend            {self.backend}",
            f"runs               {len(self.per_prompt) * self.repetitions}",
            f"success rate       {self.success_rate * 100:.1f}%",
            f"runtime (success)  mean {fmt(self.runtime_mean, 's')}  p50 {fmt(self.runtime_p50, 's')}  p90 {fmt(self.runtime_p90, 's')}",
            f"iterations         mean {fmt(self.iterations_mean)}  p50 {fmt(self.iterations_p50)}  p90 {fmt(self.iterations_p90)}",
        ])


def _pct(values: list[float], q: float) -> float | None:
    if not values:
        return None
    if len(values) == 1:
        return float(values[0])
    return float(statistics.quantiles(values, n=100, method="inclusive")[int(q) - 1])


def evaluate_corpus(entries: Sequence[CorpusEntry], backend: BackendAdapter, repetitions: int = 1, *,
                    catalog: Catalog | None = None, budget: int = DEFAULT_BUDGET,
                    wall_budget: float = DEFAULT_WALL_BUDGET_S) -> CorpusReport:
    per_prompt = []
    ok_iters: list[float] = []
    ok_runtime: list[float] = []
    successes = 0
    for entry in entries:
        wins = 0
        runs = []
        for _ in range(repetitions):
            try:
                res = run_intent(entry.prompt, entry.mode, backend, catalog=catalog, budget=budget,
                                 wall_budget=wall_budget)
            except AgentFailure as exc:
                runs.append({"success": False, "failure_reason": str(exc)})
                continue
            good = res.metrics.success and predicate_holds(res.config, entry.predicate)
            if good:
                wins += 1
                ok_iters.append(res.metrics.iterations)
                ok_runtime.append(res.metrics.runtime)
            d = res.metrics.to_dict()
            d["success"] = good
            if res.metrics.success and not good:
                d["failure_reason"] = "wrong_config"
            runs.append(d)
        successes += wins
        per_prompt.append({"prompt": entry.prompt, "mode": entry.mode,
                           "success_rate": wins / repetitions, "runs": runs})
    total = len(entries) * repetitions
    return CorpusReport(
        backend.name, repetitions, per_prompt, successes / total if total else 0.0,
        statistics.fmean(ok_iters) if ok_iters else None, _pct(ok_iters, 50), _pct(ok_iters, 90),
        statistics.fmean(ok_runtime) if ok_runtime else None, _pct(ok_runtime, 50), _pct(ok_runtime, 90),
    )

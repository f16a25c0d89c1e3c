"""Command-line front end.

Exit codes: 0 ok, 1 validation failure, 2 execution failure, 3 infrastructure
error. With --json exactly one JSON document goes to stdout; logs always go
to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shlex
import sys
from pathlib import Path
from typing import Any

from . import __version__
from .agent import (
    DEFAULT_BUDGET,
    DEFAULT_WALL_BUDGET_S,
    KeywordBackend,
    RemoteBackend,
    ScriptedBackend,
    evaluate_corpus,
    load_corpus,
    run_intent,
)
from .cluster import Cluster, infinite
from .config import NetworkScenario, TestSpec, load_fixture, parse_deployment_file, parse_test_file
from .errors import DeploymentNotReady, RanOrchError, ValidationFailure
from .pipeline import FIG8_BARS, Engine, load_declared, Reconciler
from .scheduler import Scheduler
from .telemetry import TestStore

log = logging.getLogger("ranorch")

EXIT_OK, EXIT_VALIDATION, EXIT_EXECUTION, EXIT_INFRA = 0, 1, 2, 3

# option -> (env var, config-file key, default)
SETTINGS = {
    "seed": ("RANORCH_SEED", "seed", 0),
    "cluster": ("RANORCH_CLUSTER", "cluster", None),
    "store": ("RANORCH_STORE", "store", None),
    "backend": ("RANORCH_BACKEND", "backend", "scripted"),
    "jitter": ("RANORCH_JITTER", "jitter", None),
}


class UsageError(ValidationFailure):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def resolve_settings(args: argparse.Namespace, env=None) -> dict:
    """flag > environment > config file > default."""
    env = os.environ if env is None else env
    cfg: dict = {}
    cfg_path = getattr(args, "config", None) or env.get("RANORCH_CONFIG")
    if cfg_path:
        try:
            cfg = json.loads(Path(cfg_path).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config file {cfg_path}: {exc}") from exc
    out = {}
    for key, (var, ckey, default) in SETTINGS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif var in env:
            out[key] = env[var]
        elif ckey in cfg:
            out[key] = cfg[ckey]
        else:
            out[key] = default
    out["seed"] = int(out["seed"])
    if out["jitter"] is not None:
        out["jitter"] = float(out["jitter"])
    for key in ("llm_url", "llm_model", "llm_api_key"):
        if key in cfg:
            out[key] = cfg[key]
    return out


# -- state ------------------------------------------------------------------

class Context:
    """One simulation instance; batch mode builds one per invocation."""

    def __init__(self, settings: dict, *, prepull: bool = True):
        self.settings = settings
        cluster = Cluster.load(settings.get("cluster"), seed=settings["seed"])
        self.engine = Engine(cluster, Scheduler(cluster), seed=settings["seed"], prepull=prepull,
                             store=TestStore(settings["store"]) if settings.get("store") else None)
        if settings.get("jitter") is not None:
            self.engine.timing.jitter = settings["jitter"]
        self.records: list = []


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _table(rows: list[list[Any]], header: list[str]) -> str:
    cells = [header] + [[("-" if c is None else (f"{c:.3f}" if isinstance(c, float) else str(c))) for c in r]
                        for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells)


def _breakdown_text(record) -> str:
    rows = [[k, record.breakdown.get(k)] for k in FIG8_BARS]
    rows.append(["total", record.total_duration])
    head = (f"scenario {record.scenario.id} on {record.resolved.target_node} "
            f"({record.resolved.stack_profile}, pool {record.resolved.pool})")
    return head + "\n" + _table(rows, ["phase", "seconds"])


def smoke_test(scenario_id: int) -> TestSpec:
    test = parse_test_file(load_fixture("example_test.json"))
    return dataclasses.replace(test, scenario_id=scenario_id)


def deploy_with_smoke(ctx: Context, scenario: NetworkScenario, pool: str | None = None):
    eng = ctx.engine
    record = eng.deploy(scenario, pool)
    run = eng.start_test(smoke_test(scenario.id), record, smoke=True)
    eng.wait(run)
    eng.raise_if_failed(run)
    return record


# -- commands ---------------------------------------------------------------

def cmd_intent(args, ctx: Context) -> tuple[dict, str]:
    settings = ctx.settings
    name = args.backend or settings["backend"]
    if name == "scripted":
        backend = ScriptedBackend.from_corpus(load_corpus())
    elif name == "keyword":
        backend = KeywordBackend()
    else:
        backend = RemoteBackend(settings.get("llm_url"), settings.get("llm_model"), settings.get("llm_api_key"))
    result = run_intent(args.text, args.mode, backend, catalog=ctx.engine.catalog,
                        inventory=ctx.engine.inventory, budget=args.budget, wall_budget=args.wall_budget,
                        scenario_id=args.scenario_id)
    if args.trace:
        Path(args.trace).write_text(result.trace_jsonl())
    doc: dict = {"metrics": result.metrics.to_dict()}
    if result.error is not None:
        doc["error"] = str(result.error)
        raise _WithDoc(result.error, doc)
    config = result.config
    doc["config"] = config.to_dict()
    text = config.dumps() + "\n" + (f"success in {result.metrics.iterations} iterations, "
                                    f"{result.metrics.runtime:.2f}s")
    if args.execute:
        if isinstance(config, NetworkScenario):
            record = deploy_with_smoke(ctx, config)
            doc["deployment"] = record.to_dict()
            text += "\n" + _breakdown_text(record)
        else:
            if config.scenario_id not in ctx.engine.deployments:
                raise DeploymentNotReady(f"scenario {config.scenario_id} is not deployed")
            rec = ctx.engine.run_test_pipeline(config)
            doc["test"] = rec.to_dict()
            text += f"\nmean throughput {rec.mean_throughput:.1f} Mbps"
    return doc, text


class _WithDoc(Exception):
    def __init__(self, error: Exception, doc: dict):
        super().__init__(str(error))
        self.error = error
        self.doc = doc


def cmd_run(args, ctx: Context) -> tuple[dict, str]:
    if not args.deploy and not args.test:
        raise UsageError("run needs --deploy FILE and/or --test FILE")
    if args.cold:
        ctx.engine.registry.cache.clear()
    eng = ctx.engine
    doc: dict = {}
    lines = []
    scenario = None
    if args.deploy:
        scenario = parse_deployment_file(_read(args.deploy), eng.catalog)
        if args.scenario is not None:
            scenario = dataclasses.replace(scenario, id=args.scenario)
    test = None
    if args.test:
        test = parse_test_file(_read(args.test), eng.catalog)
        if args.scenario is not None:
            test = dataclasses.replace(test, scenario_id=args.scenario)
    if scenario is not None:
        record = eng.deploy(scenario, args.pool) if test is not None else deploy_with_smoke(ctx, scenario, args.pool)
        doc["deployment"] = record.to_dict()
        lines.append(_breakdown_text(record))
    if test is not None:
        rec = eng.run_test_pipeline(test, ue_class=args.ue_class)
        ctx.records.append(rec)
        dep = eng.deployments[test.scenario_id]
        doc["test"] = rec.to_dict()
        if scenario is not None:
            doc["deployment"] = dep.to_dict()
            lines[-1] = _breakdown_text(dep)
        lines.append(f"test {rec.record_id or '(not stored)'}: {rec.profile} {rec.direction}, "
                     f"mean {rec.mean_throughput:.1f} Mbps, rtt {rec.summary['mean_rtt_ms']:.1f} ms")
    ledger = "".join(r.dumps_ledger() for r in eng.runs)
    doc["ledger"] = [json.loads(line) for line in ledger.splitlines()]
    if args.ledger:
        Path(args.ledger).write_text(ledger)
    if args.event_log:
        eng.cluster.export_log(args.event_log)
    if args.report:
        from .report import write_report
        bd = {f"scenario {d.scenario.id}": d.breakdown for d in eng.deployments.values()}
        doc["report_files"] = write_report(args.report, breakdowns=bd, records=ctx.records)
    return doc, "\n".join(lines)


def cmd_reconcile(args, ctx: Context) -> tuple[dict, str]:
    declared = load_declared(args.directory, ctx.engine.catalog)
    rec = Reconciler(ctx.engine)
    passes = []
    for _ in range(args.passes):
        actions = rec.reconcile(declared)
        passes.append([a.to_dict() for a in actions])
        if not actions:
            break
    remaining = rec.diff(declared)
    doc = {"passes": passes, "remaining": [a.to_dict() for a in remaining], "warnings": rec.warnings}
    lines = [f"pass {i + 1}: " + (", ".join(f"{a['kind']} {a['scenario_id']} {a['outcome']}" for a in p) or "no changes")
             for i, p in enumerate(passes)]
    lines += [f"warning: {w}" for w in rec.warnings]
    if any(a["outcome"] == "failed" for p in passes for a in p):
        raise _Failed(doc, "\n".join(lines))
    return doc, "\n".join(lines)


class _Failed(Exception):
    exit_code = EXIT_EXECUTION

    def __init__(self, doc, text):
        super().__init__(text)
        self.doc = doc
        self.text = text


def cmd_cluster_nodes(args, ctx: Context) -> tuple[dict, str]:
    nodes = [n.to_dict() for n in sorted(ctx.engine.cluster.nodes.values(), key=lambda n: n.id)]
    rows = [[n["id"], n["model"], n["pool"], n["state"]] for n in nodes]
    return {"nodes": nodes}, _table(rows, ["node", "model", "pool", "state"])


def cmd_cluster_add(args, ctx: Context) -> tuple[dict, str]:
    cluster = ctx.engine.cluster
    spec = cluster.spec_from_preset(args.model, args.node)
    t0 = cluster.now
    cluster.add_node(spec, args.pool)
    cluster.run_until(lambda: cluster.nodes[args.node].state.value == "ready")
    node = cluster.nodes[args.node].to_dict()
    return ({"node": node, "ready_after_s": cluster.now - t0},
            f"{args.node} ({args.model}) joined {args.pool}, ready after {cluster.now - t0:.0f} s")


def cmd_cluster_relabel(args, ctx: Context) -> tuple[dict, str]:
    cluster = ctx.engine.cluster
    t0 = cluster.now
    cluster.relabel_node(args.node, args.pool)
    cluster.run_until(lambda: cluster.nodes[args.node].state.value == "ready")
    return ({"node": cluster.nodes[args.node].to_dict(), "unavailable_s": cluster.now - t0},
            f"{args.node} moved to {args.pool}, back after {cluster.now - t0:.0f} s")


USRP_SCENARIO = {"core": "open5gs", "cu": "oai", "du_high": "oai", "du_low": "none", "ru": "usrp_x310"}
TIMELINE_EVENTS = ("node_failed", "node_failure_observed", "eviction_timer_started", "eviction_timer_expired",
                   "workload_evicted", "workload_redeployed", "redeploy_failed", "gnb_ready", "ue_traffic_resumed")


def failure_timeline(ctx: Context, node_id: str, detect_delay: float, evict_timeout: float,
                     scenario: NetworkScenario | None = None, horizon: float = 3600.0) -> list[dict]:
    """Deploy a scenario onto ``node_id``'s pool, run traffic, fail the node and record the reaction."""
    eng = ctx.engine
    cluster = eng.cluster
    node = cluster.node(node_id)
    cluster.detection_delay = detect_delay
    eng.scheduler.eviction_timeout = evict_timeout
    scenario = scenario or NetworkScenario.from_assignments(USRP_SCENARIO)
    if scenario.id not in eng.deployments:
        record = eng.deploy(scenario, node.pool)
        if record.resolved.target_node != node_id:
            log.warning("scenario landed on %s, not %s", record.resolved.target_node, node_id)
        eng.run_test_pipeline(smoke_test(scenario.id), record)
    t_fail = cluster.now
    mark = len(cluster.log)
    cluster.inject_failure(node_id)
    # run until traffic resumes or nothing more can happen
    limit = t_fail + horizon
    while not any(e["event"] in ("ue_traffic_resumed", "redeploy_failed") for e in cluster.log[mark:]):
        t = cluster.clock.peek_time()
        if t is None or t > limit:
            break
        cluster.tick(t)
    events = []
    for e in cluster.log[mark:]:
        if e["event"] in TIMELINE_EVENTS:
            p = e["payload"]
            detail = " ".join(f"{k}={p[k]}" for k in sorted(p) if k not in ("failed_at",))
            events.append({"t": e["time"], "t_rel": e["time"] - t_fail, "event": e["event"], "detail": detail})
    return events


def cmd_cluster_fail(args, ctx: Context) -> tuple[dict, str]:
    scenario = parse_deployment_file(_read(args.scenario), ctx.engine.catalog) if args.scenario else None
    events = failure_timeline(ctx, args.node, args.detect_delay, infinite(args.evict_timeout), scenario)
    doc = {"node": args.node, "detect_delay": args.detect_delay,
           "evict_timeout": None if infinite(args.evict_timeout) == float("inf") else infinite(args.evict_timeout),
           "timeline": events, "audit": ctx.engine.scheduler.audit()}
    if args.report:
        from .report import write_report
        doc["report_files"] = write_report(args.report, timeline=events)
    rows = [[f"+{e['t_rel']:.1f}", e["event"], e["detail"]] for e in events]
    return doc, _table(rows, ["t", "event", "detail"])


def cmd_cluster_report(args, ctx: Context) -> tuple[dict, str]:
    from .report import write_report
    store_dir = args.store or ctx.settings.get("store")
    if not store_dir:
        raise UsageError("report needs --store DIR (or RANORCH_STORE)")
    store = TestStore(store_dir)
    records = store.query_history(scenario_id=args.scenario, profile=args.profile)
    files = write_report(args.out, records=records)
    return ({"records": len(records), "files": files},
            f"{len(records)} records -> " + (", ".join(files) or "(nothing written)"))


def cmd_corpus(args, ctx: Context) -> tuple[dict, str]:
    entries = load_corpus(args.file)
    name = args.backend or ctx.settings["backend"]
    if name == "scripted":
        backend = ScriptedBackend.from_corpus(entries)
    elif name == "keyword":
        backend = KeywordBackend()
    else:
        s = ctx.settings
        backend = RemoteBackend(s.get("llm_url"), s.get("llm_model"), s.get("llm_api_key"))
    report = evaluate_corpus(entries, backend, args.repetitions, catalog=ctx.engine.catalog,
                             budget=args.budget, wall_budget=args.wall_budget)
    return report.to_dict(), report.render()


def cmd_serve(args, ctx: Context) -> tuple[dict, str]:
    """One command per stdin line, same syntax as the CLI; one JSON reply per line."""
    served = 0
    for line in sys.stdin:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line in ("quit", "exit"):
            break
        argv = shlex.split(line)
        code, doc, _ = execute(argv, ctx=ctx, json_mode=True)
        sys.stdout.write(json.dumps({"command": line, "exit_code": code, "result": doc}, sort_keys=True) + "\n")
        sys.stdout.flush()
        served += 1
    return {"served": served}, f"served {served} commands"


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="ranorch", description="Intent-driven RAN orchestration on a simulated cluster.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cluster", default=None, help="cluster seed file (JSON)")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--store", default=None, help="test-result store directory")
    p.add_argument("--jitter", type=float, default=None, help="task duration jitter fraction")
    p.add_argument("--json", action="store_true", help="print one JSON document")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True

    q = sub.add_parser("intent", help="turn a request into a validated config")
    q.add_argument("text")
    q.add_argument("--mode", choices=("deploy", "test"), default="deploy")
    q.add_argument("--backend", choices=("scripted", "keyword", "remote"), default=None)
    q.add_argument("--execute", action="store_true")
    q.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    q.add_argument("--wall-budget", type=float, default=DEFAULT_WALL_BUDGET_S)
    q.add_argument("--scenario-id", type=int, default=1)
    q.add_argument("--trace", help="write the agent trace as JSON lines")
    q.set_defaults(fn=cmd_intent)

    q = sub.add_parser("run", help="deploy a scenario file and/or run a test file")
    q.add_argument("--deploy", metavar="FILE")
    q.add_argument("--test", metavar="FILE")
    q.add_argument("--scenario", type=int, default=None, help="override the scenario id")
    q.add_argument("--pool", default=None)
    q.add_argument("--ue-class", default="sierra")
    q.add_argument("--cold", action="store_true", help="start with empty image caches")
    q.add_argument("--ledger", metavar="FILE", help="write the run ledger (JSON lines)")
    q.add_argument("--event-log", metavar="FILE")
    q.add_argument("--report", metavar="DIR", help="write CSV and PNG figures here")
    q.set_defaults(fn=cmd_run)

    q = sub.add_parser("reconcile", help="converge to the declarations in a directory")
    q.add_argument("directory")
    q.add_argument("--passes", type=int, default=2)
    q.set_defaults(fn=cmd_reconcile)

    q = sub.add_parser("cluster", help="inspect and change the cluster")
    csub = q.add_subparsers(dest="action", parser_class=Parser)
    csub.required = True
    c = csub.add_parser("nodes")
    c.set_defaults(fn=cmd_cluster_nodes)
    c = csub.add_parser("add")
    c.add_argument("node")
    c.add_argument("--model", required=True, help="hardware preset, e.g. GH200")
    c.add_argument("--pool", required=True)
    c.set_defaults(fn=cmd_cluster_add)
    c = csub.add_parser("relabel")
    c.add_argument("node")
    c.add_argument("pool")
    c.set_defaults(fn=cmd_cluster_relabel)
    c = csub.add_parser("fail")
    c.add_argument("node")
    c.add_argument("--detect-delay", type=float, default=40.0)
    c.add_argument("--evict-timeout", default="300", help="seconds, or 'never'")
    c.add_argument("--scenario", metavar="FILE", help="deployment file to run before the failure")
    c.add_argument("--report", metavar="DIR")
    c.set_defaults(fn=cmd_cluster_fail)
    c = csub.add_parser("report")
    c.add_argument("--out", required=True)
    c.add_argument("--store", default=argparse.SUPPRESS)
    c.add_argument("--scenario", type=int, default=None)
    c.add_argument("--profile", default=None)
    c.set_defaults(fn=cmd_cluster_report)

    q = sub.add_parser("corpus", help="evaluate the agent over a prompt corpus")
    q.add_argument("--file", default=None)
    q.add_argument("--backend", choices=("scripted", "keyword", "remote"), default=None)
    q.add_argument("--repetitions", type=int, default=1)
    q.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    q.add_argument("--wall-budget", type=float, default=DEFAULT_WALL_BUDGET_S)
    q.set_defaults(fn=cmd_corpus)

    q = sub.add_parser("serve", help="read commands from stdin against one live simulation")
    q.set_defaults(fn=cmd_serve)
    return p


def execute(argv: list[str], *, ctx: Context | None = None, json_mode: bool | None = None,
            env=None) -> tuple[int, dict, str]:
    """Run one command; return (exit code, JSON document, human text)."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return EXIT_VALIDATION, {"error": str(exc), "exit_code": EXIT_VALIDATION}, f"error: {exc}"
    try:
        if ctx is None:
            settings = resolve_settings(args, env)
            ctx = Context(settings)
        elif args.jitter is not None:
            ctx.engine.timing.jitter = args.jitter
        doc, text = args.fn(args, ctx)
        return EXIT_OK, doc, text
    except _WithDoc as exc:
        code = getattr(exc.error, "exit_code", EXIT_EXECUTION)
        return code, dict(exc.doc, exit_code=code), f"error: {exc.error}"
    except _Failed as exc:
        return exc.exit_code, dict(exc.doc, exit_code=exc.exit_code), exc.text
    except RanOrchError as exc:
        return exc.exit_code, {"error": str(exc), "type": type(exc).__name__, "exit_code": exc.exit_code}, f"error: {exc}"


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    verbose = sum(1 for a in argv if a in ("-v", "--verbose")) + sum(2 for a in argv if a == "-vv")
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    json_mode = "--json" in argv[: argv.index("--") if "--" in argv else len(argv)]
    code, doc, text = execute(argv, json_mode=json_mode)
    if json_mode:
        sys.stdout.write(json.dumps(doc, sort_keys=True, default=str) + "\n")
    elif code == EXIT_OK:
        if text:
            print(text)
    else:
        print(text, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

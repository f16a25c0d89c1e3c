"""Synthetic performance samples, the test-result store and baseline checks."""

from __future__ import annotations

import csv
import io
import json
import math
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import NoHistory, StorageError, UnknownProfile

DIRECTIONS = ("dl", "ul")
LOAD_KINDS = ("shared_core", "isolated_core", "second_cell")


@dataclass(frozen=True)
class ThroughputParams:
    mean: float
    std: float
    cap: float
    source: str = "default"

    def __post_init__(self):
        if self.mean <= 0:
            raise ValueError("mean throughput must be positive")


@dataclass(frozen=True)
class LatencyParams:
    mean: float
    std: float
    cap: float = 100.0


@dataclass(frozen=True)
class LoadEvent:
    """Background load on the node hosting a cell (coexistence what-ifs)."""

    kind: str
    cores: int = 0

    def __post_init__(self):
        if self.kind not in LOAD_KINDS:
            raise ValueError(f"load kind must be one of {LOAD_KINDS}")


class PerformanceModel:
    """Truncated-normal throughput and RTT per (profile, direction, UE class)."""

    def __init__(self, throughput: Mapping[tuple[str, str, str], ThroughputParams],
                 latency: Mapping[str, LatencyParams] | None = None, sample_interval: float = 1.0,
                 degrade_on_load: bool = False, degrade_factor: float = 0.05):
        self.throughput = dict(throughput)
        self.latency = dict(latency or {"default": LatencyParams(18.0, 1.8)})
        self.sample_interval = float(sample_interval)
        self.degrade_on_load = degrade_on_load
        self.degrade_factor = degrade_factor

    @classmethod
    def from_dict(cls, data: Mapping) -> "PerformanceModel":
        frac = float(data.get("default_std_fraction", 0.1))
        tp = {}
        for row in data["throughput"]:
            mean = float(row["mean"])
            tp[(row["profile"], row["direction"], row["ue_class"])] = ThroughputParams(
                mean, float(row.get("std", frac * mean)), float(row.get("cap", math.inf)),
                row.get("source", "default"))
        lat = {k: LatencyParams(float(v["mean"]), float(v.get("std", frac * float(v["mean"]))),
                                float(v.get("cap", 100.0)))
               for k, v in data.get("latency", {}).items()}
        coex = data.get("coexistence", {})
        return cls(tp, lat or None, float(data.get("sample_interval_s", 1.0)),
                   bool(coex.get("degrade", False)), float(coex.get("factor_per_event", 0.05)))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "PerformanceModel":
        if path is None:
            text = resources.files("ranorch.data").joinpath("performance_model.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))

    def params(self, profile: str, ue_class: str, direction: str) -> ThroughputParams:
        try:
            return self.throughput[(profile, direction, ue_class)]
        except KeyError:
            raise UnknownProfile(f"no throughput model for {profile}/{direction}/{ue_class}") from None

    def latency_params(self, profile: str) -> LatencyParams:
        return self.latency.get(profile, self.latency["default"])

    def profiles(self) -> list[tuple[str, str, str]]:
        return sorted(self.throughput)


@dataclass
class MetricSeries:
    times: list[float]
    throughput_mbps: list[float]
    rtt_ms: list[float]

    def __len__(self) -> int:
        return len(self.times)

    @property
    def mean_throughput(self) -> float:
        return math.fsum(self.throughput_mbps) / len(self.throughput_mbps) if self.times else 0.0


def synthesize_performance(model: PerformanceModel, profile: str, ue_class: str, direction: str,
                           duration: float, seed: int, *, load_events: Iterable[LoadEvent] = (),
                           offered_mbps: float | None = None) -> MetricSeries:
    """Sample one throughput/RTT series, one point per sample interval.

    Load events perturb nothing unless the model's what-if degradation is
    switched on, and isolated-core load never does.
    """
    params = model.params(profile, ue_class, direction)
    lat = model.latency_params(profile)
    n = int(math.floor(duration / model.sample_interval + 1e-9)) if duration > 0 else 0
    mean = params.mean
    if model.degrade_on_load:
        hits = sum(1 for ev in load_events if ev.kind != "isolated_core")
        mean *= (1.0 - model.degrade_factor) ** hits
    rng = np.random.default_rng(seed)
    tp = np.clip(rng.normal(mean, params.std, n), 0.0, params.cap)
    if offered_mbps is not None:
        tp = np.minimum(tp, offered_mbps)
    rtt = np.clip(rng.normal(lat.mean, lat.std, n), 0.0, lat.cap)
    times = [round((i + 1) * model.sample_interval, 9) for i in range(n)]
    return MetricSeries(times, [float(x) for x in tp], [float(x) for x in rtt])


# -- records ----------------------------------------------------------------

@dataclass
class UeSeries:
    ue: str
    times: list[float]
    throughput_mbps: list[float]
    rtt_ms: list[float]

    def to_dict(self) -> dict:
        return {"ue": self.ue, "times": self.times, "throughput_mbps": self.throughput_mbps,
                "rtt_ms": self.rtt_ms}


def summarize(series: Iterable[UeSeries]) -> dict:
    series = list(series)
    tp = [x for s in series for x in s.throughput_mbps]
    rtt = [x for s in series for x in s.rtt_ms]
    per_ue = {s.ue: (math.fsum(s.throughput_mbps) / len(s.throughput_mbps) if s.throughput_mbps else 0.0)
              for s in series}
    return {
        "samples": len(tp),
        "mean_throughput_mbps": math.fsum(tp) / len(tp) if tp else 0.0,
        "aggregate_throughput_mbps": math.fsum(per_ue.values()),
        "mean_rtt_ms": math.fsum(rtt) / len(rtt) if rtt else 0.0,
        "per_ue_mean_mbps": per_ue,
    }


@dataclass
class TestRecord:
    scenario_id: int
    stack: str
    profile: str
    direction: str
    ue_class: str
    started_at: float
    ended_at: float
    series: list[UeSeries]
    metadata: dict = field(default_factory=dict)
    record_id: str | None = None
    summary: dict = field(default_factory=dict)

    __test__ = False

    def __post_init__(self):
        if not self.summary:
            self.summary = summarize(self.series)

    @property
    def mean_throughput(self) -> float:
        return self.summary["mean_throughput_mbps"]

    @property
    def ues(self) -> list[str]:
        return [s.ue for s in self.series]

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "scenario_id": self.scenario_id,
            "stack": self.stack,
            "profile": self.profile,
            "direction": self.direction,
            "ue_class": self.ue_class,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "series": [s.to_dict() for s in self.series],
            "summary": self.summary,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TestRecord":
        return cls(
            scenario_id=d["scenario_id"], stack=d["stack"], profile=d["profile"],
            direction=d["direction"], ue_class=d["ue_class"], started_at=d["started_at"],
            ended_at=d["ended_at"],
            series=[UeSeries(s["ue"], s["times"], s["throughput_mbps"], s["rtt_ms"]) for s in d["series"]],
            metadata=dict(d.get("metadata", {})), record_id=d.get("record_id"),
            summary=dict(d.get("summary", {})),
        )


# -- store ------------------------------------------------------------------

class TestStore:
    """Append-only JSON-lines store, one file per simulated day plus an index.

    Appends are serialized by a lock; readers only ever see whole lines.
    """

    __test__ = False
    INDEX = "index.jsonl"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.Lock()
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create store at {self.root}: {exc}") from exc

    def _index(self) -> list[dict]:
        path = self.root / self.INDEX
        if not path.exists():
            return []
        try:
            return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageError(f"corrupt index {path}: {exc}") from exc

    def record(self, rec: TestRecord) -> str:
        with self._lock:
            index = self._index()
            if rec.record_id is None:
                rec.record_id = f"rec-{len(index) + 1:06d}"
            elif any(e["record_id"] == rec.record_id for e in index):
                raise StorageError(f"record {rec.record_id} already stored")
            day = int(rec.started_at // 86400)
            fname = f"records-day-{day:05d}.jsonl"
            entry = {"record_id": rec.record_id, "file": fname, "scenario_id": rec.scenario_id,
                     "stack": rec.stack, "profile": rec.profile, "ues": rec.ues,
                     "started_at": rec.started_at}
            try:
                with open(self.root / fname, "a") as fh:
                    fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
                with open(self.root / self.INDEX, "a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
            except OSError as exc:
                raise StorageError(f"append failed: {exc}") from exc
        return rec.record_id

    def query_history(self, *, scenario_id: int | None = None, stack: str | None = None,
                      profile: str | None = None, ue: str | None = None,
                      since: float | None = None, until: float | None = None) -> list[TestRecord]:
        wanted = []
        for e in self._index():
            if scenario_id is not None and e["scenario_id"] != scenario_id:
                continue
            if stack is not None and e["stack"] != stack:
                continue
            if profile is not None and e["profile"] != profile:
                continue
            if ue is not None and ue not in e["ues"]:
                continue
            if since is not None and e["started_at"] < since:
                continue
            if until is not None and e["started_at"] > until:
                continue
            wanted.append(e)
        by_file: dict[str, set[str]] = {}
        for e in wanted:
            by_file.setdefault(e["file"], set()).add(e["record_id"])
        found: dict[str, TestRecord] = {}
        for fname, ids in by_file.items():
            try:
                for line in (self.root / fname).read_text().splitlines():
                    d = json.loads(line)
                    if d["record_id"] in ids:
                        found[d["record_id"]] = TestRecord.from_dict(d)
            except (OSError, json.JSONDecodeError) as exc:
                raise StorageError(f"cannot read {fname}: {exc}") from exc
        return [found[e["record_id"]] for e in wanted if e["record_id"] in found]

    def export_csv(self, records: Iterable[TestRecord] | None = None, dest=None) -> str:
        records = self.query_history() if records is None else list(records)
        return export_csv(records, dest)


def export_csv(records: Iterable[TestRecord], dest=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["record_id", "scenario_id", "stack", "profile", "direction", "ue", "t",
                     "throughput_mbps", "rtt_ms"])
    for rec in records:
        for s in rec.series:
            for t, tp, rtt in zip(s.times, s.throughput_mbps, s.rtt_ms):
                writer.writerow([rec.record_id, rec.scenario_id, rec.stack, rec.profile,
                                 rec.direction, s.ue, f"{rec.started_at + t:.3f}", f"{tp:.6f}", f"{rtt:.6f}"])
    text = buf.getvalue()
    if dest is not None:
        Path(dest).write_text(text)
    return text


# -- regression check -------------------------------------------------------

@dataclass(frozen=True)
class RegressionVerdict:
    status: str
    latest_mean: float
    history_mean: float
    latest_samples: int
    history_records: int
    threshold: float

    @property
    def degraded(self) -> bool:
        return self.status == "degraded"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "latest_mean_mbps": self.latest_mean,
            "history_mean_mbps": self.history_mean,
            "latest_samples": self.latest_samples,
            "history_records": self.history_records,
            "threshold": self.threshold,
        }


def compare_baseline(latest: TestRecord | float, history: Iterable[TestRecord | float],
                     threshold: float = 0.1) -> RegressionVerdict:
    """Degraded iff the latest mean falls strictly below (1 - threshold) x history mean."""
    history = [h.mean_throughput if isinstance(h, TestRecord) else float(h) for h in history]
    if not history:
        raise NoHistory("no historical records match the filter")
    if isinstance(latest, TestRecord):
        latest_mean, n = latest.mean_throughput, latest.summary["samples"]
    else:
        latest_mean, n = float(latest), 1
    hist_mean = math.fsum(history) / len(history)
    status = "degraded" if latest_mean < (1.0 - threshold) * hist_mean else "ok"
    return RegressionVerdict(status, latest_mean, hist_mean, n, len(history), threshold)

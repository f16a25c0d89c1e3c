"""CSV tables and PNG figures for deployments, tests and failure timelines."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .telemetry import TestRecord, export_csv  # noqa: E402

log = logging.getLogger(__name__)

BAR_ORDER = ("test_specification", "gnb_setup", "ue_connection", "data_collection")


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    return path


def breakdown_csv(breakdowns: Mapping[str, Mapping[str, float | None]], path: Path) -> Path:
    rows = []
    for label, bd in breakdowns.items():
        for k in BAR_ORDER:
            v = bd.get(k)
            rows.append([label, k, "" if v is None else f"{v:.3f}"])
    return _write_csv(path, ["deployment", "phase", "seconds"], rows)


def breakdown_figure(breakdowns: Mapping[str, Mapping[str, float | None]], path: Path) -> Path:
    labels = list(breakdowns)
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    left = np.zeros(len(labels))
    for k in BAR_ORDER:
        vals = np.array([breakdowns[lab].get(k) or 0.0 for lab in labels])
        ax.barh(labels, vals, left=left, label=k.replace("_", " "))
        left += vals
    ax.set_xlabel("simulated time (s)")
    ax.legend(fontsize="small", loc="upper center", bbox_to_anchor=(0.5, -0.22), ncol=len(BAR_ORDER), frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def throughput_figure(records: Sequence[TestRecord], path: Path) -> Path:
    fig, (ax_t, ax_c) = plt.subplots(1, 2, figsize=(9, 3.4))
    for rec in records:
        for s in rec.series:
            ax_t.plot(np.asarray(s.times) + rec.started_at, s.throughput_mbps, lw=0.8,
                      label=f"{rec.record_id} {s.ue}")
    ax_t.set_xlabel("simulated time (s)")
    ax_t.set_ylabel("throughput (Mbps)")
    by_profile: dict[str, list[float]] = {}
    for rec in records:
        key = f"{rec.profile} {rec.direction}"
        for s in rec.series:
            by_profile.setdefault(key, []).extend(s.throughput_mbps)
    for key, vals in sorted(by_profile.items()):
        x = np.sort(vals)
        ax_c.plot(x, np.arange(1, len(x) + 1) / len(x), label=key)
    ax_c.set_xlabel("throughput (Mbps)")
    ax_c.set_ylabel("CDF")
    if by_profile:
        ax_c.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def timeline_csv(events: Sequence[Mapping], path: Path) -> Path:
    return _write_csv(path, ["t_rel", "t", "event", "detail"],
                      ([f"{e['t_rel']:.3f}", f"{e['t']:.3f}", e["event"], e.get("detail", "")] for e in events))


def timeline_figure(events: Sequence[Mapping], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 0.45 * max(len(events), 3) + 1))
    for i, e in enumerate(events):
        ax.plot([e["t_rel"]], [i], "o", color="C0")
        ax.annotate(e["event"], (e["t_rel"], i), xytext=(6, -3), textcoords="offset points", fontsize=8)
    ax.set_yticks([])
    ax.invert_yaxis()
    right = max((e["t_rel"] for e in events), default=0.0)
    ax.set_xlim(min(-5.0, -0.05 * right), right * 1.3 + 10)
    ax.set_xlabel("seconds since failure")
    ax.axvline(0.0, color="C3", lw=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report(out_dir: str | Path, *, breakdowns: Mapping | None = None,
                 records: Sequence[TestRecord] = (), timeline: Sequence[Mapping] = ()) -> list[str]:
    """Write whatever inputs are non-empty; return the file paths created."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    if breakdowns:
        files.append(breakdown_csv(breakdowns, out / "deployment_breakdown.csv"))
        files.append(breakdown_figure(breakdowns, out / "deployment_breakdown.png"))
    if records:
        export_csv(records, out / "throughput.csv")
        files.append(out / "throughput.csv")
        files.append(throughput_figure(records, out / "throughput.png"))
    if timeline:
        files.append(timeline_csv(timeline, out / "failure_timeline.csv"))
        files.append(timeline_figure(timeline, out / "failure_timeline.png"))
    log.info("wrote %d report files to %s", len(files), out)
    return [str(f) for f in files]

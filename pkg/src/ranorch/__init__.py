"""Intent-driven orchestration of disaggregated 5G base stations on a simulated cluster."""

from __future__ import annotations

__version__ = "0.1.0"

from .catalog import Catalog, ComponentDescriptor, Role, ValidationReport, ValidationStatus  # noqa: E402
from .cluster import Cluster, NodeSpec, NodeState, PoolBundle  # noqa: E402
from .config import NetworkScenario, TestSpec, UESpec, parse_deployment_file, parse_test_file, parse_ue_database  # noqa: E402
from .errors import RanOrchError  # noqa: E402
from .pipeline import Engine, Reconciler  # noqa: E402
from .scheduler import Scheduler, WorkloadRequirements  # noqa: E402
from .telemetry import PerformanceModel, TestRecord, TestStore, compare_baseline, synthesize_performance  # noqa: E402

__all__ = [
    "Catalog", "ComponentDescriptor", "Role", "ValidationReport", "ValidationStatus",
    "Cluster", "NodeSpec", "NodeState", "PoolBundle",
    "NetworkScenario", "TestSpec", "UESpec", "parse_deployment_file", "parse_test_file", "parse_ue_database",
    "RanOrchError", "Engine", "Reconciler", "Scheduler", "WorkloadRequirements",
    "PerformanceModel", "TestRecord", "TestStore", "compare_baseline", "synthesize_performance",
]

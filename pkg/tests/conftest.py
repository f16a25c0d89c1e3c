from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ranorch.catalog import Catalog  # noqa: E402
from ranorch.cluster import Cluster  # noqa: E402
from ranorch.config import load_fixture, parse_deployment_file  # noqa: E402
from ranorch.pipeline import Engine  # noqa: E402
from ranorch.scheduler import Scheduler  # noqa: E402


@pytest.fixture
def catalog():
    return Catalog.seeded()


@pytest.fixture
def cluster():
    return Cluster.load(seed=7)


@pytest.fixture
def scheduler(cluster):
    return Scheduler(cluster)


@pytest.fixture
def engine():
    eng = Engine(seed=11)
    eng.timing.jitter = 0.0
    return eng


@pytest.fixture
def example_scenario():
    return parse_deployment_file(load_fixture("example_deployment.json"))


# one line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        verdict, title = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}")

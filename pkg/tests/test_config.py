from __future__ import annotations

import json

import pytest
from hypothesis import given, settings, strategies as st

from oracles import ROLE_ORDER, VALID_ROWS
from ranorch.cluster import Cluster
from ranorch.config import (
    POD_ONE_CONTAINER,
    POD_TWO_CONTAINERS,
    NetworkScenario,
    TestSpec,
    UESpec,
    load_fixture,
    parse_deployment_file,
    parse_test_file,
    parse_ue_database,
    round_trip,
    specialize_deployment,
)
from ranorch.errors import (
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
from ranorch.scheduler import Scheduler

EX_DEPLOY = load_fixture("example_deployment.json")
EX_TEST = load_fixture("example_test.json")
EX_UEDB = load_fixture("example_ue_db.json")


def _mutate(text, fn):
    d = json.loads(text)
    fn(d)
    return json.dumps(d)


def test_example_deployment_parses(example_scenario):
    assert example_scenario.id == 1
    assert example_scenario.ru.location == 660
    assert example_scenario.du_low.name == "cubb"
    assert example_scenario.core_network.name == "open5gs"


def test_empty_object_schema_error():
    with pytest.raises(SchemaError):
        parse_deployment_file("{}")


def test_extra_key_schema_error():
    with pytest.raises(SchemaError):
        parse_deployment_file(_mutate(EX_DEPLOY, lambda d: d["network_scenario"].update(extra=1)))


def test_wrong_type():
    with pytest.raises(ConfigTypeError):
        parse_deployment_file(_mutate(EX_DEPLOY, lambda d: d["network_scenario"].update(id="1")))


def test_unknown_name_catalog_error():
    with pytest.raises(CatalogError):
        parse_deployment_file(_mutate(EX_DEPLOY, lambda d: d["network_scenario"]["cu"].update(name="xyz")))


def test_incompatible_file_rejected():
    text = _mutate(EX_DEPLOY, lambda d: (d["network_scenario"]["cu"].update(name="srsran"),
                                  d["network_scenario"]["du-high"].update(name="srsran")))
    with pytest.raises(IncompatibleScenario) as info:
        parse_deployment_file(text)
    assert info.value.exit_code == 1


def test_example_test_parses():
    t = parse_test_file(EX_TEST)
    assert len(t.ue_specifications) == 1
    ue = t.ue_specifications[0]
    assert (ue.bandwidth_mbps, ue.protocol, ue.reverse, ue.server_port) == (25, "udp", True, 32201)
    assert t.duration == 60


def _ue(fn):
    return _mutate(EX_TEST, lambda d: fn(d["network_scenario"]["ue_specification"][0]))


@pytest.mark.parametrize("key,value,exc", [
    ("duration", 0, RangeError),
    ("bandwidth_mbps", -1, RangeError),
    ("server_port", 70000, RangeError),
    ("protocol", "sctp", RangeError),
    ("reverse", "yes", ConfigTypeError),
    ("bandwidth_mbps", True, ConfigTypeError),
])
def test_test_spec_value_errors(key, value, exc):
    with pytest.raises(exc):
        parse_test_file(_ue(lambda u: u.update({key: value})))


def test_iperf_with_mgen_param_mismatch():
    with pytest.raises(ParamMismatch):
        parse_test_file(_ue(lambda u: u.update(distribution="poisson")))


def test_mgen_accepts_distribution():
    t = parse_test_file(_ue(lambda u: u.update(test_type="mgen", distribution="poisson", packet_size_bytes=512)))
    assert t.ue_specifications[0].distribution == "poisson"


def test_empty_ue_list():
    with pytest.raises(SchemaError):
        parse_test_file(_mutate(EX_TEST, lambda d: d["network_scenario"].update(ue_specification=[])))


def test_example_ue_db_parses():
    db = parse_ue_database(EX_UEDB)
    assert len(db) == 3
    assert db["mj06k2su"].ue_imsi == "001010000012252"


def test_empty_ue_database():
    assert parse_ue_database("{}") == {}


def test_short_imsi():
    d = json.loads(EX_UEDB)
    d["mj06k2su"]["ue_imsi"] = "00101000001225"
    with pytest.raises(BadImsi):
        parse_ue_database(json.dumps(d))


def test_duplicate_serial():
    body = EX_UEDB.strip()[1:-1]
    first = body.split('},', 1)[0] + "}"
    with pytest.raises(DuplicateSerial):
        parse_ue_database("{" + first + "," + first + "}")


@pytest.mark.parametrize("text", [EX_DEPLOY, EX_TEST, EX_UEDB])
def test_fixtures_round_trip_bit_stable(text):
    for parse in (parse_deployment_file, parse_test_file, parse_ue_database):
        try:
            value = parse(text)
        except (SchemaError, CatalogError):
            continue
        once = round_trip(value)
        assert once == value
        assert round_trip(once) == once
        from ranorch.config import serialize
        assert serialize(once) == serialize(value)
        return
    pytest.fail("fixture did not parse")


def test_specialize_example_deployment(example_scenario):
    sched = Scheduler(Cluster.load())
    r = specialize_deployment(example_scenario, sched)
    assert r.pod_layout == POD_TWO_CONTAINERS
    assert len(r.containers) == 2
    assert len(r.vf_grants) == 1
    assert r.ru_mac == "6c:ad:ad:00:03:a2"
    assert r.stack_profile == "arc"
    p = sched.placements[r.workload_id]
    assert p.vf_handles[0] in r.vf_grants
    assert sched.cluster.vf_pool(p.node_id, p.vf_handles[0].nic).allocated[p.vf_handles[0].index].vlan is None


def test_specialize_oai_fh72_two_tagged_vfs():
    s = NetworkScenario.from_assignments(dict(zip(ROLE_ORDER, ("open5gs", "oai", "oai", "none", "foxconn"))))
    sched = Scheduler(Cluster.load())
    r = specialize_deployment(s, sched)
    assert r.pod_layout == POD_ONE_CONTAINER
    assert len(r.vf_grants) == 2
    vlans = {sched.cluster.vf_pool(h.node, h.nic).allocated[h.index].vlan for h in r.vf_grants}
    assert vlans == {2, 3}


def test_specialize_empty_cluster(example_scenario):
    c = Cluster.load()
    c.nodes.clear()
    with pytest.raises(NoFeasibleNode):
        specialize_deployment(example_scenario, Scheduler(c))


def test_specialize_unknown_ru_location(example_scenario):
    import dataclasses
    s = dataclasses.replace(example_scenario, ru=dataclasses.replace(example_scenario.ru, location=999))
    with pytest.raises(UnknownRu):
        specialize_deployment(s, Scheduler(Cluster.load()))


@settings(max_examples=1000, deadline=None)
@given(st.sampled_from(sorted(VALID_ROWS)), st.integers(1, 10_000),
       st.one_of(st.none(), st.integers(0, 999)))
def test_scenario_round_trip_property(row, sid, location):
    s = NetworkScenario.from_assignments(dict(zip(ROLE_ORDER, row)), sid, location)
    assert round_trip(s) == s


ue_strategy = st.builds(
    UESpec,
    slice_id=st.integers(0, 8), test_type=st.just("iperf"),
    bandwidth_mbps=st.integers(1, 2000), duration=st.integers(1, 600),
    protocol=st.sampled_from(["udp", "tcp"]), reverse=st.booleans(), json_output=st.booleans(),
    server_hostname=st.text("abcdefghij.:/", min_size=1, max_size=20),
    server_port=st.integers(1, 65535),
)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 50), st.lists(ue_strategy, min_size=1, max_size=4))
def test_test_spec_round_trip_property(sid, ues):
    t = TestSpec(sid, tuple(ues))
    assert round_trip(t) == t

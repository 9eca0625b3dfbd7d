import copy
import csv
import pathlib

import numpy as np
import pytest
import yaml

from surroconf.sim.engine import EventLoop
from surroconf.sim.metrics import SCHEMAS, MetricsLog, export_metrics
from surroconf.sim.netmodel import LinkJitterModel
from surroconf.sim.runner import Simulation, compare_unicast, mean_pair_variance, run, scenario_instance
from surroconf.sim.scenario import ScenarioError, load_scenario, parse_scenario

SCEN = pathlib.Path(__file__).resolve().parents[1] / "scenarios"

BASE = {
    "name": "t",
    "seed": 3,
    "duration_s": 8,
    "D_ms": 400,
    "transcode": {"base_ms": 5.0, "in_coef_ms_per_kbps": 0.004, "out_coef_ms_per_kbps": 0.004},
    "default_link": {"capacity_kbps": 100000, "sigma_ms": 2.0},
    "wan": {"sigma_ms": 40.0, "spike_prob": 0.03, "spike_max_ms": 300.0},
    "regions": {"ap": {"intra_latency_ms": 2}, "eu": {"intra_latency_ms": 2}, "usw": {"intra_latency_ms": 2}},
    "links": [
        {"a": "ap", "b": "eu", "latency_ms": 140},
        {"a": "eu", "b": "usw", "latency_ms": 75},
        {"a": "usw", "b": "ap", "latency_ms": 85},
    ],
    "participants": [
        {"id": 0, "region": "ap", "last_mile_ms": 30, "large": 1},
        {"id": 1, "region": "eu", "last_mile_ms": 30, "large": 0},
        {"id": 2, "region": "usw", "last_mile_ms": 30, "large": 0},
    ],
}


def doc(**changes):
    d = copy.deepcopy(BASE)
    d.update(changes)
    return d


# -- engine and network model


def test_event_loop_orders_by_time_then_insertion():
    loop = EventLoop()
    seen = []
    loop.at(5, seen.append, "b")
    loop.at(1, seen.append, "a")
    loop.at(5, seen.append, "c")
    loop.run(10)
    assert seen == ["a", "b", "c"] and loop.now == 10 and loop.processed == 3


def test_event_loop_refuses_past():
    loop = EventLoop(100)
    with pytest.raises(ValueError):
        loop.at(50, print)


def test_event_loop_stops_at_horizon():
    loop = EventLoop()
    seen = []
    loop.at(20, seen.append, 1)
    loop.run(10)
    assert seen == [] and loop.pending() == 1


def test_link_model_statistics():
    rng = np.random.default_rng(0)
    d = LinkJitterModel(100, 5).sample(rng, 200_000)
    assert d.min() >= 0
    assert d.mean() == pytest.approx(100, abs=0.1)
    assert d.std() == pytest.approx(5, abs=0.1)
    spikes = LinkJitterModel(0, 0, 300, 1.0).sample(rng, 100_000)
    assert spikes.mean() == pytest.approx(150, rel=0.02)
    assert LinkJitterModel(10, 0, 300, 0.1).mean_ms == pytest.approx(25)


def test_link_loss():
    rng = np.random.default_rng(1)
    assert not LinkJitterModel(10).lost(rng, 100).any()
    assert LinkJitterModel(10, loss_prob=0.5).lost(rng, 100_000).mean() == pytest.approx(0.5, abs=0.01)


# -- metrics


def test_export_headers_only_for_empty_log(tmp_path):
    files = export_metrics(MetricsLog(), str(tmp_path))
    assert len(files) == len(SCHEMAS)
    with open(tmp_path / "rates.csv") as fh:
        assert fh.read() == "time_ms,flow,receiver,rate_kbps\n"
    with open(tmp_path / "buffer.csv") as fh:
        assert next(csv.reader(fh)) == ["time_ms", "flow", "receiver", "occupancy_ms", "sigma_hat_ms", "bound_L_ms"]


def test_export_float_format(tmp_path):
    log = MetricsLog()
    log.add("latency", 1.0, 0, 1, 123.45678)
    export_metrics(log, str(tmp_path), prefix="x_")
    assert (tmp_path / "x_latency.csv").read_text().splitlines()[1] == "1.000,0,1,123.457"


def test_metrics_select():
    log = MetricsLog()
    log.add("rates", 0.0, 1, 2, 256)
    log.add("rates", 0.0, 2, 1, 512)
    assert log.column("rates", "rate_kbps", flow=2) == [512]
    assert log.select("rates", receiver=2) == [{"time_ms": 0.0, "flow": 1, "receiver": 2, "rate_kbps": 256}]


# -- scenario parsing


def test_shipped_scenarios_parse():
    for path in SCEN.glob("*.yaml"):
        sc = load_scenario(str(path))
        assert sc.participants and sc.duration_ms > 0


@pytest.mark.parametrize("bad", [
    {"participants": []},
    {"participants": [{"id": 0, "region": "mars"}]},
    {"links": [{"a": "ap", "b": "eu", "latency_ms": 1}]},
    {"events": [{"at_s": 1, "kind": "join", "id": 42}]},
    {"events": [{"at_s": 1, "kind": "teleport"}]},
    {"events": [{"at_s": 5, "kind": "leave", "id": 1}, {"at_s": 1, "kind": "leave", "id": 2}]},
    {"duration_s": 0},
    {"initiator": 9},
    {"ladder": [256, 128]},
])
def test_malformed_scenarios(bad):
    with pytest.raises(ScenarioError):
        parse_scenario(doc(**bad))


def test_unreadable_scenario(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(str(tmp_path / "missing.yaml"))
    p = tmp_path / "bad.yaml"
    p.write_text("a: [1, 2\n")
    with pytest.raises(ScenarioError):
        load_scenario(str(p))


def test_accept_layout():
    sc = parse_scenario(doc())
    p = sc.participants
    assert p[0].accept_for(1) == 768 and p[0].accept_for(2) == 256


def test_scenario_instance_bounds():
    topo, bounds = scenario_instance(parse_scenario(doc()))
    assert bounds[(0, 1)] == 400 - 30 - 30
    assert topo.latency(0, 1) == 140


# -- runs


@pytest.fixture(scope="module")
def static_run():
    return run(parse_scenario(doc(duration_s=10)))


def test_static_run_reaches_caps_and_stays(static_run):
    sc = parse_scenario(doc())
    for m in (0, 1, 2):
        for n in (0, 1, 2):
            if m == n:
                continue
            rows = [r for r in static_run.select("rates", flow=m, receiver=n) if r["time_ms"] >= 2000]
            assert rows and {r["rate_kbps"] for r in rows} == {sc.participants[n].accept_for(m)}


def test_static_run_meets_deadlines(static_run):
    assert static_run.rows["timeouts"] == []
    assert max(static_run.column("latency", "latency_ms")) <= 400


def test_frame_conservation(static_run):
    for r in static_run.select("frames"):
        assert r["generated"] == r["on_time"] + r["lost"] + r["dropped"] + r["in_flight"]
        assert r["on_time"] > 0.9 * r["generated"]


def test_same_seed_same_log():
    sc = parse_scenario(doc(duration_s=4))
    assert run(sc).rows == run(sc).rows
    assert run(sc, seed=11).rows != run(sc, seed=12).rows


def test_leave_and_capacity_events():
    d = doc(duration_s=10, events=[
        {"at_s": 3, "kind": "capacity", "from": 0, "to": 1, "capacity_kbps": 300},
        {"at_s": 6, "kind": "leave", "id": 2},
    ])
    sim = Simulation(parse_scenario(d), check_invariants=True)
    log = sim.run()
    late = [r for r in log.select("rates") if r["time_ms"] > 7000]
    assert late and all(2 not in (r["flow"], r["receiver"]) for r in late)
    assert ("leave" in {r["kind"] for r in log.select("membership")})
    assert sim.overlay.topo.capacity(0, 1) == 300


def test_join_event_attaches_newcomer():
    parts = BASE["participants"] + [{"id": 3, "region": "eu", "last_mile_ms": 30, "large": 0}]
    d = doc(duration_s=10, participants=parts, events=[{"at_s": 4, "kind": "join", "id": 3}])
    log = Simulation(parse_scenario(d), check_invariants=True).run()
    rows = [r for r in log.select("rates", receiver=3) if r["time_ms"] > 8000]
    assert {r["flow"] for r in rows} == {0, 1, 2}
    assert all(r["rate_kbps"] > 0 for r in rows)


def test_unicast_comparison_orders():
    c = compare_unicast(parse_scenario(doc(duration_s=15)), seed=5)
    assert c.overlay_latency_var < c.unicast_latency_var
    assert c.overlay_timeouts < c.unicast_timeouts


def test_zero_jitter_control_meets_deadlines():
    d = doc(duration_s=6, wan={"sigma_ms": 0, "spike_prob": 0, "spike_max_ms": 0},
            default_link={"capacity_kbps": 100000, "sigma_ms": 0.0})
    c = compare_unicast(parse_scenario(d), seed=1)
    assert c.overlay_timeouts == 0 and c.unicast_timeouts == 0
    assert c.overlay_latency_var == pytest.approx(0, abs=1e-9)
    assert c.unicast_latency_var == pytest.approx(0, abs=1e-9)


def test_unicast_limited_to_three():
    parts = BASE["participants"] + [{"id": 3, "region": "eu", "last_mile_ms": 30}]
    with pytest.raises(ScenarioError):
        compare_unicast(parse_scenario(doc(participants=parts)))


def test_mean_pair_variance():
    log = MetricsLog()
    for t, v in enumerate((1.0, 3.0)):
        log.add("latency", float(t), 0, 1, v)
    for t, v in enumerate((5.0, 5.0)):
        log.add("latency", float(t), 1, 0, v)
    assert mean_pair_variance(log) == pytest.approx(0.5)


def test_shipped_yaml_round_trip():
    raw = yaml.safe_load((SCEN / "three_user.yaml").read_text())
    assert parse_scenario(raw).name == "three_user"

"""Scenario files (YAML) and their validated in-memory form.

Schema::

    name: str
    seed: int
    duration_s: float
    D_ms: float                      # end-to-end playback delay
    fps: int                         # default 25
    metrics_interval_ms: float       # default 200
    ladder: [kbps, ...]              # default 128 256 512 768 1049
    transcode: {base_ms, in_coef_ms_per_kbps, out_coef_ms_per_kbps, speed: {id: factor}}
    default_link: {capacity_kbps, sigma_ms, loss_prob}
    regions: {name: {intra_latency_ms}}
    links:                           # region pairs, both directions unless one_way
      - {a: region, b: region, latency_ms, capacity_kbps?, sigma_ms?, one_way?}
    wan: {sigma_ms, spike_prob, spike_max_ms}   # direct paths in unicast runs
    participants:
      - {id, region, last_mile_ms, source_rate_kbps?, large?: flow id,
         large_kbps?: 768, small_kbps?: 256, accept?: {flow: kbps}, clock_skew_ms?}
    initiator: id                    # default lowest id present at start
    events:                          # time-ordered
      - {at_s, kind: join, id}
      - {at_s, kind: leave, id}
      - {at_s, kind: jitter, from: region, to: region, max_ms, until_s?}
      - {at_s, kind: capacity, from: id, to: id, capacity_kbps}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import yaml

from ..core import DEFAULT_LADDER, RateLadder, TranscodeModel


class ScenarioError(ValueError):
    pass


@dataclass
class RegionLink:
    latency_ms: float
    capacity_kbps: float
    sigma_ms: float
    loss_prob: float = 0.0


@dataclass
class Participant:
    id: int
    region: str
    last_mile_ms: float
    source_rate_kbps: int
    accept: Dict[int, int]
    large: Optional[int]
    large_kbps: int
    small_kbps: int
    clock_skew_ms: float = 0.0

    def accept_for(self, flow: int) -> int:
        if flow in self.accept:
            return self.accept[flow]
        return self.large_kbps if flow == self.large else self.small_kbps


@dataclass
class Event:
    at_ms: float
    kind: str
    args: dict


@dataclass
class WanModel:
    sigma_ms: float = 40.0
    spike_prob: float = 0.03
    spike_max_ms: float = 300.0


@dataclass
class Scenario:
    name: str
    seed: int
    duration_ms: float
    D_ms: float
    fps: int
    metrics_interval_ms: float
    ladder: RateLadder
    model: TranscodeModel
    regions: Dict[str, float]
    region_links: Dict[Tuple[str, str], RegionLink]
    participants: Dict[int, Participant]
    initial: Tuple[int, ...]
    initiator: int
    events: List[Event] = field(default_factory=list)
    wan: WanModel = field(default_factory=WanModel)
    default_capacity: float = 100000.0
    default_sigma: float = 1.0

    def link(self, i: int, j: int) -> RegionLink:
        ri, rj = self.participants[i].region, self.participants[j].region
        if ri == rj:
            return RegionLink(self.regions[ri], self.default_capacity, self.default_sigma)
        return self.region_links[(ri, rj)]


def _req(d, key, where):
    if key not in d:
        raise ScenarioError(f"{where}: missing '{key}'")
    return d[key]


def parse_scenario(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a mapping")
    try:
        return _parse(doc)
    except ScenarioError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc


def _parse(doc: dict) -> Scenario:
    ladder = RateLadder(tuple(int(r) for r in doc.get("ladder", DEFAULT_LADDER)))
    tc = doc.get("transcode", {}) or {}
    model = TranscodeModel(float(tc.get("base_ms", 0.0)), float(tc.get("in_coef_ms_per_kbps", 0.0)),
                           float(tc.get("out_coef_ms_per_kbps", 0.0)),
                           {int(k): float(v) for k, v in (tc.get("speed", {}) or {}).items()})
    dl = doc.get("default_link", {}) or {}
    cap0 = float(dl.get("capacity_kbps", 100000.0))
    sig0 = float(dl.get("sigma_ms", 1.0))
    loss0 = float(dl.get("loss_prob", 0.0))

    regions = {}
    for name, spec in (_req(doc, "regions", "scenario") or {}).items():
        regions[str(name)] = float((spec or {}).get("intra_latency_ms", 1.0))
    rlinks = {}
    for k, spec in enumerate(doc.get("links", []) or []):
        a, b = str(_req(spec, "a", f"links[{k}]")), str(_req(spec, "b", f"links[{k}]"))
        for r in (a, b):
            if r not in regions:
                raise ScenarioError(f"links[{k}]: unknown region {r!r}")
        link = RegionLink(float(_req(spec, "latency_ms", f"links[{k}]")),
                          float(spec.get("capacity_kbps", cap0)), float(spec.get("sigma_ms", sig0)),
                          float(spec.get("loss_prob", loss0)))
        if link.latency_ms < 0 or link.capacity_kbps <= 0:
            raise ScenarioError(f"links[{k}]: latency must be >= 0 and capacity > 0")
        rlinks[(a, b)] = link
        if not spec.get("one_way", False):
            rlinks.setdefault((b, a), link)

    people = {}
    for k, p in enumerate(_req(doc, "participants", "scenario") or []):
        pid = int(_req(p, "id", f"participants[{k}]"))
        region = str(_req(p, "region", f"participants[{k}]"))
        if region not in regions:
            raise ScenarioError(f"participant {pid}: unknown region {region!r}")
        if pid in people:
            raise ScenarioError(f"participant {pid} declared twice")
        people[pid] = Participant(pid, region, float(p.get("last_mile_ms", 0.0)),
                                  int(p.get("source_rate_kbps", ladder.rates_kbps[-1])),
                                  {int(f): int(v) for f, v in (p.get("accept", {}) or {}).items()},
                                  None if p.get("large") is None else int(p["large"]),
                                  int(p.get("large_kbps", 768)), int(p.get("small_kbps", 256)),
                                  float(p.get("clock_skew_ms", 0.0)))
    if not people:
        raise ScenarioError("scenario has no participants")
    for a in {p.region for p in people.values()}:
        for b in {p.region for p in people.values()}:
            if a != b and (a, b) not in rlinks:
                raise ScenarioError(f"no link between regions {a!r} and {b!r}")

    events = []
    late_joiners = set()
    for k, e in enumerate(doc.get("events", []) or []):
        kind = str(_req(e, "kind", f"events[{k}]"))
        at = float(_req(e, "at_s", f"events[{k}]")) * 1000.0
        args = {key: v for key, v in e.items() if key not in ("kind", "at_s")}
        if kind in ("join", "leave"):
            pid = int(_req(e, "id", f"events[{k}]"))
            if pid not in people:
                raise ScenarioError(f"events[{k}]: undeclared participant {pid}")
            if kind == "join":
                late_joiners.add(pid)
        elif kind == "jitter":
            for key in ("from", "to"):
                if str(_req(e, key, f"events[{k}]")) not in regions:
                    raise ScenarioError(f"events[{k}]: unknown region {e[key]!r}")
            _req(e, "max_ms", f"events[{k}]")
        elif kind == "capacity":
            for key in ("from", "to"):
                if int(_req(e, key, f"events[{k}]")) not in people:
                    raise ScenarioError(f"events[{k}]: undeclared participant {e[key]}")
            _req(e, "capacity_kbps", f"events[{k}]")
        else:
            raise ScenarioError(f"events[{k}]: unknown kind {kind!r}")
        events.append(Event(at, kind, args))
    if any(b.at_ms < a.at_ms for a, b in zip(events, events[1:])):
        raise ScenarioError("events must be listed in time order")

    initial = tuple(sorted(p for p in people if p not in late_joiners))
    if not initial:
        raise ScenarioError("nobody is present at the start")
    initiator = int(doc.get("initiator", initial[0]))
    if initiator not in initial:
        raise ScenarioError(f"initiator {initiator} is not present at the start")
    wan = doc.get("wan", {}) or {}
    duration = float(_req(doc, "duration_s", "scenario")) * 1000.0
    if duration <= 0:
        raise ScenarioError("duration must be positive")
    return Scenario(
        name=str(doc.get("name", "scenario")),
        seed=int(doc.get("seed", 0)),
        duration_ms=duration,
        D_ms=float(doc.get("D_ms", 400.0)),
        fps=int(doc.get("fps", 25)),
        metrics_interval_ms=float(doc.get("metrics_interval_ms", 200.0)),
        ladder=ladder,
        model=model,
        regions=regions,
        region_links=rlinks,
        participants=people,
        initial=initial,
        initiator=initiator,
        events=events,
        wan=WanModel(float(wan.get("sigma_ms", 40.0)), float(wan.get("spike_prob", 0.03)),
                     float(wan.get("spike_max_ms", 300.0))),
        default_capacity=cap0,
        default_sigma=sig0,
    )


def load_scenario(path: str) -> Scenario:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path} is not valid YAML: {exc}") from exc
    return parse_scenario(doc)

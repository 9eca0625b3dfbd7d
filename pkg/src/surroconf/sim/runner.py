"""Session simulation: traffic, routing adaptation, buffering and metrics.

All timing is in true simulated ms. Surrogate clocks may be skewed; each
surrogate converts to initiator time with the offset learned from
heartbeats, and the residual error shifts its timestamps and deadlines.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..core import LastMile, Link, RateLadder, TopologySnapshot, transcode_latency
from ..core import DisseminationTree
from ..jitter import DelayBudget, Fragment, JitterBuffer, update_bound
from ..routing import Overlay
from ..session import SessionProtocol
from ..wire import packets_per_frame
from .engine import EventLoop
from .metrics import MetricsLog
from .netmodel import LinkJitterModel
from .scenario import Scenario, ScenarioError

PING_PERIOD_MS = 1000.0
GOSSIP_PERIOD_MS = 1000.0
PING_WEIGHT = 0.125
PING_TOLERANCE_MS = 1.0


class SimulationError(RuntimeError):
    pass


@dataclass
class PairState:
    flow: int
    receiver: int
    budget: DelayBudget
    buffer: JitterBuffer
    heap: list = field(default_factory=list)
    generated: int = 0
    pending_releases: int = 0


class Simulation:
    """One run of a scenario, either over the surrogate overlay or with
    every source sending straight to every receiver across the WAN."""

    def __init__(self, scenario: Scenario, seed: Optional[int] = None, mode: str = "overlay",
                 duration_ms: Optional[float] = None, check_invariants: bool = False):
        if mode not in ("overlay", "unicast"):
            raise ValueError(f"unknown mode {mode!r}")
        self.sc = scenario
        self.mode = mode
        self.duration = scenario.duration_ms if duration_ms is None else duration_ms
        ss = np.random.SeedSequence(scenario.seed if seed is None else seed)
        self.net_rng, self.route_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        self.loop = EventLoop()
        self.log = MetricsLog()
        self.present = set(scenario.initial)
        self.spikes: Dict[Tuple[str, str], Tuple[float, float]] = {}
        self.pairs: Dict[Tuple[int, int], PairState] = {}
        self.frame_seq: Dict[int, int] = {}
        self.ping_est: Dict[Tuple[int, int], float] = {}
        self.frame_ms = 1000.0 / scenario.fps
        self._switch_seen = 0
        self.finished_pairs: List[PairState] = []

        topo = self._topology(self.present)
        bounds = {(m, n): self._script_L(m, n) for m in self.present for n in self.present if m != n}
        if mode == "overlay":
            self.overlay: Optional[Overlay] = Overlay.bootstrap(topo, scenario.model, scenario.ladder, bounds,
                                                                check_invariants=check_invariants)
            self.trees = self.overlay.trees
        else:
            self.overlay = None
            self.topo = topo
            self.trees = {m: self._star(m) for m in sorted(self.present)}

        p = scenario.participants
        self.session = SessionProtocol(self.loop, {s: f"{p[s].region}/{s}" for s in self.present},
                                       self._base_latency, scenario.initiator,
                                       skew={s: p[s].clock_skew_ms for s in p})

    # -- model helpers -------------------------------------------------------

    def _script_L(self, m, n) -> float:
        p = self.sc.participants
        return self.sc.D_ms - p[m].last_mile_ms - p[n].last_mile_ms

    def _base_latency(self, i, j) -> float:
        return self.sc.link(i, j).latency_ms

    def _topology(self, members) -> TopologySnapshot:
        p = self.sc.participants
        links = {}
        for i in members:
            for j in members:
                if i != j:
                    rl = self.sc.link(i, j)
                    links[(i, j)] = Link(rl.capacity_kbps, rl.latency_ms)
        lm = {s: LastMile(p[s].last_mile_ms, p[s].source_rate_kbps,
                          {f: p[s].accept_for(f) for f in p if f != s}) for s in members}
        return TopologySnapshot(tuple(members), links, lm)

    def _star(self, m) -> DisseminationTree:
        p = self.sc.participants
        t = DisseminationTree(m)
        for n in sorted(self.present):
            if n != m:
                t.parent[n] = m
                t.edge_rate[(m, n)] = self.sc.ladder.floor(min(p[n].accept_for(m), p[m].source_rate_kbps))
        return t

    @property
    def current_topo(self) -> TopologySnapshot:
        return self.overlay.topo if self.overlay is not None else self.topo

    def _link_model(self, a, b) -> LinkJitterModel:
        rl = self.sc.link(a, b)
        if self.mode == "unicast":
            w = self.sc.wan
            return LinkJitterModel(rl.latency_ms, w.sigma_ms, w.spike_max_ms, w.spike_prob, rl.loss_prob)
        return LinkJitterModel(rl.latency_ms, rl.sigma_ms, loss_prob=rl.loss_prob)

    def _hop_delays(self, a, b, n) -> Tuple[np.ndarray, np.ndarray]:
        lm = self._link_model(a, b)
        d = lm.sample(self.net_rng, n)
        ra, rb = self.sc.participants[a].region, self.sc.participants[b].region
        spike = self.spikes.get((ra, rb))
        if spike is not None and self.loop.now < spike[1]:
            d = d + self.net_rng.uniform(0.0, spike[0], n)
        return d, lm.lost(self.net_rng, n)

    def clock_error(self, s) -> float:
        """Estimated initiator time minus true initiator time at surrogate s."""
        v = self.session.views.get(s)
        skew = self.sc.participants
        init = v.initiator if v is not None else self.sc.initiator
        off = v.clock.offset if v is not None and v.clock.offset is not None else 0.0
        if v is not None and v.host is not None:
            return 0.0
        return skew[s].clock_skew_ms + off - skew[init].clock_skew_ms

    # -- setup ---------------------------------------------------------------

    def _add_pair(self, m, n) -> None:
        p = self.sc.participants
        budget = DelayBudget(self.sc.D_ms, p[m].last_mile_ms, p[n].last_mile_ms)
        buf = JitterBuffer(budget, self.frame_ms)
        buf.last_seq = self.frame_seq.get(m, 0) - 1
        self.pairs[(m, n)] = PairState(m, n, budget, buf)

    def _start_source(self, m, offset_ms=0.0) -> None:
        self.frame_seq.setdefault(m, 0)
        for n in sorted(self.present):
            if n != m and (m, n) not in self.pairs:
                self._add_pair(m, n)
        self.loop.after(offset_ms, self._frame, m)

    def run(self) -> MetricsLog:
        if len(self.present) < 2:
            raise SimulationError("fewer than two participants: no traffic to simulate")
        for k, m in enumerate(sorted(self.present)):
            self._start_source(m, offset_ms=k * self.frame_ms / len(self.present))
        for s in sorted(self.present):
            self.log.add("membership", 0.0, "join", s, 0)
        self.session.start()
        for ev in self.sc.events:
            self.loop.at(ev.at_ms, self._event, ev)
        self.loop.at(0.0, self._tick)
        if self.overlay is not None:
            self.loop.at(GOSSIP_PERIOD_MS, self._gossip)
            self.loop.at(PING_PERIOD_MS / 2, self._ping)
            for m in sorted(self.present):
                for n in sorted(self.present):
                    if n != m:
                        self._schedule_eval(n, m)
        self.loop.run(self.duration)
        self._finish()
        return self.log

    # -- traffic -------------------------------------------------------------

    def _frame(self, m) -> None:
        if m not in self.present:
            return
        seq = self.frame_seq[m]
        self.frame_seq[m] = seq + 1
        t = self.loop.now
        ts = t + self.clock_error(m)
        tree = self.trees[m]
        topo = self.current_topo
        model = self.sc.model
        p = self.sc.participants
        for n in sorted(self.present):
            if n == m:
                continue
            pair = self.pairs.get((m, n))
            if pair is None or n not in tree.parent:
                continue
            pair.generated += 1
            pair.pending_releases += 1
            rel = ts + pair.budget.script_L - self.clock_error(n)
            self.loop.at(max(rel, t), self._release, m, n, seq, ts)
            rate = tree.rate_into(n)
            if rate <= 0:
                continue  # starved flow: the frame is lost at its deadline
            count = packets_per_frame(rate, self.sc.fps)
            path = tree.path(n)
            delay = np.zeros(count)
            lost = np.zeros(count, dtype=bool)
            for a, b in zip(path, path[1:]):
                d, l = self._hop_delays(a, b, count)
                delay += d
                lost |= l
                if a != m:
                    delay += transcode_latency(model, a, tree.rate_into(a), tree.edge_rate[(a, b)])
            arrival = t + delay
            for k in range(count):
                if not lost[k]:
                    heapq.heappush(pair.heap, (float(arrival[k]), seq, k, count, ts))
            if not lost.any():
                self.log.add("latency", float(arrival.max()), m, n,
                             float(delay.max()) + p[m].last_mile_ms + p[n].last_mile_ms)
        self.loop.after(self.frame_ms, self._frame, m)

    def _flush(self, pair: PairState, upto: float) -> None:
        err = self.clock_error(pair.receiver)
        heap = pair.heap
        buf = pair.buffer
        while heap and heap[0][0] <= upto:
            arrival, seq, k, count, ts = heapq.heappop(heap)
            status = buf.push(Fragment(ts, seq, k, count), arrival + err)
            if status == "late":
                ev = buf.timeouts[-1]
                self.log.add("timeouts", arrival, pair.flow, pair.receiver, ev.delay_ms)

    def _release(self, m, n, seq, ts) -> None:
        pair = self.pairs.get((m, n))
        if pair is None:
            return
        pair.pending_releases -= 1
        self._flush(pair, self.loop.now)
        local = ts + pair.budget.script_L
        pair.buffer.pop_due(local + 1e-6)
        pair.buffer.skip(seq, ts)

    # -- control plane --------------------------------------------------------

    def _tick(self) -> None:
        now = self.loop.now
        topo = self.current_topo
        dirty = set()
        for (m, n) in sorted(self.pairs):
            pair = self.pairs[(m, n)]
            tree = self.trees.get(m)
            if tree is None or n not in tree.parent:
                continue
            self.log.add("rates", now, m, n, min(tree.rate_into(n), topo.accept(m, n)))
            buf = pair.buffer
            if self.overlay is not None:
                upd = update_bound(pair.budget, buf.sigma_hat)
                if upd.notify:
                    self.overlay.set_bound(m, n, pair.budget.notified_L)
                    dirty.add(m)
            self.log.add("buffer", now, m, n, float(buf.occupancy_ms), float(buf.sigma_hat),
                         float(pair.budget.bound_L))
        if self.overlay is not None:
            self.overlay.clock_ms = now
            for m in sorted(dirty):
                self.overlay.repair(m)
            self._log_switches()
        self.loop.after(self.sc.metrics_interval_ms, self._tick)

    def _gossip(self) -> None:
        self.overlay.gossip()
        self.loop.after(GOSSIP_PERIOD_MS, self._gossip)

    def _ping(self) -> None:
        """One probe per link; routing latencies follow an EWMA of probes."""
        ov = self.overlay
        ov.clock_ms = self.loop.now
        moved = False
        for (i, j) in sorted(ov.topo.links):
            d, _ = self._hop_delays(i, j, 1)
            est = self.ping_est.get((i, j), ov.topo.latency(i, j))
            est += PING_WEIGHT * (float(d[0]) - est)
            self.ping_est[(i, j)] = est
            if abs(est - ov.topo.latency(i, j)) > PING_TOLERANCE_MS:
                ov.set_link_latency(i, j, est)
                moved = True
        if moved and ov.violations():
            ov.repair_all()
        self._log_switches()
        self.loop.after(PING_PERIOD_MS, self._ping)

    def _schedule_eval(self, n, m) -> None:
        self.loop.after(float(self.route_rng.uniform(500.0, 1500.0)), self._evaluate, n, m)

    def _evaluate(self, n, m) -> None:
        if n not in self.present or m not in self.present:
            return
        ov = self.overlay
        ov.clock_ms = self.loop.now
        prop = ov.evaluate_switch(n, m)
        if prop is not None:
            ov.apply_switch(prop)
            self._log_switches()
        self._schedule_eval(n, m)

    def _log_switches(self) -> None:
        if self.overlay is None:
            return
        recs = self.overlay.switch_log
        for r in recs[self._switch_seen:]:
            self.log.add("switches", r.time_ms, r.flow, r.node, r.old_parent, r.new_parent,
                         r.old_rate, r.new_rate, r.reason)
        self._switch_seen = len(recs)

    # -- scripted events -------------------------------------------------------

    def _event(self, ev) -> None:
        a = ev.args
        now = self.loop.now
        if ev.kind == "jitter":
            until = float(a.get("until_s", math.inf)) * 1000.0
            self.spikes[(str(a["from"]), str(a["to"]))] = (float(a["max_ms"]), until)
        elif ev.kind == "join":
            self._join(int(a["id"]))
        elif ev.kind == "leave":
            self._leave(int(a["id"]))
        elif ev.kind == "capacity":
            i, j = int(a["from"]), int(a["to"])
            if self.overlay is not None and i in self.present and j in self.present:
                self.overlay.clock_ms = now
                self.overlay.set_capacity(i, j, float(a["capacity_kbps"]))
                self.overlay.repair_all()
                self._log_switches()

    def _join(self, s) -> None:
        if s in self.present:
            return
        old = sorted(self.present)
        self.present.add(s)
        p = self.sc.participants
        if self.overlay is not None:
            self.overlay.clock_ms = self.loop.now
            topo = self._topology(self.present)
            links = {e: l for e, l in topo.links.items() if s in e}
            bounds = {}
            for x in old:
                bounds[(x, s)] = self._script_L(x, s)
                bounds[(s, x)] = self._script_L(s, x)
            self.overlay.add_member(s, topo.last_mile[s], links, bounds)
            for m in old:
                self._schedule_eval(s, m)
                self._schedule_eval(m, s)
        else:
            self.topo = self._topology(self.present)
            self.trees = {m: self._star(m) for m in sorted(self.present)}
        for m in old:
            self._add_pair(m, s)
        self.session.add(s, f"{p[s].region}/{s}", via=self.sc.initiator if self.sc.initiator in self.present else old[0])
        self._start_source(s)
        self.log.add("membership", self.loop.now, "join", s, self.session.views[s].epoch)

    def _leave(self, s) -> None:
        if s not in self.present:
            return
        self.present.discard(s)
        for key in [k for k in self.pairs if s in k]:
            self.finished_pairs.append(self.pairs.pop(key))
        if self.overlay is not None:
            self.overlay.clock_ms = self.loop.now
            self.overlay.remove_member(s)
            self._log_switches()
        else:
            self.topo = self._topology(self.present)
            self.trees = {m: self._star(m) for m in sorted(self.present)}
        self.session.kill(s)
        self.log.add("membership", self.loop.now, "leave", s, -1)

    # -- wrap-up ---------------------------------------------------------------

    def _finish(self) -> None:
        for pair in sorted(list(self.pairs.values()) + self.finished_pairs, key=lambda q: (q.flow, q.receiver)):
            self._flush(pair, self.duration)
            c = pair.buffer.counters
            settled = c.frames_emitted + c.frames_lost + c.frames_dropped
            in_flight = pair.generated - settled
            if in_flight != pair.pending_releases and (pair.flow, pair.receiver) in self.pairs:
                raise SimulationError(f"frame accounting broken for {pair.flow}->{pair.receiver}: "
                                      f"{in_flight} unsettled vs {pair.pending_releases} pending")
            self.log.add("frames", pair.flow, pair.receiver, pair.generated, c.frames_emitted,
                         c.frames_lost, c.frames_dropped, in_flight, c.late)
        self.log.rows["latency"].sort(key=lambda r: (r[0], r[1], r[2]))
        self.log.rows["timeouts"].sort(key=lambda r: (r[0], r[1], r[2]))


def scenario_instance(scenario: Scenario, members=None) -> Tuple[TopologySnapshot, Dict[Tuple[int, int], float]]:
    """Static topology and script-derived delay bounds for the given members
    (default: those present at the start)."""
    sim = Simulation.__new__(Simulation)
    sim.sc = scenario
    members = tuple(scenario.initial if members is None else members)
    topo = sim._topology(members)
    bounds = {(m, n): sim._script_L(m, n) for m in members for n in members if m != n}
    return topo, bounds


def run(scenario: Scenario, seed: Optional[int] = None, duration_ms: Optional[float] = None,
        mode: str = "overlay") -> MetricsLog:
    return Simulation(scenario, seed, mode, duration_ms).run()


@dataclass
class Comparison:
    overlay: MetricsLog
    unicast: MetricsLog
    overlay_latency_var: float
    unicast_latency_var: float
    overlay_timeouts: int
    unicast_timeouts: int


def mean_pair_variance(log: MetricsLog) -> float:
    """Average over (flow, receiver) of the variance of per-frame latency."""
    series: Dict[Tuple[int, int], List[float]] = {}
    for t, m, n, lat in log.rows["latency"]:
        series.setdefault((m, n), []).append(lat)
    if not series:
        return 0.0
    return float(np.mean([np.var(v) for _, v in sorted(series.items())]))


def compare_unicast(scenario: Scenario, seed: Optional[int] = None,
                    duration_ms: Optional[float] = None) -> Comparison:
    """Same traffic over the overlay and over direct WAN paths."""
    if len(scenario.participants) > 3:
        raise ScenarioError("unicast comparison is limited to three participants")
    ov = run(scenario, seed, duration_ms, "overlay")
    uc = run(scenario, seed, duration_ms, "unicast")
    return Comparison(ov, uc, mean_pair_variance(ov), mean_pair_variance(uc),
                      len(ov.rows["timeouts"]), len(uc.rows["timeouts"]))

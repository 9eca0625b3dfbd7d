"""Session membership: roster, heartbeats, clock calibration against the
initiator, and initiator failover.

``SessionState`` and its functions are the initiator-side bookkeeping.
``SessionProtocol`` runs the same rules as message-passing actors on an
event loop, each member holding only its own view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Set, Tuple

from .sim.engine import EventLoop


@dataclass
class SessionConfig:
    heartbeat_period_ms: float = 1000.0
    missed_limit: int = 3
    roster_period_ms: float = 5000.0
    offset_weight: float = 0.125

    @property
    def timeout_ms(self) -> float:
        return self.heartbeat_period_ms * self.missed_limit


@dataclass
class Member:
    address: str
    last_heartbeat: float


@dataclass(frozen=True)
class RosterEvent:
    kind: str  # "join", "leave", "expire", "failover", "closed"
    surrogate: Optional[int]
    epoch: int
    members: Tuple[int, ...]


@dataclass
class SessionState:
    initiator: Optional[int] = None
    roster: Dict[int, Member] = field(default_factory=dict)
    epoch: int = 0
    clock_offset: Dict[int, float] = field(default_factory=dict)
    config: SessionConfig = field(default_factory=SessionConfig)
    closed: bool = False

    def members(self) -> Tuple[int, ...]:
        return tuple(sorted(self.roster))

    def _event(self, kind, s) -> RosterEvent:
        return RosterEvent(kind, s, self.epoch, self.members())


def join(state: SessionState, surrogate: int, address: str, now: float) -> Optional[RosterEvent]:
    """Add a member; repeated joins are no-ops. The first member hosts."""
    if state.closed:
        raise RuntimeError("session is closed")
    if surrogate in state.roster:
        return None
    state.roster[surrogate] = Member(address, now)
    state.clock_offset.setdefault(surrogate, 0.0)
    if state.initiator is None:
        state.initiator = surrogate
    return state._event("join", surrogate)


def join_many(state: SessionState, joiners: Mapping[int, str], now: float) -> List[RosterEvent]:
    """Same-tick joins are processed in id order."""
    out = []
    for s in sorted(joiners):
        ev = join(state, s, joiners[s], now)
        if ev is not None:
            out.append(ev)
    return out


def record_heartbeat(state: SessionState, surrogate: int, now: float) -> bool:
    m = state.roster.get(surrogate)
    if m is None:
        return False
    m.last_heartbeat = max(m.last_heartbeat, now)
    return True


def leave(state: SessionState, surrogate: int) -> List[RosterEvent]:
    if surrogate not in state.roster:
        return []
    del state.roster[surrogate]
    state.clock_offset.pop(surrogate, None)
    events = [state._event("leave", surrogate)]
    if surrogate == state.initiator:
        events.extend(_handover(state))
    return events


@dataclass
class TickResult:
    acks: List[int]
    expired: List[int]
    events: List[RosterEvent]


def heartbeat_tick(state: SessionState, now: float) -> TickResult:
    """Expire members silent for longer than the timeout (initiator
    included, which triggers a failover)."""
    limit = state.config.timeout_ms
    expired = sorted(s for s, m in state.roster.items() if now - m.last_heartbeat > limit)
    events = []
    lost_host = False
    for s in expired:
        del state.roster[s]
        state.clock_offset.pop(s, None)
        events.append(state._event("expire", s))
        lost_host |= s == state.initiator
    if lost_host:
        events.extend(_handover(state))
    acks = sorted(s for s, m in state.roster.items() if m.last_heartbeat == now)
    return TickResult(acks, expired, events)


def failover(state: SessionState) -> Optional[int]:
    """Lowest surviving id becomes initiator under a new epoch."""
    state.roster.pop(state.initiator, None)
    _handover(state)
    return state.initiator


def _handover(state: SessionState) -> List[RosterEvent]:
    if not state.roster:
        state.initiator = None
        state.closed = True
        return [state._event("closed", None)]
    state.initiator = min(state.roster)
    state.epoch += 1
    state.clock_offset = {s: 0.0 for s in state.roster}
    return [state._event("failover", state.initiator)]


def calibrate_clock(t1: float, t2: float, t3: float, t4: float) -> Optional[float]:
    """Initiator clock minus local clock from one request/ack exchange;
    None when the exchange is inconsistent."""
    if t4 < t1 or t3 < t2:
        return None
    return ((t2 - t1) + (t3 - t4)) / 2.0


class ClockSync:
    """EWMA-smoothed offset to the initiator's clock."""

    def __init__(self, weight: float = 0.125):
        self.weight = weight
        self.offset: Optional[float] = None

    def update(self, t1, t2, t3, t4) -> Optional[float]:
        o = calibrate_clock(t1, t2, t3, t4)
        if o is None:
            return self.offset
        self.offset = o if self.offset is None else self.offset + self.weight * (o - self.offset)
        return self.offset

    def reset(self) -> None:
        self.offset = None

    def to_initiator(self, local_ms: float) -> float:
        return local_ms + (self.offset or 0.0)


class Gateway:
    """Registry handing out pooled surrogates by region label."""

    def __init__(self, pools: Mapping[str, List[int]]):
        self.free = {r: sorted(ids) for r, ids in pools.items()}
        self.region_of = {s: r for r, ids in pools.items() for s in ids}
        self.assigned: Dict[int, str] = {}
        self.sessions_opened = 0

    def assign(self, user: str, region: str) -> int:
        pool = self.free.get(region)
        if not pool:
            raise LookupError(f"no free surrogate in region {region!r}")
        s = pool.pop(0)
        self.assigned[s] = user
        return s

    def release(self, surrogate: int) -> None:
        if self.assigned.pop(surrogate, None) is not None:
            self.free[self.region_of[surrogate]].append(surrogate)
            self.free[self.region_of[surrogate]].sort()


# ---------------------------------------------------------------------------
# Message-passing protocol


@dataclass
class MemberView:
    me: int
    initiator: int
    epoch: int
    roster: Tuple[int, ...]
    last_ack: float
    clock: ClockSync
    host: Optional[SessionState] = None


class SessionProtocol:
    """Heartbeat/roster actors on a shared event loop.

    ``latency(i, j)`` gives one-way message delay; ``skew[i]`` is the offset
    of i's local clock from true time.
    """

    def __init__(self, loop: EventLoop, members: Mapping[int, str], latency: Callable[[int, int], float],
                 initiator: Optional[int] = None, config: Optional[SessionConfig] = None,
                 skew: Optional[Mapping[int, float]] = None):
        self.loop = loop
        self.cfg = config or SessionConfig()
        self.latency = latency
        self.skew = dict(skew or {})
        self.addresses = dict(members)
        self.alive: Set[int] = set(members)
        init = min(members) if initiator is None else initiator
        roster = tuple(sorted(members))
        self.views: Dict[int, MemberView] = {}
        for s in roster:
            self.views[s] = MemberView(s, init, 0, roster, loop.now, ClockSync(self.cfg.offset_weight))
        host = SessionState(config=self.cfg)
        join_many(host, {init: members[init]}, loop.now)
        join_many(host, members, loop.now)
        self.views[init].host = host
        self.log: List[Tuple[float, str, int]] = []
        self.detections: List[Tuple[float, int, int]] = []

    def local(self, s: int) -> float:
        return self.loop.now + self.skew.get(s, 0.0)

    def start(self) -> None:
        p = self.cfg.heartbeat_period_ms
        n = len(self.views)
        for k, s in enumerate(sorted(self.views)):
            self.loop.after(p * (k + 1) / (n + 1), self._heartbeat, s)
        self.loop.after(self.cfg.roster_period_ms, self._roster_timer)

    def kill(self, s: int) -> None:
        self.alive.discard(s)
        self.log.append((self.loop.now, "kill", s))

    def add(self, s: int, address: str, via: Optional[int] = None) -> None:
        """A new member contacts the current initiator (as seen by ``via``)."""
        view_src = self.views[via if via is not None else min(self.alive)]
        init = view_src.initiator
        self.addresses[s] = address
        self.alive.add(s)
        self.views[s] = MemberView(s, init, view_src.epoch, view_src.roster + (s,), self.loop.now,
                                   ClockSync(self.cfg.offset_weight))
        self._send(s, init, self._on_join, s, address)
        self.loop.after(self.cfg.heartbeat_period_ms / 2, self._heartbeat, s)

    # -- messaging

    def _send(self, src: int, dst: int, handler, *args) -> None:
        self.loop.after(self.latency(src, dst), self._deliver, dst, handler, args)

    def _deliver(self, dst, handler, args) -> None:
        if dst in self.alive:
            handler(dst, *args)

    def _heartbeat(self, s: int) -> None:
        if s not in self.alive:
            return
        v = self.views[s]
        if v.host is not None:
            record_heartbeat(v.host, s, self.loop.now)
            self._host_tick(s)
        else:
            if self.loop.now - v.last_ack > self.cfg.timeout_ms:
                self._suspect(s)
            self._send(s, v.initiator, self._on_heartbeat, s, self.local(s), v.epoch)
        self.loop.after(self.cfg.heartbeat_period_ms, self._heartbeat, s)

    def _on_heartbeat(self, host_id: int, s: int, t1: float, epoch: int) -> None:
        v = self.views[host_id]
        if v.host is None:
            return
        if s not in v.host.roster:
            # a live member the host dropped or never heard of: re-admit
            join(v.host, s, self.addresses[s], self.loop.now)
            self._broadcast(host_id)
        record_heartbeat(v.host, s, self.loop.now)
        t2 = self.local(host_id)
        self._send(host_id, s, self._on_ack, t1, t2, t2, v.host.epoch)

    def _on_ack(self, s: int, t1, t2, t3, epoch) -> None:
        v = self.views[s]
        v.last_ack = self.loop.now
        v.clock.update(t1, t2, t3, self.local(s))

    def _on_join(self, host_id: int, s: int, address: str) -> None:
        v = self.views[host_id]
        if v.host is not None and join(v.host, s, address, self.loop.now) is not None:
            self._broadcast(host_id)

    def _host_tick(self, host_id: int) -> None:
        res = heartbeat_tick(self.views[host_id].host, self.loop.now)
        if res.expired:
            self.log.append((self.loop.now, "expire", res.expired[0]))
            self._broadcast(host_id)

    def _roster_timer(self) -> None:
        for s in sorted(self.alive):
            if self.views[s].host is not None:
                self._broadcast(s)
        self.loop.after(self.cfg.roster_period_ms, self._roster_timer)

    def _broadcast(self, host_id: int) -> None:
        host = self.views[host_id].host
        self._adopt(host_id, host.epoch, host_id, host.members())
        for s in host.members():
            if s != host_id:
                self._send(host_id, s, self._on_roster, host.epoch, host_id, host.members())

    def _on_roster(self, s: int, epoch: int, initiator: int, members: Tuple[int, ...]) -> None:
        self._adopt(s, epoch, initiator, members)

    def _adopt(self, s, epoch, initiator, members) -> None:
        v = self.views[s]
        if epoch < v.epoch:
            return
        if initiator != v.initiator:
            v.clock.reset()
            if v.host is not None and initiator != s:
                v.host = None
        v.epoch, v.initiator, v.roster = epoch, initiator, tuple(members)
        v.last_ack = max(v.last_ack, self.loop.now) if initiator != s else v.last_ack

    def _suspect(self, s: int) -> None:
        """No ack for a full timeout: hand the session to the lowest
        surviving id in this member's roster."""
        v = self.views[s]
        old = v.initiator
        survivors = tuple(x for x in v.roster if x != old)
        succ = min(survivors)
        self.detections.append((self.loop.now, s, old))
        v.clock.reset()
        if succ == s:
            host = SessionState(config=self.cfg, epoch=v.epoch)
            host.roster = {x: Member(self.addresses[x], self.loop.now) for x in survivors}
            host.initiator = s
            host.epoch = v.epoch + 1
            host.clock_offset = {x: 0.0 for x in survivors}
            v.host = host
            self.log.append((self.loop.now, "failover", s))
            self._broadcast(s)
        else:
            v.initiator = succ
            v.roster = survivors
            v.last_ack = self.loop.now

    # -- inspection

    def converged(self) -> bool:
        views = [self.views[s] for s in sorted(self.alive)]
        first = views[0]
        return all((v.epoch, v.initiator, v.roster) == (first.epoch, first.initiator, first.roster) for v in views)

    def initiators(self) -> Set[int]:
        return {s for s in self.alive if self.views[s].host is not None}

"""Per-source dissemination trees: shortest-path construction, basic rate
allocation, and the self-evolving parent-switching heuristic driven by
gossiped Path Broadcast messages.

The :class:`Overlay` object holds the ground-truth state of all trees and
link allocations. Each surrogate's :class:`PeerTables` is only written by
the handlers acting on behalf of that surrogate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Set, Tuple

from .core import (
    EPS,
    DisseminationTree,
    Edge,
    LastMile,
    Link,
    RateLadder,
    RateSolution,
    SurrogateId,
    TopologySnapshot,
    TranscodeModel,
    is_acyclic,
    transcode_latency,
)

log = logging.getLogger(__name__)


class DisconnectedTopology(ValueError):
    def __init__(self, pairs):
        self.pairs = sorted(pairs)
        super().__init__(f"unreachable (source, receiver) pairs: {self.pairs}")


class InfeasibleSession(ValueError):
    def __init__(self, feasibility: "Feasibility"):
        self.feasibility = feasibility
        super().__init__(f"no feasible solution: {feasibility.witnesses}")


class StaleProposal(RuntimeError):
    pass


class InvariantViolation(AssertionError):
    pass


# ---------------------------------------------------------------------------
# Bootstrap: shortest-path trees, feasibility, basic rates


def build_shortest_path_trees(topo: TopologySnapshot,
                              sources: Optional[Iterable[SurrogateId]] = None) -> Dict[SurrogateId, DisseminationTree]:
    """Synchronous distance-vector Bellman-Ford from every source.

    Equal-latency paths are broken by fewer hops, then lowest parent id; the
    hop count tie-break keeps zero-latency links from forming parent cycles.
    """
    nodes = topo.surrogates
    trees = {}
    unreachable = []
    for m in (sorted(sources) if sources is not None else nodes):
        best: Dict[SurrogateId, Tuple[float, int, SurrogateId]] = {m: (0.0, 0, m)}
        for _ in range(len(nodes) - 1):
            prev = dict(best)
            changed = False
            for n in nodes:
                if n == m:
                    continue
                cur = prev.get(n)
                for p in topo.in_neighbors(n):
                    if p not in prev:
                        continue
                    cand = (prev[p][0] + topo.latency(p, n), prev[p][1] + 1, p)
                    if cur is None or _better(cand, cur):
                        cur = cand
                if cur is not None and cur != best.get(n):
                    best[n] = cur
                    changed = True
            if not changed:
                break
        unreachable.extend((m, n) for n in nodes if n not in best)
        tree = DisseminationTree(m)
        for n, (dist, _, p) in best.items():
            tree.path_delay[n] = dist
            if n != m:
                tree.parent[n] = p
        trees[m] = tree
    if unreachable:
        raise DisconnectedTopology(unreachable)
    return trees


def _better(a, b) -> bool:
    if a[0] < b[0] - EPS:
        return True
    if a[0] > b[0] + EPS:
        return False
    return (a[1], a[2]) < (b[1], b[2])


@dataclass
class Feasibility:
    ok: bool
    witnesses: List[Tuple[SurrogateId, SurrogateId, float, float]] = field(default_factory=list)

    @property
    def witness(self) -> Optional[Tuple[SurrogateId, SurrogateId]]:
        return self.witnesses[0][:2] if self.witnesses else None

    @property
    def minimal_bound(self) -> Optional[float]:
        """Smallest bound that would make the first witness feasible."""
        return self.witnesses[0][2] if self.witnesses else None

    def __bool__(self):
        return self.ok


def check_feasibility(trees: Mapping[SurrogateId, DisseminationTree],
                      bounds: Mapping[Edge, float]) -> Feasibility:
    """Compare pure link latency of each tree path against its bound."""
    witnesses = []
    for m, tree in sorted(trees.items()):
        for n in sorted(tree.parent):
            omega = tree.path_delay[n]
            bound = bounds.get((m, n), math.inf)
            if omega > bound + EPS:
                witnesses.append((m, n, omega, bound))
    return Feasibility(not witnesses, witnesses)


def allocate_basic_rates(topo: TopologySnapshot, trees: Mapping[SurrogateId, DisseminationTree],
                         ladder: RateLadder) -> RateSolution:
    """One uniform rate per tree: link capacity split evenly among the trees
    crossing it, capped by every receiver's device limit and the source rate."""
    count: Dict[Edge, int] = {}
    for tree in trees.values():
        for e in tree.edges():
            count[e] = count.get(e, 0) + 1
    out = {}
    starved = []
    for m, tree in sorted(trees.items()):
        caps = [topo.source_rate(m)] + [topo.accept(m, k) for k in tree.parent]
        shares = [topo.capacity(i, j) / count[(i, j)] for i, j in tree.edges()]
        rate = ladder.floor(min(caps + shares))
        if rate == 0:
            starved.append(m)
            log.info("flow %s starved: basic rate below the ladder minimum", m)
        t = tree.copy()
        t.edge_rate = {e: rate for e in tree.edges()}
        out[m] = t
    return RateSolution.from_trees(topo, out, starved)


# ---------------------------------------------------------------------------
# Gossip tables


@dataclass
class CandidateEntry:
    via: SurrogateId
    offered_rate: int
    offered_max_rate: float
    latency: float


@dataclass
class PeerTables:
    owner: SurrogateId
    custab: Dict[SurrogateId, Dict[SurrogateId, CandidateEntry]] = field(default_factory=dict)
    dstab: Dict[SurrogateId, Set[SurrogateId]] = field(default_factory=dict)
    alpha: Dict[SurrogateId, float] = field(default_factory=dict)
    beta: Dict[SurrogateId, float] = field(default_factory=dict)


@dataclass(frozen=True)
class PathBroadcast:
    flow_id: SurrogateId
    rate: int
    max_rate: float
    latency: float
    vm_config: str = ""

    def __post_init__(self):
        if self.rate > self.max_rate + EPS:
            raise ValueError("advertised rate exceeds advertised max rate")


@dataclass(frozen=True)
class Admission:
    admitted: bool
    reason: str = ""
    estimate_ms: float = math.nan

    def __bool__(self):
        return self.admitted


def recompute_alpha(tables: Mapping[SurrogateId, PeerTables], topo: TopologySnapshot,
                    tree: DisseminationTree, i: SurrogateId, headroom: Optional[float] = None) -> float:
    """Requested rate of ``i`` for ``tree.flow``.

    ``headroom`` is the bandwidth on the upstream link (i', i) that this flow
    may use. The source has no upstream and requests what it can send.
    """
    m = tree.flow
    kids = tables[i].dstab.get(m, ())
    want = [tables[j].alpha[m] for j in kids]
    if i == m:
        value = float(topo.source_rate(m))
        if want:
            value = min(value, max(want))
    else:
        if i not in tree.parent:
            raise ValueError(f"surrogate {i} has no upstream for flow {m}")
        if headroom is None:
            raise ValueError("headroom on the upstream link is required")
        value = min(max([topo.accept(m, i)] + want), headroom)
    tables[i].alpha[m] = value
    return value


def recompute_beta(tables: Mapping[SurrogateId, PeerTables], topo: TopologySnapshot, model: TranscodeModel,
                   tree: DisseminationTree, i: SurrogateId, bounds: Mapping[Edge, float]) -> float:
    """Largest path latency ``i`` may accept without breaking its own bound
    or that of any surrogate downstream of it."""
    m = tree.flow
    value = bounds.get((m, i), math.inf) if i != m else math.inf
    kids = tables[i].dstab.get(m, ())
    if kids:
        c_in = tree.rate_into(i) if i != m else None
        for j in sorted(kids):
            phi = transcode_latency(model, i, c_in, tree.edge_rate[(i, j)]) if c_in is not None else 0.0
            value = min(value, tables[j].beta[m] - topo.latency(i, j) - phi)
    tables[i].beta[m] = value
    return value


def admit_path_broadcast(tables: PeerTables, msg: PathBroadcast, sender: SurrogateId,
                         topo: TopologySnapshot, model: TranscodeModel) -> Admission:
    """Record ``sender`` as a candidate upstream if the estimated latency via
    it fits within the receiver's maximal-delay budget."""
    i = tables.owner
    m = msg.flow_id
    if m == i:
        return Admission(False, "own flow")
    if sender == i:
        return Admission(False, "message from self")
    phi = 0.0
    if sender != m:
        phi = transcode_latency(model, sender, msg.max_rate, tables.alpha.get(m, 0.0))
    estimate = msg.latency + topo.latency(sender, i) + phi
    beta = tables.beta.get(m, math.inf)
    entries = tables.custab.setdefault(m, {})
    if estimate <= beta + EPS:
        entries[sender] = CandidateEntry(sender, msg.rate, msg.max_rate, msg.latency)
        return Admission(True, "", estimate)
    entries.pop(sender, None)
    return Admission(False, f"estimate {estimate:.3f} ms exceeds maximal delay {beta:.3f} ms", estimate)


# ---------------------------------------------------------------------------
# Switching


@dataclass
class SwitchProposal:
    flow: SurrogateId
    node: SurrogateId
    old_parent: SurrogateId
    new_parent: SurrogateId
    old_rate: int
    new_rate: int
    version: int
    reason: str = "rate"
    from_custab: bool = True
    rates: Dict[Edge, int] = field(default_factory=dict)
    omega: Dict[SurrogateId, float] = field(default_factory=dict)
    e2e: Dict[SurrogateId, float] = field(default_factory=dict)


@dataclass
class SwitchRecord:
    time_ms: float
    flow: SurrogateId
    node: SurrogateId
    old_parent: SurrogateId
    new_parent: SurrogateId
    old_rate: int
    new_rate: int
    reason: str


@dataclass
class _Plan:
    rates: Dict[Edge, int]
    omega: Dict[SurrogateId, float]
    e2e: Dict[SurrogateId, float]
    ok: bool


class Overlay:
    """Routing state of one session: trees, allocations and gossip tables."""

    def __init__(self, topo: TopologySnapshot, model: TranscodeModel, ladder: RateLadder,
                 bounds: Mapping[Edge, float], trees: Mapping[SurrogateId, DisseminationTree], *,
                 check_invariants: bool = False, vm_config: Optional[Mapping[SurrogateId, str]] = None,
                 bandwidth_noise: float = 0.0, rng=None):
        self.topo = topo
        self.model = model
        self.ladder = ladder
        self.bounds: Dict[Edge, float] = dict(bounds)
        self.trees: Dict[SurrogateId, DisseminationTree] = {m: t.copy() for m, t in trees.items()}
        self.check = check_invariants
        self.vm_config = dict(vm_config or {})
        self.bandwidth_noise = bandwidth_noise
        self.rng = rng
        if bandwidth_noise and rng is None:
            raise ValueError("bandwidth noise needs an rng")
        self.version = {m: 0 for m in self.trees}
        self.tables = {i: PeerTables(i) for i in topo.surrogates}
        self.alloc: Dict[Edge, float] = {}
        self.switch_log: List[SwitchRecord] = []
        self.clock_ms = 0.0
        self.estimate_checks = 0
        self.estimate_premise_unmet = 0
        self.estimate_failures = 0
        self.unsatisfiable: Set[Tuple[SurrogateId, SurrogateId]] = set()
        for tree in self.trees.values():
            for e, r in tree.edge_rate.items():
                self.alloc[e] = self.alloc.get(e, 0) + r
        for m in self.trees:
            self._refresh_delays(m, m)
        self.refresh_all_tables()

    @classmethod
    def bootstrap(cls, topo: TopologySnapshot, model: TranscodeModel, ladder: RateLadder,
                  bounds: Mapping[Edge, float], **kw) -> "Overlay":
        """Shortest-path trees, feasibility check and basic rates, then one
        gossip round so every surrogate knows its candidates."""
        trees = build_shortest_path_trees(topo)
        feas = check_feasibility(trees, bounds)
        if not feas:
            raise InfeasibleSession(feas)
        sol = allocate_basic_rates(topo, trees, ladder)
        ov = cls(topo, model, ladder, bounds, sol.trees, **kw)
        ov.starved = set(sol.starved)
        ov.gossip()
        return ov

    starved: Set[SurrogateId] = set()

    # -- bookkeeping helpers ------------------------------------------------

    @property
    def members(self) -> Tuple[SurrogateId, ...]:
        return self.topo.surrogates

    def residual(self, i: SurrogateId, j: SurrogateId) -> float:
        return self.topo.capacity(i, j) - self.alloc.get((i, j), 0)

    def headroom(self, i: SurrogateId, j: SurrogateId, m: SurrogateId) -> float:
        """Bandwidth on (i, j) usable by flow ``m`` (its own share included)."""
        return self.residual(i, j) + self.trees[m].edge_rate.get((i, j), 0)

    def _measured_residual(self, i, j) -> float:
        r = self.residual(i, j)
        if self.bandwidth_noise:
            r *= max(0.0, 1.0 - abs(self.rng.normal(0.0, self.bandwidth_noise)))
        return r

    def incoming(self, m: SurrogateId, k: SurrogateId) -> int:
        return self.topo.source_rate(m) if k == m else self.trees[m].rate_into(k)

    def demand(self, m: SurrogateId, n: SurrogateId) -> float:
        """Rate ``n`` wants for flow ``m``: its own device cap or what its
        downstream surrogates request, whichever is larger."""
        kids = self.trees[m].children(n)
        return max([self.topo.accept(m, n)] + [self.tables[j].alpha[m] for j in kids])

    def phi(self, j, r1, r2) -> float:
        return transcode_latency(self.model, j, r1, r2)

    def e2e(self, m: SurrogateId, n: SurrogateId) -> float:
        tree = self.trees[m]
        return tree.path_delay[n] + self.phi(n, tree.rate_into(n), self.topo.accept(m, n))

    def bound(self, m, n) -> float:
        return self.bounds.get((m, n), math.inf)

    def solution(self) -> RateSolution:
        return RateSolution.from_trees(self.topo, self.trees)

    def _refresh_delays(self, m: SurrogateId, start: SurrogateId) -> None:
        tree = self.trees[m]
        order = tree.subtree(start)
        if start == m:
            tree.path_delay[m] = 0.0
        for q in order:
            if q == m:
                continue
            p = tree.parent[q]
            hop = self.topo.latency(p, q)
            if p != m:
                hop += self.phi(p, tree.rate_into(p), tree.edge_rate[(p, q)])
            tree.path_delay[q] = tree.path_delay[p] + hop

    # -- tables ---------------------------------------------------------------

    def refresh_flow_tables(self, m: SurrogateId) -> None:
        tree = self.trees[m]
        order = tree.subtree(m)
        for i in order:
            self.tables[i].dstab[m] = set(tree.children(i))
        for i in reversed(order):
            hr = self.headroom(tree.parent[i], i, m) if i != m else None
            recompute_alpha(self.tables, self.topo, tree, i, hr)
            recompute_beta(self.tables, self.topo, self.model, tree, i, self.bounds)

    def refresh_all_tables(self) -> None:
        for m in sorted(self.trees):
            self.refresh_flow_tables(m)

    def _refresh_alpha_upwards(self, m: SurrogateId, start: SurrogateId) -> None:
        tree = self.trees[m]
        node = start
        while node != m:
            recompute_alpha(self.tables, self.topo, tree, node, self.headroom(tree.parent[node], node, m))
            node = tree.parent[node]
        recompute_alpha(self.tables, self.topo, tree, m)

    def _links_changed(self, links: Iterable[Edge], skip_flow: Optional[SurrogateId] = None) -> None:
        """Allocation moved on ``links``: requested rates of other flows whose
        tree crosses those links depend on the headroom there."""
        links = set(links)
        for m2, tree in sorted(self.trees.items()):
            if m2 == skip_flow:
                continue
            for (i, j) in sorted(links):
                if tree.parent.get(j) == i:
                    self._refresh_alpha_upwards(m2, j)

    def tables_snapshot(self):
        return {i: (dict(t.alpha), dict(t.beta), {m: set(s) for m, s in t.dstab.items()})
                for i, t in sorted(self.tables.items())}

    # -- gossip ---------------------------------------------------------------

    def path_broadcast(self, i: SurrogateId, m: SurrogateId) -> PathBroadcast:
        rate = self.incoming(m, i)
        alpha = self.tables[i].alpha[m]
        return PathBroadcast(m, rate, max(alpha, rate), self.trees[m].path_delay[i], self.vm_config.get(i, ""))

    def gossip(self, senders: Optional[Iterable[SurrogateId]] = None) -> int:
        """Every sender advertises every flow it carries to its neighbours."""
        admitted = 0
        for i in sorted(senders) if senders is not None else self.members:
            for m in sorted(self.trees):
                msg = self.path_broadcast(i, m)
                for n in self.topo.out_neighbors(i):
                    if n == m:
                        continue
                    admitted += bool(admit_path_broadcast(self.tables[n], msg, i, self.topo, self.model))
        return admitted

    # -- planning -------------------------------------------------------------

    def _plan_move(self, m: SurrogateId, n: SurrogateId, k: SurrogateId, rate: int, keep_rates: bool) -> _Plan:
        """Re-derive rates and latencies of n's subtree if n hangs under k at
        ``rate``. With ``keep_rates`` descendant rates never drop."""
        tree = self.trees[m]
        sub = tree.subtree(n)
        rates = {(k, n): rate}
        into = {n: rate}
        omega = {n: tree.path_delay[k] + self.topo.latency(k, n)
                 + (self.phi(k, self.incoming(m, k), rate) if k != m else 0.0)}
        for q in sub[1:]:
            p = tree.parent[q]
            old = tree.edge_rate[(p, q)]
            derived = self.ladder.floor(min(into[p], self.headroom(p, q, m), self.demand(m, q)))
            c = min(max(old, derived), into[p]) if keep_rates else derived
            rates[(p, q)] = c
            into[q] = c
            omega[q] = omega[p] + self.topo.latency(p, q) + self.phi(p, into[p], c)
        e2e = {q: omega[q] + self.phi(q, into[q], self.topo.accept(m, q)) for q in sub}
        ok = all(e2e[q] <= self.bound(m, q) + EPS for q in sub)
        return _Plan(rates, omega, e2e, ok)

    def evaluate_switch(self, n: SurrogateId, m: SurrogateId) -> Optional[SwitchProposal]:
        """Look for a parent that would deliver flow ``m`` to ``n`` at a strictly
        higher rate without breaking any bound in n's subtree."""
        tree = self.trees.get(m)
        if tree is None or n == m or n not in tree.parent:
            return None
        j = tree.parent[n]
        cur = tree.rate_into(n)
        want = self.demand(m, n)
        if cur >= want:
            return None
        custab = self.tables[n].custab.get(m, {})
        options = []
        for k in sorted(set(custab) | {j}):
            if k == n or not self.topo.has_link(k, n) or (k != m and k not in tree.parent):
                continue
            avail = self.headroom(k, n, m) if k == j else self._measured_residual(k, n)
            offered = self.ladder.floor(min(self.incoming(m, k), avail, want))
            if offered > cur:
                options.append((-offered, k, offered))
        for _, k, offered in sorted(options):
            plan = self._plan_move(m, n, k, offered, keep_rates=True)
            if plan.ok:
                return SwitchProposal(m, n, j, k, cur, offered, self.version[m], "rate", k in custab,
                                      plan.rates, plan.omega, plan.e2e)
        return None

    def _repair_option(self, m: SurrogateId, n: SurrogateId, wide: bool) -> Optional[SwitchProposal]:
        tree = self.trees[m]
        j = tree.parent[n]
        sub = set(tree.subtree(n))
        pool = set(self.tables[n].custab.get(m, {})) | {j}
        if wide:
            pool |= set(self.topo.in_neighbors(n))
        best = None
        for k in sorted(pool):
            if k in sub or not self.topo.has_link(k, n) or (k != m and k not in tree.parent):
                continue
            avail = self.headroom(k, n, m) if k == j else self.residual(k, n)
            top = self.ladder.floor(min(self.incoming(m, k), avail, self.demand(m, n)))
            for rate in sorted((r for r in self.ladder if r <= top), reverse=True):
                plan = self._plan_move(m, n, k, rate, keep_rates=False)
                if plan.ok:
                    key = (-rate, plan.e2e[n], k)
                    if best is None or key < best[0]:
                        best = (key, SwitchProposal(m, n, j, k, tree.rate_into(n), rate, self.version[m],
                                                    "bound", k in self.tables[n].custab.get(m, {}),
                                                    plan.rates, plan.omega, plan.e2e))
                    break
        return best[1] if best else None

    def violations(self, m: Optional[SurrogateId] = None) -> List[Tuple[SurrogateId, SurrogateId, float, float]]:
        out = []
        for f in ([m] if m is not None else sorted(self.trees)):
            for n in sorted(self.trees[f].parent):
                d = self.e2e(f, n)
                if d > self.bound(f, n) + EPS:
                    out.append((f, n, d, self.bound(f, n)))
        return out

    def repair(self, m: SurrogateId) -> List[SwitchRecord]:
        """Move surrogates whose latency bound is broken (e.g. after the
        bound was tightened or a link slowed down) to a parent that meets it,
        accepting a lower rate if necessary."""
        applied = []
        tried: Set[SurrogateId] = set()
        tree = self.trees[m]
        for _ in range(2 * len(self.members)):
            bad = [n for (_, n, _, _) in self.violations(m) if n not in tried]
            if not bad:
                break
            n = min(bad, key=lambda x: (tree.depth(x), x))
            prop = self._repair_option(m, n, wide=False) or self._repair_option(m, n, wide=True)
            if prop is None:
                tried.add(n)
                if (m, n) not in self.unsatisfiable:
                    log.info("flow %s: no path meets the bound of %s", m, n)
                self.unsatisfiable.add((m, n))
                continue
            self.unsatisfiable.discard((m, n))
            applied.append(self.apply_switch(prop))
        return applied

    def repair_all(self) -> List[SwitchRecord]:
        out = []
        for m in sorted(self.trees):
            out.extend(self.repair(m))
        return out

    # -- mutation -------------------------------------------------------------

    def apply_switch(self, prop: SwitchProposal) -> SwitchRecord:
        m, n, j, k = prop.flow, prop.node, prop.old_parent, prop.new_parent
        tree = self.trees[m]
        if self.version[m] != prop.version or tree.parent.get(n) != j:
            raise StaleProposal(f"flow {m} changed since the proposal for {n} was made")
        node = k
        seen = set()
        while node != m:
            if node == n or node in seen:
                raise InvariantViolation(f"flow {m}: attaching {n} under {k} closes a cycle")
            seen.add(node)
            node = tree.parent[node]

        changed = {(j, n), (k, n)}
        old = tree.edge_rate.pop((j, n))
        self.alloc[(j, n)] = self.alloc.get((j, n), 0) - old
        tree.parent[n] = k
        for e, r in prop.rates.items():
            before = tree.edge_rate.get(e, 0)
            if e != (k, n) and before == r:
                continue
            tree.edge_rate[e] = r
            self.alloc[e] = self.alloc.get(e, 0) + r - before
            changed.add(e)
        for q, w in prop.omega.items():
            tree.path_delay[q] = w
        self.version[m] += 1

        self.refresh_flow_tables(m)
        self._links_changed(changed, skip_flow=m)
        self._check_estimate(m, k, n, prop.from_custab)
        if self.check:
            self._check_switch(m, n)
        rec = SwitchRecord(self.clock_ms, m, n, j, k, prop.old_rate, prop.new_rate, prop.reason)
        self.switch_log.append(rec)
        return rec

    def _check_estimate(self, m, k, n, from_custab) -> None:
        """Admission estimate via alphas must dominate the realised transcode
        delay at k whenever the requested-rate premises hold."""
        if not from_custab or k == m:
            return
        tree = self.trees[m]
        a_k, a_n = self.tables[k].alpha[m], self.tables[n].alpha[m]
        c_in, c_out = tree.rate_into(k), tree.edge_rate[(k, n)]
        premise = c_in <= a_k + EPS and c_out <= a_n + EPS and a_k >= a_n - EPS and (a_k > a_n + EPS or c_in == c_out)
        if not premise:
            self.estimate_premise_unmet += 1
            return
        self.estimate_checks += 1
        if self.phi(k, a_k, a_n) < self.phi(k, c_in, c_out) - EPS:
            self.estimate_failures += 1

    def _check_switch(self, m: SurrogateId, n: SurrogateId) -> None:
        tree = self.trees[m]
        if not is_acyclic(tree):
            raise InvariantViolation(f"flow {m}: cycle after switching {n}")
        for q in tree.subtree(n):
            if self.e2e(m, q) > self.bound(m, q) + EPS:
                raise InvariantViolation(f"flow {m}: bound of {q} broken after switching {n}")
        self.check_structure()

    def check_structure(self) -> None:
        """Acyclic trees, non-increasing rates, allocations within capacity."""
        usage: Dict[Edge, float] = {}
        for m, tree in self.trees.items():
            if not is_acyclic(tree):
                raise InvariantViolation(f"flow {m}: parent map has a cycle")
            for (i, j), r in tree.edge_rate.items():
                usage[(i, j)] = usage.get((i, j), 0) + r
                upstream = self.incoming(m, i)
                if r > upstream:
                    raise InvariantViolation(f"flow {m}: rate rises on ({i},{j})")
        for e, used in usage.items():
            if used > self.topo.capacity(*e) + EPS:
                raise InvariantViolation(f"link {e} over capacity")
            if abs(used - self.alloc.get(e, 0)) > EPS:
                raise InvariantViolation(f"allocation bookkeeping drifted on {e}")

    # -- environment changes -------------------------------------------------

    def set_bound(self, m: SurrogateId, n: SurrogateId, value: float) -> None:
        self.bounds[(m, n)] = value
        if m in self.trees:
            self.refresh_flow_tables(m)

    def set_link_latency(self, i: SurrogateId, j: SurrogateId, latency_ms: float) -> None:
        self.topo = self.topo.with_link(i, j, latency_ms=latency_ms)
        for m, tree in sorted(self.trees.items()):
            if tree.parent.get(j) == i:
                self._refresh_delays(m, j)
                self.refresh_flow_tables(m)

    def set_capacity(self, i: SurrogateId, j: SurrogateId, capacity_kbps: float) -> None:
        """Change a link's capacity; flows are throttled to an even share
        when the link becomes over-subscribed."""
        self.topo = self.topo.with_link(i, j, capacity_kbps=capacity_kbps)
        users = sorted(m for m, t in self.trees.items() if t.parent.get(j) == i)
        if self.alloc.get((i, j), 0) > capacity_kbps + EPS and users:
            share = self.ladder.floor(capacity_kbps / len(users))
            for m in users:
                tree = self.trees[m]
                if tree.edge_rate[(i, j)] > share:
                    self._set_rate(m, (i, j), share)
                    self._cap_subtree(m, j)
                    self.version[m] += 1
        for m in sorted(self.trees):
            self._refresh_delays(m, m)
        self.refresh_all_tables()

    def _set_rate(self, m, e, rate) -> None:
        tree = self.trees[m]
        self.alloc[e] = self.alloc.get(e, 0) + rate - tree.edge_rate.get(e, 0)
        tree.edge_rate[e] = rate

    def _cap_subtree(self, m, start) -> None:
        tree = self.trees[m]
        for q in tree.subtree(start)[1:]:
            p = tree.parent[q]
            if tree.edge_rate[(p, q)] > tree.rate_into(p):
                self._set_rate(m, (p, q), tree.rate_into(p))

    def add_member(self, n: SurrogateId, last_mile: LastMile, links: Mapping[Edge, Link],
                   bounds: Mapping[Edge, float]) -> None:
        """Attach a newcomer to every existing tree at its lowest-latency
        parent and give it a shortest-path tree of its own."""
        if n in self.topo.surrogates:
            return
        all_links = dict(self.topo.links)
        all_links.update(links)
        lm = dict(self.topo.last_mile)
        lm[n] = last_mile
        self.topo = TopologySnapshot(self.topo.surrogates + (n,), all_links, lm)
        self.bounds.update(bounds)
        self.tables[n] = PeerTables(n)
        for m in sorted(self.trees):
            tree = self.trees[m]
            opts = []
            for p in self.topo.in_neighbors(n):
                if p == n or (p != m and p not in tree.parent):
                    continue
                rate = self.ladder.floor(min(self.incoming(m, p), self.residual(p, n), self.topo.accept(m, n)))
                w = tree.path_delay[p] + self.topo.latency(p, n)
                if p != m:
                    w += self.phi(p, self.incoming(m, p), rate)
                e2e = w + self.phi(n, rate, self.topo.accept(m, n))
                opts.append((e2e > self.bound(m, n) + EPS, w, p, rate))
            if not opts:
                raise DisconnectedTopology([(m, n)])
            _, w, p, rate = min(opts)
            tree.parent[n] = p
            tree.edge_rate[(p, n)] = rate
            self.alloc[(p, n)] = self.alloc.get((p, n), 0) + rate
            tree.path_delay[n] = w
            self.version[m] += 1
        tree = build_shortest_path_trees(self.topo, [n])[n]
        caps = [self.topo.source_rate(n)] + [self.topo.accept(n, k) for k in tree.parent]
        rate = self.ladder.floor(min(caps + [self.residual(*e) for e in tree.edges()]))
        tree.edge_rate = {e: rate for e in tree.edges()}
        for e in tree.edges():
            self.alloc[e] = self.alloc.get(e, 0) + rate
        self.trees[n] = tree
        self.version[n] = 0
        self._refresh_delays(n, n)
        self.refresh_all_tables()

    def remove_member(self, n: SurrogateId) -> None:
        """Drop a departed surrogate: its own tree goes away and its orphans
        in other trees re-attach to the best remaining parent."""
        if n not in self.topo.surrogates:
            return
        gone = self.trees.pop(n, None)
        self.version.pop(n, None)
        if gone is not None:
            for e, r in gone.edge_rate.items():
                self.alloc[e] -= r
        for m in sorted(self.trees):
            tree = self.trees[m]
            p = tree.parent.pop(n)
            self.alloc[(p, n)] -= tree.edge_rate.pop((p, n))
            tree.path_delay.pop(n, None)
            for q in tree.children(n):
                self._reattach(m, q, exclude=n)
            self.version[m] += 1
        links = {e: l for e, l in self.topo.links.items() if n not in e}
        lm = {s: v for s, v in self.topo.last_mile.items() if s != n}
        self.topo = TopologySnapshot(tuple(s for s in self.topo.surrogates if s != n), links, lm)
        for e in [e for e in self.alloc if n in e]:
            del self.alloc[e]
        self.bounds = {k: v for k, v in self.bounds.items() if n not in k}
        self.tables.pop(n, None)
        for t in self.tables.values():
            t.custab.pop(n, None)
            for entries in t.custab.values():
                entries.pop(n, None)
            t.alpha.pop(n, None)
            t.beta.pop(n, None)
            t.dstab.pop(n, None)
        for m in sorted(self.trees):
            self._refresh_delays(m, m)
        self.refresh_all_tables()

    def _reattach(self, m, q, exclude) -> None:
        tree = self.trees[m]
        old = tree.edge_rate.pop((exclude, q))
        self.alloc[(exclude, q)] -= old
        sub = set(tree.subtree(q))
        opts = []
        for k in self.topo.in_neighbors(q):
            if k == exclude or k in sub or (k != m and k not in tree.parent):
                continue
            if k != m and self._reaches_excluded(tree, k, exclude):
                continue
            rate = self.ladder.floor(min(self.incoming(m, k), self.residual(k, q), old))
            w = tree.path_delay[k] + self.topo.latency(k, q)
            opts.append((-rate, w, k, rate))
        if not opts:
            raise DisconnectedTopology([(m, q)])
        _, _, k, rate = min(opts)
        tree.parent[q] = k
        tree.edge_rate[(k, q)] = rate
        self.alloc[(k, q)] = self.alloc.get((k, q), 0) + rate
        self._cap_subtree(m, q)

    @staticmethod
    def _reaches_excluded(tree, k, exclude) -> bool:
        node = k
        while node != tree.flow:
            node = tree.parent.get(node)
            if node is None or node == exclude:
                return True
        return False


# ---------------------------------------------------------------------------


@dataclass
class Convergence:
    converged: bool
    rounds: int
    accepted: int
    trajectory: List[int]


def run_to_quiescence(overlay: Overlay, rng, max_rounds: int = 100) -> Convergence:
    """Gossip, then evaluate every (surrogate, flow) pair in random order;
    stop after a full round in which no switch was accepted."""
    trajectory = []
    for r in range(1, max_rounds + 1):
        overlay.gossip()
        pairs = [(n, m) for m in sorted(overlay.trees) for n in overlay.members if n != m]
        order = rng.permutation(len(pairs))
        accepted = 0
        for idx in order:
            n, m = pairs[idx]
            prop = overlay.evaluate_switch(n, m)
            if prop is not None:
                overlay.apply_switch(prop)
                accepted += 1
        trajectory.append(accepted)
        if accepted == 0:
            return Convergence(True, r, sum(trajectory), trajectory)
    return Convergence(False, max_rounds, sum(trajectory), trajectory)

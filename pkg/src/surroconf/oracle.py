"""Exhaustive solver for the tree-restricted rate/routing problem on tiny
instances. Used as ground truth for the distributed heuristic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .core import (
    EPS,
    NEG_INF,
    DisseminationTree,
    Edge,
    RateLadder,
    RateSolution,
    SurrogateId,
    TopologySnapshot,
    TranscodeModel,
    objective,
    transcode_latency,
)
from .routing import InfeasibleSession, Overlay, run_to_quiescence

DEFAULT_MAX_NODES = 4


@dataclass
class OracleInstance:
    topo: TopologySnapshot
    model: TranscodeModel
    ladder: RateLadder
    bounds: Mapping[Edge, float]
    max_nodes: int = DEFAULT_MAX_NODES

    def __post_init__(self):
        n = len(self.topo.surrogates)
        if n > self.max_nodes:
            raise OracleRefused(n, search_space_estimate(n, len(self.ladder.rates_kbps)))


class OracleRefused(ValueError):
    def __init__(self, n_nodes, estimate):
        self.n_nodes = n_nodes
        self.estimate = estimate
        super().__init__(f"{n_nodes} surrogates exceed the oracle cap; about {estimate:.3g} joint candidates")


def search_space_estimate(n_nodes: int, n_rates: int) -> float:
    """Rooted spanning trees of the complete graph times per-edge rate
    choices, raised to the number of flows."""
    per_flow = float(n_nodes) ** max(n_nodes - 2, 0) * float(n_rates) ** (n_nodes - 1)
    return per_flow ** n_nodes


@dataclass
class OracleResult:
    feasible: bool
    objective: float
    solution: Optional[RateSolution] = None
    explored: int = 0
    infeasible_flows: List[SurrogateId] = field(default_factory=list)


@dataclass
class _Candidate:
    util: float
    key: tuple
    parent: Dict[SurrogateId, SurrogateId]
    rates: Dict[Edge, int]


def _arborescences(topo: TopologySnapshot, root: SurrogateId):
    """All parent maps over existing links forming a tree rooted at ``root``."""
    others = [n for n in topo.surrogates if n != root]
    choices = [[p for p in topo.in_neighbors(n)] for n in others]

    def reaches_root(parent, n):
        seen = set()
        while n != root:
            if n in seen:
                return False
            seen.add(n)
            n = parent[n]
        return True

    def rec(idx, parent):
        if idx == len(others):
            if all(reaches_root(parent, n) for n in others):
                yield dict(parent)
            return
        n = others[idx]
        for p in choices[idx]:
            parent[n] = p
            yield from rec(idx + 1, parent)
        parent.pop(n, None)

    yield from rec(0, {})


def _flow_candidates(inst: OracleInstance, m: SurrogateId) -> List[_Candidate]:
    topo, model = inst.topo, inst.model
    ladder = [r for r in inst.ladder.rates_kbps if r <= topo.source_rate(m)]
    out = []
    for parent in _arborescences(topo, m):
        tree = DisseminationTree(m, parent=parent)
        order = tree.subtree(m)[1:]
        enc_parent = tuple(parent[n] for n in sorted(parent))
        into: Dict[SurrogateId, int] = {m: topo.source_rate(m)}
        omega: Dict[SurrogateId, float] = {m: 0.0}

        def rec(idx, util):
            if idx == len(order):
                rates = {(parent[n], n): into[n] for n in order}
                enc_rates = tuple(into[n] for n in sorted(parent))
                out.append(_Candidate(util, (enc_parent, enc_rates), dict(parent), rates))
                return
            n = order[idx]
            p = parent[n]
            acc = topo.accept(m, n)
            for r in ladder:
                if r > into[p]:
                    break
                w = omega[p] + topo.latency(p, n)
                if p != m:
                    w += transcode_latency(model, p, into[p], r)
                if w + transcode_latency(model, n, r, acc) > inst.bounds.get((m, n), math.inf) + EPS:
                    continue
                into[n] = r
                omega[n] = w
                rec(idx + 1, util + math.log(min(r, acc) / acc))
            into.pop(n, None)
            omega.pop(n, None)

        rec(0, 0.0)
    out.sort(key=lambda c: (-round(c.util, 9), c.key))
    return _pareto(topo, out)


def _pareto(topo: TopologySnapshot, cands: List[_Candidate]) -> List[_Candidate]:
    """Drop candidates for which an earlier one (no lower utility) uses no
    more bandwidth on any link. Such a candidate can always be swapped for
    the earlier one without losing utility, so neither the optimum nor the
    tie-break changes."""
    if not cands:
        return cands
    edges = sorted(topo.links)
    col = {e: k for k, e in enumerate(edges)}
    use = np.zeros((len(cands), len(edges)))
    for i, c in enumerate(cands):
        for e, r in c.rates.items():
            use[i, col[e]] = r
    kept = [0]
    for i in range(1, len(cands)):
        if not np.any(np.all(use[kept] <= use[i], axis=1)):
            kept.append(i)
    return [cands[i] for i in kept]


def solve_exact(inst: OracleInstance) -> OracleResult:
    """Maximise total log-utility over tree routings and ladder rates.

    Ties are broken by the lexicographically smallest sequence of per-flow
    (negated utility, parent encoding, rate encoding) keys in flow-id order.
    """
    topo = inst.topo
    flows = list(topo.surrogates)
    cands = {m: _flow_candidates(inst, m) for m in flows}
    empty = [m for m in flows if not cands[m]]
    if empty:
        return OracleResult(False, NEG_INF, infeasible_flows=empty)

    best_tail = [0.0] * (len(flows) + 1)
    for k in range(len(flows) - 1, -1, -1):
        best_tail[k] = best_tail[k + 1] + cands[flows[k]][0].util
    upper = best_tail[0]

    usage: Dict[Edge, float] = {}
    chosen: List[_Candidate] = []
    state = {"best": NEG_INF, "pick": None, "explored": 0, "done": False}

    def rec(k, util):
        if state["done"]:
            return
        if k == len(flows):
            state["explored"] += 1
            if util > state["best"] + EPS:
                state["best"] = util
                state["pick"] = list(chosen)
                if util >= upper - EPS:
                    state["done"] = True
            return
        for c in cands[flows[k]]:
            if util + c.util + best_tail[k + 1] <= state["best"] + EPS:
                break
            if any(usage.get(e, 0) + r > topo.capacity(*e) + EPS for e, r in c.rates.items()):
                continue
            for e, r in c.rates.items():
                usage[e] = usage.get(e, 0) + r
            chosen.append(c)
            rec(k + 1, util + c.util)
            chosen.pop()
            for e, r in c.rates.items():
                usage[e] -= r
            if state["done"]:
                return

    rec(0, 0.0)
    if state["pick"] is None:
        return OracleResult(False, NEG_INF, explored=state["explored"])
    trees = {}
    for m, c in zip(flows, state["pick"]):
        t = DisseminationTree(m, parent=dict(c.parent), edge_rate=dict(c.rates))
        trees[m] = t
    sol = RateSolution.from_trees(topo, trees)
    return OracleResult(True, objective(topo, sol), sol, state["explored"])


@dataclass
class GapReport:
    oracle_obj: float
    heuristic_obj: float
    gap: float
    converged: bool
    rounds: int
    trajectory: List[int]
    oracle_feasible: bool
    heuristic_feasible: bool


def heuristic_gap(inst: OracleInstance, rng=None, max_rounds: int = 100) -> GapReport:
    """Run shortest-path bootstrap plus parent switching to quiescence and
    compare against the exact optimum."""
    rng = rng if rng is not None else np.random.default_rng(0)
    exact = solve_exact(inst)
    try:
        ov = Overlay.bootstrap(inst.topo, inst.model, inst.ladder, inst.bounds)
    except InfeasibleSession:
        return GapReport(exact.objective, NEG_INF, math.inf if exact.feasible else 0.0,
                         True, 0, [], exact.feasible, False)
    conv = run_to_quiescence(ov, rng, max_rounds)
    h = objective(ov.topo, ov.solution())
    if exact.objective == NEG_INF:
        gap = 0.0 if h == NEG_INF else -math.inf
    else:
        gap = exact.objective - h
    return GapReport(exact.objective, h, gap, conv.converged, conv.rounds, conv.trajectory,
                     exact.feasible, True)

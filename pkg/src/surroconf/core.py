"""Shared domain types, the transcoding-latency model, utility and the
feasibility validator for routed rate solutions.

Units: rates in kbps (ints), delays in milliseconds (floats).
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

SurrogateId = int
Edge = Tuple[SurrogateId, SurrogateId]

NEG_INF = float("-inf")
EPS = 1e-9

DEFAULT_LADDER = (128, 256, 512, 768, 1049)


class StructuralError(ValueError):
    """A solution references surrogates or edges that cannot exist."""


@dataclass(frozen=True)
class Link:
    capacity_kbps: float
    latency_ms: float


@dataclass(frozen=True)
class LastMile:
    """Device <-> surrogate leg of one participant.

    ``accept_kbps`` maps a flow (source surrogate) to the largest rate this
    participant's device will accept for it.
    """

    delay_ms: float
    source_rate_kbps: int
    accept_kbps: Mapping[SurrogateId, int] = field(default_factory=dict)


@dataclass(frozen=True)
class TopologySnapshot:
    surrogates: Tuple[SurrogateId, ...]
    links: Mapping[Edge, Link]
    last_mile: Mapping[SurrogateId, LastMile]

    def __post_init__(self):
        object.__setattr__(self, "surrogates", tuple(sorted(set(self.surrogates))))
        known = set(self.surrogates)
        for (i, j), link in self.links.items():
            if i == j:
                raise ValueError(f"self-link on surrogate {i}")
            if i not in known or j not in known:
                raise ValueError(f"link ({i},{j}) references an undeclared surrogate")
            if not link.capacity_kbps > 0:
                raise ValueError(f"link ({i},{j}) capacity must be positive")
            if link.latency_ms < 0:
                raise ValueError(f"link ({i},{j}) latency must be non-negative")
        for s in self.surrogates:
            if s not in self.last_mile:
                raise ValueError(f"surrogate {s} has no last-mile entry")

    def has_link(self, i: SurrogateId, j: SurrogateId) -> bool:
        return (i, j) in self.links

    def latency(self, i: SurrogateId, j: SurrogateId) -> float:
        return self.links[(i, j)].latency_ms

    def capacity(self, i: SurrogateId, j: SurrogateId) -> float:
        return self.links[(i, j)].capacity_kbps

    def in_neighbors(self, n: SurrogateId) -> List[SurrogateId]:
        return [i for i in self.surrogates if (i, n) in self.links]

    def out_neighbors(self, n: SurrogateId) -> List[SurrogateId]:
        return [j for j in self.surrogates if (n, j) in self.links]

    def source_rate(self, m: SurrogateId) -> int:
        return self.last_mile[m].source_rate_kbps

    def accept(self, m: SurrogateId, n: SurrogateId) -> int:
        """Largest rate of flow ``m`` acceptable at the device behind ``n``."""
        return self.last_mile[n].accept_kbps[m]

    def with_link(self, i: SurrogateId, j: SurrogateId, **changes) -> "TopologySnapshot":
        links = dict(self.links)
        links[(i, j)] = replace(links[(i, j)], **changes)
        return replace(self, links=links)


@dataclass(frozen=True)
class TranscodeModel:
    """Affine down-sampling latency, scaled by the VM speed of each surrogate."""

    base_ms: float = 0.0
    in_coef_ms_per_kbps: float = 0.0
    out_coef_ms_per_kbps: float = 0.0
    speed_factor: Mapping[SurrogateId, float] = field(default_factory=dict)

    def __post_init__(self):
        if min(self.base_ms, self.in_coef_ms_per_kbps, self.out_coef_ms_per_kbps) < 0:
            raise ValueError("transcode coefficients must be non-negative")
        for s, f in self.speed_factor.items():
            if not f > 0:
                raise ValueError(f"speed factor of {s} must be positive")

    def speed(self, n: SurrogateId) -> float:
        return self.speed_factor.get(n, 1.0)


def transcode_latency(model: TranscodeModel, surrogate: SurrogateId, r1: float, r2: float) -> float:
    if r1 < 0 or r2 < 0:
        raise ValueError("rates must be non-negative")
    if r1 <= r2:
        return 0.0
    cost = model.base_ms + model.in_coef_ms_per_kbps * r1 + model.out_coef_ms_per_kbps * r2
    return cost / model.speed(surrogate)


@dataclass(frozen=True)
class RateLadder:
    rates_kbps: Tuple[int, ...] = DEFAULT_LADDER

    def __post_init__(self):
        rates = tuple(self.rates_kbps)
        if not rates:
            raise ValueError("rate ladder must not be empty")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("rate ladder must be strictly increasing")
        if rates[0] <= 0:
            raise ValueError("ladder rates must be positive")
        object.__setattr__(self, "rates_kbps", rates)

    @property
    def minimum(self) -> int:
        return self.rates_kbps[0]

    def floor(self, x: float) -> int:
        """Largest ladder rate <= x, or 0 when x is below the ladder."""
        k = bisect.bisect_right(self.rates_kbps, x + EPS)
        return self.rates_kbps[k - 1] if k else 0

    def __contains__(self, rate) -> bool:
        return rate in self.rates_kbps

    def __iter__(self):
        return iter(self.rates_kbps)

    def __len__(self):
        return len(self.rates_kbps)


def utility(r: float, r_max: float) -> float:
    """ln(r / r_max); -inf marks an absent (zero-rate) flow."""
    if r_max <= 0:
        raise ValueError("no acceptable rate (r_max must be positive)")
    if r <= 0:
        return NEG_INF
    if r > r_max + EPS:
        raise ValueError(f"rate {r} exceeds the acceptable maximum {r_max}")
    return math.log(r / r_max)


@dataclass
class DisseminationTree:
    """Routing tree of one flow: parent pointers plus per-edge rates.

    ``path_delay`` caches the accumulated latency at each surrogate (link and
    intermediate transcoding delays, excluding the receiver's own final
    transcode); it is maintained by the routing code and not trusted by the
    validator.
    """

    flow: SurrogateId
    parent: Dict[SurrogateId, SurrogateId] = field(default_factory=dict)
    edge_rate: Dict[Edge, int] = field(default_factory=dict)
    path_delay: Dict[SurrogateId, float] = field(default_factory=dict)

    def nodes(self) -> List[SurrogateId]:
        return sorted({self.flow, *self.parent})

    def edges(self) -> List[Edge]:
        return sorted((p, n) for n, p in self.parent.items())

    def children(self, i: SurrogateId) -> List[SurrogateId]:
        return sorted(n for n, p in self.parent.items() if p == i)

    def rate_into(self, n: SurrogateId) -> int:
        return self.edge_rate[(self.parent[n], n)]

    def path(self, n: SurrogateId) -> List[SurrogateId]:
        """Surrogates from the root to ``n`` inclusive; raises on a cycle."""
        out = [n]
        seen = {n}
        while out[-1] != self.flow:
            p = self.parent.get(out[-1])
            if p is None:
                raise StructuralError(f"flow {self.flow}: {n} is not connected to the root")
            if p in seen:
                raise StructuralError(f"flow {self.flow}: cycle through {p}")
            seen.add(p)
            out.append(p)
        out.reverse()
        return out

    def subtree(self, n: SurrogateId) -> List[SurrogateId]:
        """``n`` and all its descendants, in breadth-first order."""
        kids: Dict[SurrogateId, List[SurrogateId]] = {}
        for c, p in sorted(self.parent.items()):
            kids.setdefault(p, []).append(c)
        out = [n]
        k = 0
        while k < len(out):
            out.extend(kids.get(out[k], ()))
            k += 1
        return out

    def depth(self, n: SurrogateId) -> int:
        return len(self.path(n)) - 1

    def copy(self) -> "DisseminationTree":
        return DisseminationTree(self.flow, dict(self.parent), dict(self.edge_rate), dict(self.path_delay))


def is_acyclic(tree: DisseminationTree) -> bool:
    """Walk every node to the root with a visited set."""
    for n in tree.parent:
        seen = set()
        cur = n
        while cur != tree.flow:
            if cur in seen or cur not in tree.parent:
                return False
            seen.add(cur)
            cur = tree.parent[cur]
    return True


def end_rate(topo: TopologySnapshot, tree: DisseminationTree, n: SurrogateId) -> int:
    """Rate of flow ``tree.flow`` delivered to the device behind ``n``."""
    return min(tree.rate_into(n), topo.accept(tree.flow, n))


@dataclass
class RateSolution:
    trees: Dict[SurrogateId, DisseminationTree]
    end_rates: Dict[Edge, int]
    starved: Tuple[SurrogateId, ...] = ()

    @classmethod
    def from_trees(cls, topo: TopologySnapshot, trees: Mapping[SurrogateId, DisseminationTree],
                   starved: Iterable[SurrogateId] = ()) -> "RateSolution":
        rates = {}
        for m, tree in trees.items():
            for n in tree.parent:
                rates[(m, n)] = end_rate(topo, tree, n)
        return cls(dict(trees), rates, tuple(sorted(starved)))


def objective(topo: TopologySnapshot, sol: RateSolution) -> float:
    """Aggregate utility over every (flow, receiver) pair."""
    total = 0.0
    for (m, n), r in sorted(sol.end_rates.items()):
        u = utility(r, topo.accept(m, n))
        if u == NEG_INF:
            return NEG_INF
        total += u
    return total


def end_to_end_delay(topo: TopologySnapshot, model: TranscodeModel,
                     tree: DisseminationTree, n: SurrogateId) -> float:
    """Link delays + intermediate transcodes + final transcode to the device cap.

    No transcode is charged at the source: its device sends at the rate the
    source surrogate forwards.
    """
    path = tree.path(n)
    m = tree.flow
    delay = 0.0
    for a, b in zip(path, path[1:]):
        delay += topo.latency(a, b)
    for k in range(1, len(path) - 1):
        j = path[k]
        delay += transcode_latency(model, j, tree.edge_rate[(path[k - 1], j)], tree.edge_rate[(j, path[k + 1])])
    if len(path) > 1:
        delay += transcode_latency(model, n, tree.edge_rate[(path[-2], n)], topo.accept(m, n))
    return delay


@dataclass(frozen=True)
class Violation:
    constraint: str
    witness: tuple
    detail: str = ""


@dataclass
class ValidationReport:
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def by_constraint(self, name: str) -> List[Violation]:
        return [v for v in self.violations if v.constraint == name]

    def __bool__(self):
        return self.ok


# Constraint families reported by validate_solution.
PATH = "single_path"             # one integral path per (m, n), flow conservation
UNICAST_LE_MULTICAST = "unicast_le_multicast"
CAPACITY = "capacity"
DELAY = "delay_bound"
SOURCE_RATE = "source_rate"
ACCEPT_RATE = "accept_rate"
DOWNSAMPLING = "downsampling"
LADDER = "ladder"


def validate_solution(topo: TopologySnapshot, model: TranscodeModel, sol: RateSolution,
                      bounds: Mapping[Edge, float], ladder: Optional[RateLadder] = None) -> ValidationReport:
    report = ValidationReport()
    bad = report.violations
    known = set(topo.surrogates)
    usage: Dict[Edge, float] = {}

    for m, tree in sorted(sol.trees.items()):
        if tree.flow != m or m not in known:
            raise StructuralError(f"tree keyed {m} has unknown root {tree.flow}")
        for (i, j), rate in tree.edge_rate.items():
            if i not in known or j not in known:
                raise StructuralError(f"flow {m}: edge ({i},{j}) has an unknown endpoint")
            if tree.parent.get(j) != i:
                raise StructuralError(f"flow {m}: rated edge ({i},{j}) is not a tree edge")
        for n, p in tree.parent.items():
            if n not in known or p not in known:
                raise StructuralError(f"flow {m}: edge ({p},{n}) has an unknown endpoint")
            if (p, n) not in tree.edge_rate:
                raise StructuralError(f"flow {m}: tree edge ({p},{n}) carries no rate")

        for (i, j), rate in sorted(tree.edge_rate.items()):
            if not topo.has_link(i, j):
                bad.append(Violation(PATH, (m, i, j), "tree edge is not an overlay link"))
            usage[(i, j)] = usage.get((i, j), 0) + rate
            if ladder is not None and rate != 0 and rate not in ladder:
                bad.append(Violation(LADDER, (m, i, j), f"rate {rate} is not a ladder rate"))
            if i == m and rate > topo.source_rate(m):
                bad.append(Violation(SOURCE_RATE, (m, i, j), f"edge rate {rate} above source rate"))
            elif i != m and i in tree.parent and rate > tree.edge_rate.get((tree.parent[i], i), rate):
                bad.append(Violation(DOWNSAMPLING, (m, i, j), "edge rate exceeds its upstream rate"))

        for n in topo.surrogates:
            if n == m:
                continue
            try:
                path = tree.path(n)
            except StructuralError as exc:
                bad.append(Violation(PATH, (m, n), str(exc)))
                continue
            if any(not topo.has_link(a, b) for a, b in zip(path, path[1:])):
                continue  # already reported per edge
            r = sol.end_rates.get((m, n))
            if r is None:
                bad.append(Violation(PATH, (m, n), "no end rate for receiver"))
                continue
            for a, b in zip(path, path[1:]):
                if r > tree.edge_rate[(a, b)]:
                    bad.append(Violation(UNICAST_LE_MULTICAST, (m, n, a, b),
                                         f"end rate {r} above link rate {tree.edge_rate[(a, b)]}"))
            if r > topo.source_rate(m):
                bad.append(Violation(SOURCE_RATE, (m, n), f"end rate {r} above source rate"))
            if r > topo.accept(m, n):
                bad.append(Violation(ACCEPT_RATE, (m, n), f"end rate {r} above device cap"))
            delay = end_to_end_delay(topo, model, tree, n)
            bound = bounds.get((m, n), math.inf)
            if delay > bound + EPS:
                bad.append(Violation(DELAY, (m, n), f"delay {delay:.3f} ms exceeds bound {bound:.3f} ms"))

    for (i, j), used in sorted(usage.items()):
        if topo.has_link(i, j) and used > topo.capacity(i, j) + EPS:
            bad.append(Violation(CAPACITY, (i, j), f"{used} kbps allocated on {topo.capacity(i, j)} kbps"))
    return report

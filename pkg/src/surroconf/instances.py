"""Ready-made routing instances: the four-node worked example and a seeded
random generator used by the property harnesses and the oracle sweep."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from .core import Edge, LastMile, Link, RateLadder, TopologySnapshot, TranscodeModel


@dataclass
class Instance:
    topo: TopologySnapshot
    model: TranscodeModel
    ladder: RateLadder
    bounds: Dict[Edge, float]


A, B, C, D = 0, 1, 2, 3


def four_node_example() -> Instance:
    """Link (a,c) is the only narrow link (512 kbps). Flow b's shortest path
    to c goes through a; the direct link b->c is too slow for c's bound and
    the detour through d is fast enough. Flow d is pinned to the direct
    link d->c, so 512 kbps is the most flow b can get at c."""
    lat = {(A, B): 10, (A, C): 10, (A, D): 10, (C, D): 10, (B, C): 40, (B, D): 15}
    links = {}
    for (i, j), d in lat.items():
        for e in ((i, j), (j, i)):
            links[e] = Link(512 if e == (A, C) else 1024, d)
    accept = {
        A: {B: 512, C: 256, D: 512},
        B: {A: 256, C: 256, D: 512},
        C: {B: 768, A: 256, D: 512},
        D: {B: 512, A: 256, C: 256},
    }
    last_mile = {s: LastMile(0.0, 1049, accept[s]) for s in (A, B, C, D)}
    topo = TopologySnapshot((A, B, C, D), links, last_mile)
    bounds = {(m, n): 100.0 for m in range(4) for n in range(4) if m != n}
    bounds[(B, C)] = 30.0
    bounds[(D, C)] = 10.0  # flow d must use d->c directly, leaving 512 kbps there
    model = TranscodeModel(base_ms=2.0, in_coef_ms_per_kbps=0.002, out_coef_ms_per_kbps=0.004)
    return Instance(topo, model, RateLadder(), bounds)


def random_instance(rng: np.random.Generator, n_nodes: int, ladder: RateLadder = RateLadder(),
                    link_prob: float = 0.8, slack=(1.0, 1.6)) -> Instance:
    """Random overlay on ``n_nodes`` surrogates.

    A bidirectional ring guarantees connectivity; other directed links appear
    with ``link_prob``. Bounds are the shortest-path latency stretched by a
    random slack factor plus a few ms, so the bootstrap always finds the instance
    feasible while leaving room for (and limits on) detours.
    """
    nodes = tuple(range(n_nodes))
    caps = (256, 384, 512, 768, 1024, 1536, 2048)
    links = {}
    for i in nodes:
        for j in nodes:
            if i == j:
                continue
            ring = j == (i + 1) % n_nodes or i == (j + 1) % n_nodes
            if ring or rng.random() < link_prob:
                links[(i, j)] = Link(int(rng.choice(caps)), float(np.round(rng.uniform(2, 60), 1)))
    accept_choices = tuple(ladder.rates_kbps)
    last_mile = {}
    for n in nodes:
        acc = {m: int(rng.choice(accept_choices)) for m in nodes if m != n}
        last_mile[n] = LastMile(0.0, int(ladder.rates_kbps[-1]), acc)
    topo = TopologySnapshot(nodes, links, last_mile)
    model = TranscodeModel(base_ms=float(rng.uniform(1, 8)),
                           in_coef_ms_per_kbps=float(rng.uniform(0, 0.01)),
                           out_coef_ms_per_kbps=float(rng.uniform(0, 0.01)),
                           speed_factor={n: float(rng.uniform(0.5, 2.0)) for n in nodes})
    dist = _all_pairs(topo)
    bounds = {}
    for m in nodes:
        for n in nodes:
            if m != n:
                bounds[(m, n)] = float(np.round(dist[m][n] * rng.uniform(*slack) + rng.uniform(0, 15), 1))
    return Instance(topo, model, ladder, bounds)


def _all_pairs(topo: TopologySnapshot):
    inf = float("inf")
    nodes = topo.surrogates
    dist = {i: {j: (0.0 if i == j else topo.links[(i, j)].latency_ms if (i, j) in topo.links else inf)
                for j in nodes} for i in nodes}
    for k in nodes:
        for i in nodes:
            for j in nodes:
                if dist[i][k] + dist[k][j] < dist[i][j]:
                    dist[i][j] = dist[i][k] + dist[k][j]
    return dist

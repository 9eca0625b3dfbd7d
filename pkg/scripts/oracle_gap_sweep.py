"""Heuristic vs exact optimum on random small instances."""

import argparse
import math
from collections import Counter

import numpy as np

from surroconf.instances import random_instance
from surroconf.oracle import OracleInstance, heuristic_gap


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--seed", type=int, default=10_000)
    ap.add_argument("--nodes", type=int, nargs="+", default=[3, 4])
    args = ap.parse_args()

    gaps, hist = [], Counter()
    for k in range(args.count):
        rng = np.random.default_rng(args.seed + k)
        inst = random_instance(rng, args.nodes[k % len(args.nodes)])
        g = heuristic_gap(OracleInstance(inst.topo, inst.model, inst.ladder, inst.bounds), rng)
        assert g.heuristic_obj <= g.oracle_obj + 1e-9, f"seed {args.seed + k}: heuristic above the optimum"
        gaps.append(g.gap)
        hist["starved" if math.isinf(g.gap) else "zero" if g.gap <= 1e-9 else "positive"] += 1
    finite = np.array([g for g in gaps if math.isfinite(g)])
    print(f"{args.count} instances: {dict(hist)}")
    if finite.size:
        print(f"finite gaps: mean {finite.mean():.4f}, p90 {np.quantile(finite, 0.9):.4f}, max {finite.max():.4f}")


if __name__ == "__main__":
    main()

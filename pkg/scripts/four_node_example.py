"""Walk the four-node example: bootstrap rates, each accepted switch, final trees."""

import numpy as np

from surroconf.core import objective, validate_solution
from surroconf.instances import four_node_example
from surroconf.routing import Overlay

NAMES = "abcd"


def show(ov):
    for m, tree in sorted(ov.trees.items()):
        edges = ", ".join(f"{NAMES[p]}->{NAMES[c]}@{tree.rate_into(c)}" for p, c in tree.edges())
        print(f"  flow {NAMES[m]}: {edges}")
    print(f"  objective {objective(ov.topo, ov.solution()):.4f}")


def main():
    ex = four_node_example()
    ov = Overlay.bootstrap(ex.topo, ex.model, ex.ladder, ex.bounds, check_invariants=True)
    print("after bootstrap")
    show(ov)
    rng = np.random.default_rng(0)
    for rnd in range(1, 101):
        ov.gossip()
        pairs = [(n, m) for m in sorted(ov.trees) for n in ov.members if n != m]
        accepted = 0
        for idx in rng.permutation(len(pairs)):
            prop = ov.evaluate_switch(*pairs[idx])
            if prop is None:
                continue
            r = ov.apply_switch(prop)
            accepted += 1
            print(f"round {rnd}: flow {NAMES[r.flow]}, {NAMES[r.node]} moves {NAMES[r.old_parent]} -> "
                  f"{NAMES[r.new_parent]}, rate {r.old_rate} -> {r.new_rate}")
        if not accepted:
            print(f"quiescent after {rnd} rounds")
            break
    show(ov)
    print("bounds held:", validate_solution(ov.topo, ov.model, ov.solution(), ov.bounds, ov.ladder).ok)


if __name__ == "__main__":
    main()

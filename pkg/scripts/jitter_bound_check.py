"""Missed-release fraction when path delay sits at the routing bound.

With ``--adaptive`` the bound follows the buffer's own sigma estimate
instead of the true sigma, the way the simulator runs it.
"""

import argparse
import heapq

import numpy as np

from surroconf.jitter import K_SIGMA, DelayBudget, Fragment, JitterBuffer, update_bound


def run(sigma, packets, seed, adaptive, per_frame=8, interval=40.0):
    rng = np.random.default_rng(seed)
    budget = DelayBudget(400.0, 30.0, 30.0)
    buf = JitterBuffer(budget, capacity_ms=1000.0)
    bound = budget.script_L - K_SIGMA * sigma
    frames = packets // per_frame
    events = []  # (time, kind, frame, index); at equal times arrivals go first
    late = 0

    def drain(until):
        nonlocal late
        while events and events[0][0] < until:
            t, kind, f, i = heapq.heappop(events)
            if kind == 0:
                late += buf.push(Fragment(f * interval, f, i, per_frame), t) == "late"
            else:
                buf.pop_due(t)

    for f in range(frames):
        ts = f * interval
        # nothing generated later can arrive before it was sent
        drain(ts)
        if adaptive and f > 64:
            bound = update_bound(budget, buf.sigma_hat).bound_L
        for i, d in enumerate(rng.normal(bound, sigma, per_frame)):
            heapq.heappush(events, (ts + max(d, 0.0), 0, f, i))
        heapq.heappush(events, (ts + budget.script_L, 1, f, 0))
    drain(float("inf"))
    return late / (frames * per_frame), buf.sigma_hat


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--packets", type=int, default=100_000)
    ap.add_argument("--sigmas", type=float, nargs="+", default=[5, 10, 20])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--adaptive", action="store_true")
    args = ap.parse_args()
    for s in args.sigmas:
        frac, est = run(s, args.packets, args.seed, args.adaptive)
        flag = "ok" if frac <= 0.001 else "over 0.1%"
        print(f"sigma {s:5.1f}: missed {100 * frac:.3f}%  estimated sigma {est:.2f}  {flag}")


if __name__ == "__main__":
    main()

"""Run the ten-party scenario, export CSVs and print a timeline of switches
for the flow crossing the jittery link."""

import argparse
import pathlib

import numpy as np

from surroconf.sim.metrics import export_metrics
from surroconf.sim.runner import run
from surroconf.sim.scenario import load_scenario

ROOT = pathlib.Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default=str(ROOT / "scenarios" / "ten_party.yaml"))
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="out/ten_party")
    ap.add_argument("--flow", type=int, default=5)
    ap.add_argument("--receiver", type=int, default=0)
    args = ap.parse_args()

    sc = load_scenario(args.scenario)
    log = run(sc, seed=args.seed)
    files = export_metrics(log, args.out)
    print(f"wrote {len(files)} files to {args.out}")

    for r in log.select("switches", flow=args.flow):
        print(f"{r['time_ms'] / 1000:7.2f}s  receiver {r['receiver']}: "
              f"parent {r['old_parent']} -> {r['new_parent']}, {r['old_rate_kbps']} -> {r['new_rate_kbps']} kbps ({r['reason']})")

    occ = log.select("buffer", flow=args.flow, receiver=args.receiver)
    print(f"buffer occupancy at {args.receiver} for flow {args.flow}, 4 s bins:")
    for lo in range(0, int(sc.duration_ms), 4000):
        vals = [r["occupancy_ms"] for r in occ if lo <= r["time_ms"] < lo + 4000]
        if vals:
            print(f"  {lo / 1000:5.0f}-{(lo + 4000) / 1000:.0f}s  mean {np.mean(vals):6.1f}  std {np.std(vals):5.1f}")
    lat = log.column("latency", "latency_ms")
    print(f"max latency {max(lat):.1f} ms, {len(log.rows['timeouts'])} late packets")


if __name__ == "__main__":
    main()

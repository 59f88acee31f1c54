#!/usr/bin/env python3
"""Differential campaign over generated libraries.

For each seed: verify, monitor, compare the erased run with the machine, and
check CSR/RA integrity and StrongNI on the unmonitored zero-cost run.
"""

import argparse
import time

from gatelab import gen_library, verify_library
from gatelab.machine import run
from gatelab.monitor import check_refinement, run_monitored
from gatelab.properties import check_csr_integrity, check_ra_integrity, check_strong_ni
from gatelab.transitions import ZERO


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-n", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--fuel", type=int, default=10000)
    ap.add_argument("--no-ni", action="store_true", help="skip the pair runs")
    args = ap.parse_args()

    counts = dict(rejected=0, monitor=0, refinement=0, csr=0, ra=0, ni=0)
    steps = []
    t0 = time.perf_counter()
    for seed in range(args.seed, args.seed + args.n):
        prog = gen_library(seed)
        if not verify_library(prog).ok:
            counts["rejected"] += 1
            print(f"seed {seed}: rejected by the verifier")
            continue
        mt = run_monitored(prog, fuel=args.fuel)
        if mt.error is not None:
            counts["monitor"] += 1
            print(f"seed {seed}: {mt.error}")
        if check_refinement(prog, mt):
            counts["refinement"] += 1
            print(f"seed {seed}: refinement mismatch")
        tr = run(prog, ZERO, args.fuel)
        steps.append(len(tr))
        for key, found in (("csr", check_csr_integrity(tr)), ("ra", check_ra_integrity(tr))):
            if found:
                counts[key] += 1
                print(f"seed {seed}: {found[0]}")
        if not args.no_ni:
            v = check_strong_ni(prog, seed=seed, fuel=args.fuel)
            if not v.ok:
                counts["ni"] += 1
                print(f"seed {seed}: {v}")
    dt = time.perf_counter() - t0
    print(f"{args.n} programs in {dt:.1f}s; mean trace {sum(steps) / max(len(steps), 1):.0f} steps, "
          f"max {max(steps, default=0)}")
    for k, v in counts.items():
        print(f"  {k:<11s} {v}")
    raise SystemExit(1 if any(counts.values()) else 0)


if __name__ == "__main__":
    main()

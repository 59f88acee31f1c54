#!/usr/bin/env python3
"""Run every mutation kind against the verifier, the monitor and the heavyweight gates."""

import argparse

from gatelab import MutationKind, to_nacl, verify_library
from gatelab.generate import ATTACK_TABLE, mutants
from gatelab.machine import run
from gatelab.monitor import run_monitored
from gatelab.properties import check_csr_integrity, check_ra_integrity, check_strong_ni
from gatelab.transitions import NACL, ZERO


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-n", type=int, default=100, help="instances per kind")
    ap.add_argument("--fuel", type=int, default=10000)
    args = ap.parse_args()

    print(f"{'kind':<22s} {'verifier':>8} {'monitor':>8} {'zc-bad':>7} {'nacl-ok':>8}")
    total_ok = True
    for kind in MutationKind:
        checks, reasons = ATTACK_TABLE[kind]
        v = m = observed = shield = 0
        for seed, prog in mutants(kind, args.n):
            v += bool(verify_library(prog).checks_failed() & checks)
            mt = run_monitored(prog, fuel=args.fuel)
            m += mt.error is not None and mt.error.reason.value in reasons
            # does the attack do visible damage without the monitor?
            tr = run(prog, ZERO, args.fuel)
            observed += bool(check_csr_integrity(tr) or check_ra_integrity(tr)
                             or not check_strong_ni(prog, seed=seed, fuel=args.fuel).ok)
            nprog = to_nacl(prog)
            ntr = run(nprog, NACL, args.fuel)
            shield += not (check_csr_integrity(ntr) or check_ra_integrity(ntr)
                           or not check_strong_ni(nprog, strategy=NACL, seed=seed, fuel=args.fuel).ok)
        total_ok &= v == m == shield == args.n
        print(f"{kind.value:<22s} {v:>8} {m:>8} {observed:>7} {shield:>8}")
    print("all attacks caught and contained" if total_ok else "some attacks slipped through")
    raise SystemExit(0 if total_ok else 1)


if __name__ == "__main__":
    main()

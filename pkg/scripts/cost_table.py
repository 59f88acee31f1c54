#!/usr/bin/env python3
"""Print per-transition step counts for both gate strategies and check them against real runs."""

import argparse

from gatelab import parse_asm
from gatelab.machine import run
from gatelab.transitions import NACL, ZERO, Direction, gate_cost


def round_trip(n):
    pushes = "".join(f"    push T, {i}\n" for i in range(n))
    return parse_asm(f".layout nacl-default\n.lib\n.func f arity={n} exported\n    mov r0, 1\n"
                     f"    gateret\n.endfunc\n.app\nmain:\n{pushes}    gatecall {n}, f\n")


def measured(n, strategy):
    tr = run(round_trip(n), strategy)
    ops = {type(r.cmd).__name__: r.micro_ops for r in tr.records}
    return ops["GateCall"], ops["GateRet"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--max-args", type=int, default=4)
    args = ap.parse_args()
    a2l, l2a = Direction.APP_TO_LIB, Direction.LIB_TO_APP
    print(f"{'n':>3}  {'nacl call':>9} {'nacl ret':>8} {'nacl cb':>7} {'cb ret':>6}  {'zero':>4}  measured")
    for n in range(args.max_args + 1):
        row = (gate_cost(NACL, a2l, n), gate_cost(NACL, l2a, ret=True),
               gate_cost(NACL, l2a, n), gate_cost(NACL, a2l, ret=True))
        got = measured(n, NACL)
        flag = "ok" if got == row[:2] and measured(n, ZERO) == (1, 1) else "MISMATCH"
        print(f"{n:>3}  {row[0]:>9} {row[1]:>8} {row[2]:>7} {row[3]:>6}  {gate_cost(ZERO, a2l, n):>4}  {flag}")


if __name__ == "__main__":
    main()

"""Trace properties: bracketing, return-address bookkeeping, CSR/RA integrity, StrongNI pair runs."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from typing import Optional

from .core import DEFAULT_CONV, Call, GateCall, GateRet, Privilege, Program, Ret, T
from .machine import SCHEMA_VERSION, MachineState, Trace, run, run_from
from .monitor import POLICIES, Labeling


@dataclass(frozen=True)
class WbSegment:
    call: int
    ret: int
    depth: int


def wb_segments(trace: Trace) -> list:
    """Match gatecalls with the gaterets that balance them; unmatched gates yield nothing."""
    open_, out = [], []
    for rec in trace.records:
        if isinstance(rec.cmd, GateCall):
            open_.append((rec.index, rec.priv))
        elif isinstance(rec.cmd, GateRet) and open_:
            idx, p = open_[-1]
            if rec.priv is p.opposite():
                open_.pop()
                out.append(WbSegment(idx, rec.index, len(open_)))
    return sorted(out, key=lambda s: s.call)


def return_address_locs(trace: Trace, upto: int, p: Privilege) -> set:
    """Live return-address slots pushed by p-privileged calls in the first `upto` steps.

    A gatecall's slot is released by the gateret that balances it, which runs on
    the other side of the boundary.
    """
    locs = set()
    open_ = []
    for rec in trace.records[:upto]:
        cmd = rec.cmd
        if isinstance(cmd, GateCall):
            open_.append((rec.priv, rec.sp + 1))
            if rec.priv is p:
                locs.add(rec.sp + 1)
        elif isinstance(cmd, GateRet):
            if open_ and open_[-1][0] is rec.priv.opposite():
                q, slot = open_.pop()
                if q is p:
                    locs.discard(slot)
            elif rec.priv is p:
                locs.discard(rec.sp)
        elif rec.priv is p:
            if isinstance(cmd, Call):
                locs.add(rec.sp + 1)
            elif isinstance(cmd, Ret):
                locs.discard(rec.sp)
    return locs


@dataclass(frozen=True)
class IntegrityViolation:
    property: str
    segment: WbSegment
    where: str
    expected: int
    actual: int

    def as_dict(self):
        return {"property": self.property, "call": self.segment.call, "ret": self.segment.ret,
                "where": self.where, "expected": self.expected, "actual": self.actual}

    def __str__(self):
        return (f"{self.property} [{self.segment.call}..{self.segment.ret}] {self.where}: "
                f"expected {self.expected}, got {self.actual}")


def _trusted_segments(trace: Trace):
    for seg in wb_segments(trace):
        if trace.records[seg.call].priv is T:
            yield seg, trace.states[seg.call], trace.states[seg.ret + 1]


def check_csr_integrity(trace: Trace, conv=DEFAULT_CONV) -> list:
    out = []
    for seg, pre, post in _trusted_segments(trace):
        for r in conv.csr:
            if pre.reg(r) != post.reg(r):
                out.append(IntegrityViolation("csr-integrity", seg, r, pre.reg(r), post.reg(r)))
    return out


def check_ra_integrity(trace: Trace) -> list:
    out = []
    for seg, pre, post in _trusted_segments(trace):
        if post.pc != pre.pc + 1:
            out.append(IntegrityViolation("ra-integrity", seg, "pc", pre.pc + 1, post.pc))
        if post.sp != pre.sp:
            out.append(IntegrityViolation("ra-integrity", seg, "sp", pre.sp, post.sp))
        for a in sorted(return_address_locs(trace, seg.call, T)):
            if pre.read(a) != post.read(a):
                out.append(IntegrityViolation("ra-integrity", seg, f"M({a})", pre.read(a), post.read(a)))
    return out


# Noninterference

def low_equiv(a: MachineState, b: MachineState, labeling: Labeling, program: Program) -> bool:
    if a.pc != b.pc or a.sp != b.sp:
        return False
    for r in program.conv.regs:
        if labeling.regs[r] is not T and a.reg(r) != b.reg(r):
            return False
    for addr in range(program.layout.bound()):
        if labeling.addr(addr) is not T and a.read(addr) != b.read(addr):
            return False
    return True


def low_equiv_mutate(program: Program, state: MachineState, labeling: Labeling, seed) -> MachineState:
    """A =_C-equivalent state with every secret register and cell re-drawn at random."""
    rng = random.Random(seed)
    regs = tuple(rng.randrange(1 << 20) if labeling.regs[r] is T else state.reg(r)
                 for r in program.conv.regs)
    mem = {a: v for a, v in state.mem.items() if a >= program.layout.bound()}
    for addr in range(program.layout.bound()):
        v = rng.randrange(1 << 20) if labeling.addr(addr) is T else state.read(addr)
        if v:
            mem[addr] = v
    return MachineState(state.pc, state.sp, regs, mem)


@dataclass(frozen=True)
class NiVerdict:
    ok: bool
    kind: Optional[str] = None          # step-count | outcome | pc | lib-heap cell | argument slot | return register
    location: Optional[str] = None
    call_step: Optional[int] = None
    forks: int = 0

    def as_dict(self):
        return {"property": "strong-ni", "verdict": "pass" if self.ok else "fail", "kind": self.kind,
                "location": self.location, "call_step": self.call_step, "forks": self.forks}

    def __str__(self):
        if self.ok:
            return f"strong-ni pass ({self.forks} gatecall(s) examined)"
        return f"strong-ni fail at step {self.call_step}: {self.kind} {self.location}"


def _until_trusted(program: Program, state: MachineState, strategy, fuel: int) -> Trace:
    # the gatecall step itself, then library steps until control is back in T code
    def stop(rec, nxt):
        return program.priv_at(nxt.pc) is T
    return run_from(program, state, strategy, fuel, stop=stop)


def _compare_exits(program: Program, a: Trace, b: Trace) -> Optional[tuple]:
    if len(a) != len(b):
        return "step-count", f"{len(a)} vs {len(b)}"
    if a.outcome != b.outcome or (a.error is None) != (b.error is None):
        return "outcome", f"{a.outcome.value} vs {b.outcome.value}"
    if a.error is not None and (a.error.fault, a.error.pc) != (b.error.fault, b.error.pc):
        return "outcome", f"{a.error} vs {b.error}"
    fa, fb = a.final, b.final
    if fa.pc != fb.pc:
        return "pc", f"{fa.pc} vs {fb.pc}"
    lo, hi = program.layout.h_u
    for addr in range(lo, hi):
        if fa.read(addr) != fb.read(addr):
            return "lib-heap cell", f"M({addr})"
    if program.priv_at(fa.pc) is not T or not a.records:
        return None
    last = a.records[-1].cmd
    if isinstance(last, GateCall):
        if fa.sp != fb.sp:
            return "argument slot", f"sp {fa.sp} vs {fb.sp}"
        for addr in range(fa.sp - last.nargs, fa.sp + 1):
            if fa.read(addr) != fb.read(addr):
                return "argument slot", f"M({addr})"
    else:
        r = program.conv.ret
        if fa.reg(r) != fb.reg(r):
            return "return register", r
    return None


def check_strong_ni(program: Program, policy=None, strategy=None, seed=0, fuel: int = 100000) -> NiVerdict:
    """Fork a low-equivalent twin at each trusted gatecall and compare the library runs."""
    from .transitions import ZERO
    policy = policy or POLICIES["nacl-default"]
    strategy = strategy or ZERO
    main = run(program, strategy, fuel)
    forks = 0
    for i, rec in enumerate(main.records):
        if rec.priv is not T or not isinstance(rec.cmd, GateCall):
            continue
        state = main.states[i]
        labeling = policy.labeling(program, state)
        twin = low_equiv_mutate(program, state, labeling, f"{seed}:{i}")
        budget = fuel - i
        a = _until_trusted(program, state, strategy, budget)
        b = _until_trusted(program, twin, strategy, budget)
        forks += 1
        diff = _compare_exits(program, a, b)
        if diff is not None:
            return NiVerdict(False, diff[0], diff[1], i, forks)
    return NiVerdict(True, forks=forks)


def report_records(items) -> str:
    """Line-delimited property records with the schema header."""
    rows = [{"type": "property-report", "schema": SCHEMA_VERSION}]
    rows.extend(items)
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


from .generate import MutationKind, NotApplicable, gen_library, mutate, to_nacl  # noqa: E402,F401

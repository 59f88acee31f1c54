"""Overlay monitor: labeled execution with a logical frame stack.

The monitor computes successor states itself (values and labels together);
erasing a monitored run must reproduce the concrete machine run exactly.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

from .core import (
    Bin, Call, GateCall, GateRet, Jmp, Lit, Load, Mov, MovLabel, Pop, Privilege, Program,
    Push, Reg, Ret, Store, StoreLabel, Sym, T, U, apply_op,
)
from .machine import (
    SCHEMA_VERSION, MachineError, MachineState, Outcome, StepRecord, initial_state, run,
)
from .transitions import ZeroCost


class Reason(str, enum.Enum):
    WRITE_OUTSIDE_FRAME = "WriteOutsideFrame"
    RET_ADDR_MISMATCH = "RetAddrMismatch"
    CSR_NOT_RESTORED = "CsrNotRestored"
    CROSS_FUNCTION_JUMP = "CrossFunctionJump"
    TYPECHECK_FAILED = "TypecheckFailed"
    SECRET_FLOW = "SecretFlow"
    SECRET_TO_LIB_HEAP = "SecretToLibHeap"
    ARGS_NOT_PUBLIC = "ArgsNotPublic"
    GUARD_UNDEFINED = "GuardUndefined"
    REGION_VIOLATION = "RegionViolation"
    PCINC_CROSSING = "PcIncCrossing"


@dataclass(frozen=True)
class OverlayError:
    reason: Reason
    pc: int
    detail: str

    def as_dict(self) -> dict:
        return {"type": "overlay-error", "reason": self.reason.value, "pc": self.pc,
                "detail": self.detail}

    def __str__(self):
        return f"{self.reason.value} at pc {self.pc}: {self.detail}"


class MonitorError(Exception):
    def __init__(self, error: OverlayError):
        super().__init__(str(error))
        self.error = error


def _fail(reason, pc, detail):
    raise MonitorError(OverlayError(reason, pc, detail))


# Labels

@dataclass(frozen=True)
class MemLabels:
    """Total labeling of memory: a base function plus individual overrides."""

    base: Callable[[int], Privilege]
    over: Mapping[int, Privilege] = field(default_factory=dict)

    def get(self, addr: int) -> Privilege:
        p = self.over.get(addr)
        return p if p is not None else self.base(addr)

    def set(self, addr: int, p: Privilege) -> "MemLabels":
        over = dict(self.over)
        over[addr] = p
        return MemLabels(self.base, over)


def _all_public(_addr):
    return U


@dataclass(frozen=True)
class Labeling:
    regs: Mapping[str, Privilege]
    addr: Callable[[int], Privilege]


class AllPublicPolicy:
    name = "all-public"

    def labeling(self, program: Program, state: MachineState) -> Labeling:
        return Labeling({r: U for r in program.conv.regs}, _all_public)


class NaClDefaultPolicy:
    """Registers other than sp/pc are secret; so is application memory except arguments.

    Sandbox memory is public. A stack shared by both sides counts as application
    memory. The live transition-context records are runtime bookkeeping rather
    than application data and are labeled public.
    """

    name = "nacl-default"

    def labeling(self, program: Program, state: MachineState) -> Labeling:
        lay = program.layout
        cmd = program.code[state.pc][1]
        n = cmd.nargs if isinstance(cmd, GateCall) else 0
        sp = state.sp
        lo_ctx = hi_ctx = None
        if lay.ctxstar is not None:
            lo_ctx, hi_ctx = lay.ctx, state.read(lay.ctxstar)

        def addr(a):
            if lay.in_heap(U, a):
                return U
            if lay.in_stack(U, a) and not lay.in_stack(T, a):
                return U
            if sp - n < a <= sp:
                return U
            if lo_ctx is not None and (a == lay.ctxstar or lo_ctx <= a <= hi_ctx):
                return U
            return T

        return Labeling({r: T for r in program.conv.regs}, addr)


POLICIES = {"nacl-default": NaClDefaultPolicy(), "all-public": AllPublicPolicy()}


# Overlay state

@dataclass(frozen=True)
class Frame:
    base: int
    ret_addr_loc: int
    csr_vals: tuple = ()


SENTINEL = -1


@dataclass(frozen=True)
class OverlayState:
    machine: MachineState
    reg_labels: tuple
    mem_labels: MemLabels
    stack: tuple          # top first

    @property
    def top(self) -> Frame:
        return self.stack[0]

    def erase(self) -> MachineState:
        return self.machine

    def reg_label(self, name: str) -> Privilege:
        if name in ("sp", "pc"):
            return U
        return self.reg_labels[int(name[1:])]


def initial_overlay(program: Program) -> OverlayState:
    m = initial_state(program)
    mega = Frame(program.layout.sp0 + 1, SENTINEL, ())
    return OverlayState(m, (U,) * program.conv.nregs, MemLabels(_all_public), (mega,))


def oeval(o: OverlayState, e):
    """Value and label of an expression; operand labels join."""
    if isinstance(e, (Lit, Sym)):
        return e.value, U
    if isinstance(e, Reg):
        return o.machine.reg(e.name), o.reg_label(e.name)
    if isinstance(e, Bin):
        a, la = oeval(o, e.left)
        b, lb = oeval(o, e.right)
        return apply_op(e.op, a, b), la.join(lb)
    raise TypeError(e)


def classify(policy, program: Program, o: OverlayState) -> OverlayState:
    lab = policy.labeling(program, o.machine)
    regs = tuple(lab.regs[r] for r in program.conv.regs)
    return OverlayState(o.machine, regs, MemLabels(lab.addr), o.stack)


class _Step:
    """Builder for one overlay step."""

    def __init__(self, program: Program, o: OverlayState):
        self.program, self.lay = program, program.layout
        self.o = o
        self.pc = o.machine.pc
        self.sp = o.machine.sp
        self.regs = list(o.machine.regs)
        self.rl = list(o.reg_labels)
        self.mem = o.machine.mem
        self.ml = o.mem_labels
        self.stack = o.stack
        self.mem_copied = False

    def set_reg(self, name, value, label):
        if name == "sp":
            self.sp = value
            return
        i = int(name[1:])
        self.regs[i], self.rl[i] = value, label

    def write(self, addr, value, label):
        if not self.mem_copied:
            self.mem = dict(self.mem)
            self.mem_copied = True
        if value:
            self.mem[addr] = value
        else:
            self.mem.pop(addr, None)
        self.ml = self.ml.set(addr, label)

    def read(self, addr):
        return self.mem.get(addr, 0), self.ml.get(addr)

    def guard(self, check, n):
        out = check.apply(self.program, n)
        if out is None:
            _fail(Reason.GUARD_UNDEFINED, self.pc, f"{check} undefined at {n}")
        return out

    def csr_snapshot(self):
        conv = self.program.conv
        return tuple((r, self.regs[conv.index(r)]) for r in conv.csr)

    def finish(self, pc) -> OverlayState:
        m = MachineState(pc, self.sp, tuple(self.regs), self.mem)
        return OverlayState(m, tuple(self.rl), self.ml, self.stack)


def _writeable(s: _Step, n: int) -> bool:
    if not s.lay.in_any_stack(n):
        return True
    top = s.stack[0]
    return n >= top.base and n != top.ret_addr_loc


def _in_same_func(program: Program, a: int, b: int) -> bool:
    f = program.func_at.get(a)
    if f is None:
        return True                      # application addresses are exempt
    return b in f.addrs


def _fallthrough(s: _Step, priv: Privilege) -> int:
    nxt = s.pc + 1
    if priv is U and not _in_same_func(s.program, s.pc, nxt):
        _fail(Reason.CROSS_FUNCTION_JUMP, s.pc, f"fallthrough to {nxt} leaves the function")
    there = s.program.priv_at(nxt)
    if there is not None and there is not priv:
        _fail(Reason.PCINC_CROSSING, s.pc, "fallthrough crosses domains")
    return nxt


def _typechecks(s: _Step, target: int, sp1: int, arity: int):
    top = s.stack[0]
    if sp1 < top.ret_addr_loc + arity + 1:
        _fail(Reason.TYPECHECK_FAILED, s.pc,
              f"callee expects {arity} argument(s) above the caller's return address")


def _require_public(s: _Step, label, what):
    if label is not U:
        _fail(Reason.SECRET_FLOW, s.pc, f"{what} depends on a secret")


def _region(s: _Step, ok, detail):
    if not ok:
        _fail(Reason.REGION_VIOLATION, s.pc, detail)


def _csr_restored(s: _Step):
    for r, v in s.stack[0].csr_vals:
        now = s.regs[s.program.conv.index(r)]
        if now != v:
            _fail(Reason.CSR_NOT_RESTORED, s.pc, f"{r} is {now}, expected {v}")


def ostep(program: Program, o: OverlayState, policy):
    """One monitored step: (next overlay state, micro-ops), or None when halted.

    Raises MonitorError for the error state.
    """
    ent = program.code.get(o.machine.pc)
    if ent is None:
        return None
    priv, cmd = ent
    s = _Step(program, o)
    pc = s.pc
    lay = s.lay
    if isinstance(cmd, Mov):
        v, l = oeval(o, cmd.expr)
        if cmd.reg == "sp" and priv is U:
            _require_public(s, l, "stack pointer")
        s.set_reg(cmd.reg, v, l)
        return s.finish(_fallthrough(s, priv)), 1
    if isinstance(cmd, Push):
        v, l = oeval(o, cmd.expr)
        sp1 = s.sp + 1
        _region(s, any(ps.flows_to(cmd.priv) for ps in lay.stack_privs(sp1)),
                f"push to {sp1} outside {cmd.priv} stacks")
        if priv is U and not _writeable(s, sp1):
            _fail(Reason.WRITE_OUTSIDE_FRAME, pc, f"push to {sp1} outside the current frame")
        s.write(sp1, v, l)
        s.sp = sp1
        return s.finish(_fallthrough(s, priv)), 1
    if isinstance(cmd, Pop):
        _region(s, any(ps.flows_to(cmd.priv) for ps in lay.stack_privs(s.sp)),
                f"pop from {s.sp} outside {cmd.priv} stacks")
        v, l = s.read(s.sp)
        s.set_reg(cmd.reg, v, l)
        s.sp -= 1
        return s.finish(_fallthrough(s, priv)), 1
    if isinstance(cmd, Load):
        n, l = oeval(o, cmd.expr)
        if priv is U:
            _require_public(s, l, "load address")
        n = s.guard(cmd.check, n)
        v, lv = s.read(n)
        s.set_reg(cmd.reg, v, lv)
        return s.finish(_fallthrough(s, priv)), 1
    if isinstance(cmd, Store):
        n, l = oeval(o, cmd.addr)
        if priv is U:
            _require_public(s, l, "store address")
        n = s.guard(cmd.check, n)
        v, lv = oeval(o, cmd.value)
        if priv is U:
            if not _writeable(s, n):
                _fail(Reason.WRITE_OUTSIDE_FRAME, pc, f"store to {n} outside the current frame")
            if lv is T and lay.in_heap(U, n):
                _fail(Reason.SECRET_TO_LIB_HEAP, pc, f"secret value stored to library heap at {n}")
        s.write(n, v, lv)
        return s.finish(_fallthrough(s, priv)), 1
    if isinstance(cmd, Jmp):
        n, l = oeval(o, cmd.expr)
        if priv is U:
            _require_public(s, l, "jump target")
        n = s.guard(cmd.check, n)
        if priv is U and not _in_same_func(program, pc, n):
            _fail(Reason.CROSS_FUNCTION_JUMP, pc, f"jump to {n} leaves the function")
        return s.finish(n), 1
    if isinstance(cmd, Call):
        n, l = oeval(o, cmd.expr)
        if priv is U:
            _require_public(s, l, "call target")
        n = s.guard(cmd.check, n)
        sp1 = s.sp + 1
        _region(s, lay.in_any_stack(sp1), f"call pushes to {sp1} outside stacks")
        if priv is U:
            f = program.func_by_entry.get(n)
            if f is None:
                _fail(Reason.TYPECHECK_FAILED, pc, f"call target {n} is not a function entry")
            _typechecks(s, n, sp1, f.arity)
            s.stack = (Frame(sp1 - f.arity, sp1, s.csr_snapshot()),) + s.stack
        s.write(sp1, pc + 1, U)
        s.sp = sp1
        return s.finish(n), 1
    if isinstance(cmd, Ret):
        _region(s, lay.in_any_stack(s.sp), f"ret reads {s.sp} outside stacks")
        if priv is U and s.sp != s.stack[0].ret_addr_loc:
            _fail(Reason.RET_ADDR_MISMATCH, pc,
                  f"sp {s.sp} is not the return address slot {s.stack[0].ret_addr_loc}")
        v, _ = s.read(s.sp)
        n = s.guard(cmd.check, v)
        if priv is U:
            _csr_restored(s)
            s.stack = s.stack[1:]
        s.sp -= 1
        return s.finish(n), 1
    if isinstance(cmd, GateCall):
        return _gatecall(s, priv, cmd, policy)
    if isinstance(cmd, GateRet):
        return _gateret(s, priv)
    if isinstance(cmd, MovLabel):
        old = s.rl[int(cmd.reg[1:])]
        if not old.flows_to(cmd.priv) and not old.flows_to(priv):
            _fail(Reason.SECRET_FLOW, pc, f"cannot relabel {cmd.reg} to {cmd.priv}")
        s.rl[int(cmd.reg[1:])] = cmd.priv
        return s.finish(_fallthrough(s, priv)), 1
    if isinstance(cmd, StoreLabel):
        n, l = oeval(o, cmd.expr)
        if priv is U:
            _require_public(s, l, "relabel address")
        old = s.ml.get(n)
        if not old.flows_to(cmd.priv) and not old.flows_to(priv):
            _fail(Reason.SECRET_FLOW, pc, f"cannot relabel cell {n} to {cmd.priv}")
        s.ml = s.ml.set(n, cmd.priv)
        return s.finish(_fallthrough(s, priv)), 1
    raise TypeError(cmd)


def _gatecall(s: _Step, priv, cmd, policy):
    program, pc = s.program, s.pc
    target, _ = oeval(s.o, cmd.expr)
    if program.priv_at(target) is not priv.opposite():
        _fail(Reason.GUARD_UNDEFINED, pc, f"gate target {target} not in {priv.opposite()} code")
    sp1 = s.sp + 1
    if priv is T:
        o = classify(policy, program, s.o)
        s.rl, s.ml = list(o.reg_labels), o.mem_labels
        _region(s, s.lay.in_any_stack(sp1), f"gatecall pushes to {sp1} outside stacks")
        f = program.func_at.get(target)
        arity = f.arity if f is not None else 0
    else:
        if target not in program.imports:
            _fail(Reason.GUARD_UNDEFINED, pc, f"gate target {target} not an import")
        _region(s, s.lay.in_any_stack(sp1), f"gatecall pushes to {sp1} outside stacks")
        arity = cmd.nargs
        _typechecks(s, target, sp1, arity)
        for i in range(1, arity + 1):
            if s.ml.get(sp1 - i) is not U:
                _fail(Reason.ARGS_NOT_PUBLIC, pc, f"argument slot {sp1 - i} holds a secret")
    s.stack = (Frame(sp1 - arity, sp1, s.csr_snapshot()),) + s.stack
    s.write(sp1, pc + 1, U)
    s.sp = sp1
    return s.finish(target), 1


def _gateret(s: _Step, priv):
    program, pc = s.program, s.pc
    _region(s, s.lay.in_any_stack(s.sp), f"gateret reads {s.sp} outside stacks")
    if priv is U:
        if s.sp != s.stack[0].ret_addr_loc:
            _fail(Reason.RET_ADDR_MISMATCH, pc,
                  f"sp {s.sp} is not the return address slot {s.stack[0].ret_addr_loc}")
        _csr_restored(s)
        if s.rl[program.conv.index(program.conv.ret)] is not U:
            _fail(Reason.SECRET_FLOW, pc, "return value depends on a secret")
    target, _ = s.read(s.sp)
    if program.priv_at(target) is priv:
        _fail(Reason.GUARD_UNDEFINED, pc, f"gateret to {target} stays in {priv} code")
    if len(s.stack) > 1:
        s.stack = s.stack[1:]
    s.sp -= 1
    return s.finish(target), 1


@dataclass
class MonitoredTrace:
    initial: OverlayState
    records: list
    states: list
    outcome: Outcome
    error: Optional[OverlayError] = None

    def __len__(self):
        return len(self.records)

    @property
    def final(self) -> OverlayState:
        return self.states[-1]

    def erased_states(self) -> list:
        return [o.machine for o in self.states]

    def to_records(self) -> list:
        out = [{"type": "monitored-trace", "schema": SCHEMA_VERSION}]
        for r, o in zip(self.records, self.states):
            d = r.as_dict()
            top = o.stack[0]
            d["frame"] = {"base": top.base, "ret": top.ret_addr_loc, "depth": len(o.stack)}
            out.append(d)
        fin = self.final.machine
        out.append({"type": "outcome", "outcome": self.outcome.value, "steps": len(self.records),
                    "pc": fin.pc, "sp": fin.sp})
        if self.error is not None:
            out.append(self.error.as_dict())
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())


def run_monitored(program: Program, strategy=None, policy=None, fuel: int = 100000) -> MonitoredTrace:
    if strategy is not None and not isinstance(strategy, ZeroCost):
        raise ValueError("the monitor only models zero-cost gates")
    policy = policy or POLICIES["nacl-default"]
    o = initial_overlay(program)
    records, states = [], [o]
    outcome, err = None, None
    while True:
        if o.machine.pc not in program.code:
            outcome = Outcome.HALTED
            break
        if len(records) >= fuel:
            outcome = Outcome.FUEL
            break
        try:
            nxt, ops = ostep(program, o, policy)
        except MonitorError as e:
            outcome, err = Outcome.ERROR, e.error
            break
        priv, cmd = program.code[o.machine.pc]
        records.append(StepRecord(len(records), o.machine.pc, o.machine.sp, priv, cmd, ops))
        states.append(nxt)
        o = nxt
    return MonitoredTrace(states[0], records, states, outcome, err)


def check_refinement(program: Program, mtrace: MonitoredTrace, fuel: Optional[int] = None) -> list:
    """Compare a monitored run with the concrete zero-cost run; returns mismatches."""
    n = len(mtrace.records)
    concrete = run(program, ZeroCost(), n if fuel is None else fuel)
    out = []
    for i in range(n):
        if i >= len(concrete.records):
            out.append(f"concrete run stopped before step {i} ({concrete.outcome.value})")
            return out
        if concrete.records[i] != mtrace.records[i]:
            out.append(f"step {i}: record differs")
            return out
        if concrete.states[i + 1] != mtrace.states[i + 1].machine:
            out.append(f"step {i}: erased state differs")
            return out
    if mtrace.outcome is Outcome.HALTED and concrete.outcome is not Outcome.HALTED:
        out.append(f"monitored run halted but concrete run ended {concrete.outcome.value}")
    return out

"""Concrete small-step semantics, traces and the run loop."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .core import (
    Bin, Call, GateCall, GateRet, Jmp, Lit, Load, Mov, MovLabel, Pop, Privilege, Program,
    Push, Reg, Ret, Store, StoreLabel, Sym, apply_op,
)

SCHEMA_VERSION = 1


class Fault(str, enum.Enum):
    GUARD_UNDEFINED = "GuardUndefined"
    REGION_VIOLATION = "RegionViolation"
    PCINC_CROSSING = "PcIncCrossing"


class MachineError(Exception):
    """A step that lands in the Error state."""

    def __init__(self, fault: Fault, pc: int, detail: str):
        super().__init__(f"{fault.value} at pc {pc}: {detail}")
        self.fault, self.pc, self.detail = fault, pc, detail


@dataclass(frozen=True)
class MachineState:
    pc: int
    sp: int
    regs: tuple
    mem: Mapping[int, int] = field(default_factory=dict)

    def reg(self, name: str) -> int:
        if name == "sp":
            return self.sp
        if name == "pc":
            return self.pc
        return self.regs[int(name[1:])]

    def read(self, addr: int) -> int:
        return self.mem.get(addr, 0)

    def with_reg(self, name: str, value: int) -> "MachineState":
        if name == "sp":
            return MachineState(self.pc, value, self.regs, self.mem)
        i = int(name[1:])
        regs = self.regs[:i] + (value,) + self.regs[i + 1:]
        return MachineState(self.pc, self.sp, regs, self.mem)

    def with_mem(self, addr: int, value: int) -> "MachineState":
        mem = dict(self.mem)
        if value:
            mem[addr] = value
        else:
            mem.pop(addr, None)
        return MachineState(self.pc, self.sp, self.regs, mem)

    def moved(self, pc: int, sp: Optional[int] = None) -> "MachineState":
        return MachineState(pc, self.sp if sp is None else sp, self.regs, self.mem)


def initial_state(program: Program) -> MachineState:
    return MachineState(program.entry, program.layout.sp0, (0,) * program.conv.nregs,
                        program.initial_memory())


def eval_expr(state: MachineState, e) -> int:
    if isinstance(e, (Lit, Sym)):
        return e.value
    if isinstance(e, Reg):
        return state.reg(e.name)
    if isinstance(e, Bin):
        return apply_op(e.op, eval_expr(state, e.left), eval_expr(state, e.right))
    raise TypeError(e)


def guard(program: Program, check, n: int, pc: int) -> int:
    out = check.apply(program, n)
    if out is None:
        raise MachineError(Fault.GUARD_UNDEFINED, pc, f"{check} undefined at {n}")
    return out


def pcinc(program: Program, state: MachineState) -> MachineState:
    """Fallthrough to pc+1, refusing to slide into the other domain."""
    here = program.priv_at(state.pc)
    there = program.priv_at(state.pc + 1)
    if there is not None and there is not here:
        raise MachineError(Fault.PCINC_CROSSING, state.pc, "fallthrough crosses domains")
    return state.moved(state.pc + 1)


def stack_ok(program: Program, addr: int, p: Privilege) -> bool:
    """addr lies in a stack whose owner flows to p."""
    return any(ps.flows_to(p) for ps in program.layout.stack_privs(addr))


def exec_command(program: Program, state: MachineState, cmd) -> MachineState:
    """Effect of one non-gate command."""
    pc = state.pc
    if isinstance(cmd, Mov):
        v = eval_expr(state, cmd.expr)
        return pcinc(program, state.with_reg(cmd.reg, v))
    if isinstance(cmd, Push):
        v = eval_expr(state, cmd.expr)
        sp = state.sp + 1
        if not stack_ok(program, sp, cmd.priv):
            raise MachineError(Fault.REGION_VIOLATION, pc, f"push to {sp} outside {cmd.priv} stacks")
        s = state.with_mem(sp, v)
        return pcinc(program, s.moved(pc, sp))
    if isinstance(cmd, Pop):
        if not stack_ok(program, state.sp, cmd.priv):
            raise MachineError(Fault.REGION_VIOLATION, pc,
                               f"pop from {state.sp} outside {cmd.priv} stacks")
        s = state.with_reg(cmd.reg, state.read(state.sp))
        return pcinc(program, s.moved(pc, state.sp - 1))
    if isinstance(cmd, Load):
        n = guard(program, cmd.check, eval_expr(state, cmd.expr), pc)
        return pcinc(program, state.with_reg(cmd.reg, state.read(n)))
    if isinstance(cmd, Store):
        n = guard(program, cmd.check, eval_expr(state, cmd.addr), pc)
        return pcinc(program, state.with_mem(n, eval_expr(state, cmd.value)))
    if isinstance(cmd, Jmp):
        return state.moved(guard(program, cmd.check, eval_expr(state, cmd.expr), pc))
    if isinstance(cmd, Call):
        target = guard(program, cmd.check, eval_expr(state, cmd.expr), pc)
        sp = state.sp + 1
        if not program.layout.in_any_stack(sp):
            raise MachineError(Fault.REGION_VIOLATION, pc, f"call pushes to {sp} outside stacks")
        return state.with_mem(sp, pc + 1).moved(target, sp)
    if isinstance(cmd, Ret):
        if not program.layout.in_any_stack(state.sp):
            raise MachineError(Fault.REGION_VIOLATION, pc, f"ret reads {state.sp} outside stacks")
        target = guard(program, cmd.check, state.read(state.sp), pc)
        return state.moved(target, state.sp - 1)
    if isinstance(cmd, (MovLabel, StoreLabel)):
        return pcinc(program, state)
    raise TypeError(cmd)


@dataclass(frozen=True)
class StepRecord:
    index: int
    pc: int
    sp: int
    priv: Privilege
    cmd: object
    micro_ops: int = 1

    def as_dict(self) -> dict:
        return {"type": "step", "index": self.index, "pc": self.pc, "sp": self.sp,
                "priv": str(self.priv), "cmd": str(self.cmd), "micro_ops": self.micro_ops}


def step(program: Program, state: MachineState, strategy):
    """One reduction: (next state, micro-op count), or None when halted.

    Raises MachineError for the Error state.
    """
    ent = program.code.get(state.pc)
    if ent is None:
        return None
    cmd = ent[1]
    if isinstance(cmd, GateCall):
        return strategy.gatecall(program, state, cmd)
    if isinstance(cmd, GateRet):
        return strategy.gateret(program, state)
    return exec_command(program, state, cmd), 1


class Outcome(str, enum.Enum):
    HALTED = "halted"
    ERROR = "error"
    FUEL = "fuel-exhausted"


@dataclass
class Trace:
    initial: MachineState
    records: list
    states: list          # states[i] is the state before step i; states[-1] is final
    outcome: Outcome
    error: Optional[MachineError] = None

    def state_at(self, i: int) -> MachineState:
        return self.states[i]

    @property
    def final(self) -> MachineState:
        return self.states[-1]

    def __len__(self):
        return len(self.records)

    def outcome_record(self) -> dict:
        rec = {"type": "outcome", "outcome": self.outcome.value, "steps": len(self.records),
               "pc": self.final.pc, "sp": self.final.sp}
        if self.error is not None:
            rec["fault"] = self.error.fault.value
            rec["fault_pc"] = self.error.pc
            rec["detail"] = self.error.detail
        return rec

    def to_records(self) -> list:
        out = [{"type": "trace", "schema": SCHEMA_VERSION}]
        out.extend(r.as_dict() for r in self.records)
        out.append(self.outcome_record())
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())


def run_from(program: Program, state: MachineState, strategy, fuel: int,
             stop=None) -> Trace:
    """Run from an arbitrary state.

    stop(record, next_state) may end the run early (outcome HALTED) after a step.
    """
    records, states = [], [state]
    outcome, err = None, None
    while True:
        if state.pc not in program.code:
            outcome = Outcome.HALTED
            break
        if len(records) >= fuel:
            outcome = Outcome.FUEL
            break
        try:
            res = step(program, state, strategy)
        except MachineError as e:
            outcome, err = Outcome.ERROR, e
            break
        nxt, ops = res
        priv, cmd = program.code[state.pc]
        rec = StepRecord(len(records), state.pc, state.sp, priv, cmd, ops)
        records.append(rec)
        states.append(nxt)
        state = nxt
        if stop is not None and stop(rec, nxt):
            outcome = Outcome.HALTED
            break
    return Trace(states[0], records, states, outcome, err)


def run(program: Program, strategy, fuel: int = 100000) -> Trace:
    return run_from(program, initial_state(program), strategy, fuel)


def replay(program: Program, trace: Trace, strategy) -> bool:
    """Re-execute a trace from its initial state and compare everything."""
    fuel = len(trace.records) + (0 if trace.outcome is Outcome.FUEL else 1)
    again = run_from(program, trace.initial, strategy, fuel)
    return (again.records == trace.records and again.states == trace.states
            and again.outcome == trace.outcome)

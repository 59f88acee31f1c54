"""Gate semantics: zero-cost call/ret transitions and NaCl-style springboards."""

from __future__ import annotations

import enum

from .core import T, U, Privilege, Program
from .machine import Fault, MachineError, MachineState, eval_expr


class Direction(enum.Enum):
    APP_TO_LIB = "app->lib"
    LIB_TO_APP = "lib->app"


def _push_return(program: Program, state: MachineState) -> MachineState:
    sp = state.sp + 1
    if not program.layout.in_any_stack(sp):
        raise MachineError(Fault.REGION_VIOLATION, state.pc, f"gatecall pushes to {sp} outside stacks")
    return state.with_mem(sp, state.pc + 1).moved(state.pc, sp)


def _check_target(program: Program, pc: int, here: Privilege, target: int):
    if program.priv_at(target) is not here.opposite():
        raise MachineError(Fault.GUARD_UNDEFINED, pc, f"gate target {target} not in {here.opposite()} code")
    if here is U and target not in program.imports:
        raise MachineError(Fault.GUARD_UNDEFINED, pc, f"gate target {target} not an import")


def _check_return(program: Program, pc: int, here: Privilege, target: int):
    # returning past the end of code halts; landing in our own domain does not cross
    if program.priv_at(target) is here:
        raise MachineError(Fault.GUARD_UNDEFINED, pc, f"gateret to {target} stays in {here} code")


class ZeroCost:
    """Gates as plain call and return; one micro-op each."""

    name = "zero"

    def gatecall(self, program: Program, state: MachineState, cmd):
        here = program.priv_at(state.pc)
        target = eval_expr(state, cmd.expr)
        _check_target(program, state.pc, here, target)
        s = _push_return(program, state)
        return s.moved(target), 1

    def gateret(self, program: Program, state: MachineState):
        here = program.priv_at(state.pc)
        if not program.layout.in_any_stack(state.sp):
            raise MachineError(Fault.REGION_VIOLATION, state.pc, f"gateret reads {state.sp} outside stacks")
        target = state.read(state.sp)
        _check_return(program, state.pc, here, target)
        return state.moved(target, state.sp - 1), 1

    def __repr__(self):
        return "ZeroCost()"


class _Micro:
    """Mutable scratch machine running one template; counts instructions."""

    def __init__(self, program: Program, state: MachineState):
        self.program, self.layout = program, program.layout
        self.pc = state.pc
        self.sp = state.sp
        self.regs = list(state.regs)
        self.mem = dict(state.mem)
        self.ops = 0

    def fail(self, what):
        raise MachineError(Fault.REGION_VIOLATION, self.pc, what)

    def r(self, name):
        return self.sp if name == "sp" else self.regs[int(name[1:])]

    def mov(self, name, value):
        self.ops += 1
        if name == "sp":
            self.sp = value
        else:
            self.regs[int(name[1:])] = value

    def _ctx(self, addr):
        if not self.layout.in_heap(T, addr):
            self.fail(f"context access at {addr} outside application heap")

    def load_ctx(self, name, addr):
        self._ctx(addr)
        self.mov(name, self.mem.get(addr, 0))

    def store_ctx(self, addr, value):
        self._ctx(addr)
        self._write(addr, value)

    def _write(self, addr, value):
        self.ops += 1
        if value:
            self.mem[addr] = value
        else:
            self.mem.pop(addr, None)

    def store_stack(self, p, addr, value):
        if not self.layout.in_stack(p, addr):
            self.fail(f"argument copy to {addr} outside {p} stack")
        self._write(addr, value)

    def pop(self, name, p):
        if not self.layout.in_stack(p, self.sp):
            self.fail(f"argument read at {self.sp} outside {p} stack")
        self.ops += 1
        self.regs[int(name[1:])] = self.mem.get(self.sp, 0)
        self.sp -= 1

    def monus(self, a, b):
        return a - b if a > b else 0

    def state(self, pc) -> MachineState:
        return MachineState(pc, self.sp, tuple(self.regs), self.mem)


class NaClHeavy:
    """Gates as springboard/trampoline templates over a context stack in H_T."""

    name = "nacl"

    def gatecall(self, program: Program, state: MachineState, cmd):
        if program.layout.ctxstar is None:
            raise MachineError(Fault.REGION_VIOLATION, state.pc, "layout has no transition context")
        here = program.priv_at(state.pc)
        target = eval_expr(state, cmd.expr)      # before the template clobbers registers
        _check_target(program, state.pc, here, target)
        m = _Micro(program, _push_return(program, state))
        m.ops = 1
        if here is T:
            self._springboard(m, cmd.nargs)
        else:
            self._cb_springboard(m, cmd.nargs)
        m.ops += 1                               # final jmp
        return m.state(target), m.ops

    def gateret(self, program: Program, state: MachineState):
        if program.layout.ctxstar is None:
            raise MachineError(Fault.REGION_VIOLATION, state.pc, "layout has no transition context")
        here = program.priv_at(state.pc)
        m = _Micro(program, state)
        if here is U:
            self._trampoline(m)
        else:
            self._cb_trampoline(m)
        if not program.layout.in_any_stack(m.sp):
            m.fail(f"return address at {m.sp} outside stacks")
        target = m.mem.get(m.sp, 0)
        if here is T and program.priv_at(target) is not U:
            raise MachineError(Fault.GUARD_UNDEFINED, state.pc, f"callback return to {target} not library code")
        _check_return(program, state.pc, here, target)
        m.sp -= 1
        m.ops += 1                               # ret
        return m.state(target), m.ops

    @staticmethod
    def _springboard(m: _Micro, n: int):
        conv, lay = m.program.conv, m.layout
        csr = conv.csr
        m.load_ctx("r0", lay.ctxstar)
        m.load_ctx("r1", m.r("r0"))              # library sp
        for reg in reversed(csr):
            m.store_ctx(m.r("r0"), m.r(reg))
            m.mov("r0", m.r("r0") + 1)
        m.mov("r1", m.r("r1") + n)
        m.mov("sp", m.monus(m.r("sp"), 1))
        for _ in range(n):
            m.pop("r2", T)
            m.store_stack(U, m.r("r1"), m.r("r2"))
            m.mov("r1", m.monus(m.r("r1"), 1))
        m.mov("r2", m.r("sp") + n + 1)
        m.store_ctx(m.r("r0"), m.r("r2"))        # application sp, pointing at the return address
        m.mov("sp", m.r("r1") + n)
        m.store_ctx(lay.ctxstar, m.r("r0"))
        for reg in conv.clear:
            m.mov(reg, 0)

    @staticmethod
    def _trampoline(m: _Micro):
        conv, lay = m.program.conv, m.layout
        csr = conv.csr
        m.load_ctx("r0", lay.ctxstar)
        for reg in csr:
            m.mov("r0", m.monus(m.r("r0"), 1))
            m.load_ctx(reg, m.r("r0"))
        m.load_ctx("r0", lay.ctxstar)
        m.load_ctx("r1", m.r("r0"))              # application sp
        m.mov("r0", m.monus(m.r("r0"), len(csr)))
        m.store_ctx(m.r("r0"), m.r("sp"))        # library sp
        m.store_ctx(lay.ctxstar, m.r("r0"))
        m.mov("sp", m.r("r1"))

    @staticmethod
    def _cb_springboard(m: _Micro, n: int):
        lay = m.layout
        m.load_ctx("r0", lay.ctxstar)
        m.load_ctx("r1", m.r("r0"))              # application sp
        m.mov("r0", m.r("r0") + 1)
        m.store_ctx(m.r("r0"), m.r("sp"))        # library sp
        m.store_ctx(lay.ctxstar, m.r("r0"))
        m.mov("sp", m.monus(m.r("sp"), 1))
        m.mov("r1", m.r("r1") + n)
        for _ in range(n):
            m.pop("r2", U)
            m.store_stack(T, m.r("r1"), m.r("r2"))
            m.mov("r1", m.monus(m.r("r1"), 1))
        m.mov("sp", m.r("r1") + n)

    @staticmethod
    def _cb_trampoline(m: _Micro):
        conv, lay = m.program.conv, m.layout
        m.load_ctx("r0", lay.ctxstar)
        m.load_ctx("r1", m.r("r0"))              # library sp
        m.mov("r0", m.monus(m.r("r0"), 1))
        m.store_ctx(lay.ctxstar, m.r("r0"))
        m.mov("sp", m.r("r1"))
        for reg in conv.clear:
            m.mov(reg, 0)

    def __repr__(self):
        return "NaClHeavy()"


ZERO = ZeroCost()
NACL = NaClHeavy()
STRATEGIES = {"zero": ZERO, "nacl": NACL}


def gate_cost(strategy, direction: Direction, n_args: int = 0, ret: bool = False,
              ncsr: int = 4, nclear: int = 8) -> int:
    """Micro-ops reported for one gate crossing in the given direction.

    ret=False prices a gatecall, ret=True a gateret.
    """
    if isinstance(strategy, ZeroCost):
        return 1
    if direction is Direction.APP_TO_LIB:
        if ret:
            return 6 + nclear                    # callback return
        return 1 + 2 + 2 * ncsr + 2 + 3 * n_args + 4 + nclear + 1
    if ret:
        return 2 * ncsr + 8                      # library return
    return 1 + 2 + 3 + 2 + 3 * n_args + 1 + 1

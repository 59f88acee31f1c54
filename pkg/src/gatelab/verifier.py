"""Static zero-cost verifier: per-function CFG, dataflow over {Uninit, Init, Callee(r)}, checks."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .core import (
    Bin, Call, FuncMeta, GateCall, GateRet, Jmp, Lit, Load, Mov, MovLabel, Pop, Program, Push,
    Reg, Ret, Store, StoreLabel, Sym, T, U, apply_op, sp_offset,
)
from .machine import SCHEMA_VERSION

FRAME_LIMIT = 64
VALUE_SET_CAP = 512

CHECK_NAMES = {
    1: "csr-restoration",
    2: "well-bracketing",
    3: "frame-protection",
    4: "forward-cfi",
    5: "confidentiality",
    6: "memory-discipline",
    7: "public-return",
}
CFG = "cfg"


# Abstract values

@dataclass(frozen=True)
class AbsVal:
    kind: str                 # uninit | init | callee
    reg: Optional[str] = None

    def __str__(self):
        return f"Callee({self.reg})" if self.kind == "callee" else self.kind.capitalize()

    @property
    def is_callee(self):
        return self.kind == "callee"


UNINIT = AbsVal("uninit")
INIT = AbsVal("init")


def Callee(r: str) -> AbsVal:
    return AbsVal("callee", r)


def meet(a: AbsVal, b: AbsVal) -> AbsVal:
    return a if a == b else UNINIT


def leq(a: AbsVal, b: AbsVal) -> bool:
    return a == UNINIT or a == b


@dataclass(frozen=True)
class AbsFrame:
    regs: tuple                       # AbsVal per general register
    slots: tuple                      # sorted (offset, AbsVal); absent means Uninit
    sp_off: Optional[int]             # None is Invalid

    def reg(self, name: str) -> AbsVal:
        if name in ("sp", "pc"):
            return INIT
        return self.regs[int(name[1:])]

    def slot(self, off: int) -> AbsVal:
        for k, v in self.slots:
            if k == off:
                return v
        return UNINIT

    def with_reg(self, name: str, v: AbsVal) -> "AbsFrame":
        if name == "sp":
            raise ValueError("sp is tracked by offset")
        i = int(name[1:])
        return AbsFrame(self.regs[:i] + (v,) + self.regs[i + 1:], self.slots, self.sp_off)

    def with_slot(self, off: int, v: AbsVal) -> "AbsFrame":
        d = dict(self.slots)
        if v == UNINIT:
            d.pop(off, None)
        else:
            d[off] = v
        return AbsFrame(self.regs, tuple(sorted(d.items())), self.sp_off)

    def with_sp(self, sp_off) -> "AbsFrame":
        return AbsFrame(self.regs, self.slots, sp_off)

    def drop_slots_above(self, off: int) -> "AbsFrame":
        return AbsFrame(self.regs, tuple((k, v) for k, v in self.slots if k <= off), self.sp_off)

    def join(self, other: "AbsFrame") -> "AbsFrame":
        regs = tuple(meet(a, b) for a, b in zip(self.regs, other.regs))
        mine, theirs = dict(self.slots), dict(other.slots)
        slots = tuple(sorted((k, v) for k, v in mine.items() if theirs.get(k) == v))
        sp = self.sp_off if self.sp_off == other.sp_off else None
        return AbsFrame(regs, slots, sp)

    def __str__(self):
        regs = " ".join(f"r{i}={v}" for i, v in enumerate(self.regs))
        slots = " ".join(f"[{k}]={v}" for k, v in self.slots)
        sp = "Invalid" if self.sp_off is None else self.sp_off
        return f"sp+{sp} {regs} {slots}".rstrip()


def entry_frame(program: Program, func: FuncMeta) -> AbsFrame:
    conv = program.conv
    regs = tuple(Callee(r) if r in conv.csr else UNINIT for r in conv.regs)
    slots = {-i: INIT for i in range(1, func.arity + 1)}
    slots[0] = INIT                                   # return address
    return AbsFrame(regs, tuple(sorted(slots.items())), 0)


# Value sets: frozenset of naturals, or None for "any value"

def value_set(e) -> Optional[frozenset]:
    if isinstance(e, (Lit, Sym)):
        return frozenset([e.value])
    if isinstance(e, Reg):
        return None
    if isinstance(e, Bin):
        a, b = value_set(e.left), value_set(e.right)
        if e.op == "mul" and (a == {0} or b == {0}):
            return frozenset([0])
        if e.op == "monus" and a is not None and b is None:
            return frozenset(range(max(a) + 1))
        if a is None or b is None or len(a) * len(b) > VALUE_SET_CAP * 4:
            return None
        out = frozenset(apply_op(e.op, x, y) for x in a for y in b)
        return out if len(out) <= VALUE_SET_CAP else None
    raise TypeError(e)


# CFG

@dataclass(frozen=True)
class Block:
    start: int
    addrs: tuple
    succs: tuple


@dataclass(frozen=True)
class Cfg:
    func: FuncMeta
    blocks: tuple

    @property
    def edges(self) -> list:
        return [(b.start, s) for b in self.blocks for s in b.succs]


@dataclass(frozen=True)
class Finding:
    pc: Optional[int]
    check: str
    message: str

    def as_dict(self):
        return {"pc": self.pc, "check": self.check, "message": self.message}

    def __str__(self):
        where = "-" if self.pc is None else self.pc
        return f"{where} {self.check}: {self.message}"


class CfgRejected(Exception):
    def __init__(self, findings):
        super().__init__("; ".join(str(f) for f in findings))
        self.findings = findings


def _successors(program: Program, func: FuncMeta, pc: int, cmd, out: list) -> tuple:
    """Intra-function successors of one instruction; records shape rejections in out."""
    if isinstance(cmd, (Ret, GateRet)):
        return ()
    if isinstance(cmd, Jmp):
        targets = value_set(cmd.expr)
        if targets is None:
            out.append(Finding(pc, CFG, "non-constant jump target"))
            return ()
        bad = sorted(t for t in targets if t not in func.addrs)
        if bad:
            out.append(Finding(pc, CFG, f"cross-function jump to {bad[0]}"))
            return ()
        return tuple(sorted(targets))
    nxt = pc + 1
    if nxt not in func.addrs:
        out.append(Finding(pc, CFG, "fallthrough leaves the function"))
        return ()
    return (nxt,)


def build_cfg(program: Program, func: FuncMeta) -> Cfg:
    """Basic blocks over func's instruction range; raises CfgRejected on bad control flow."""
    rejections = []
    succ = {}
    for pc in func.addrs:
        succ[pc] = _successors(program, func, pc, program.code[pc][1], rejections)
        cmd = program.code[pc][1]
        if isinstance(cmd, Call):
            _resolve_call(program, pc, cmd, rejections)
    if rejections:
        raise CfgRejected(rejections)
    leaders = {func.addrs[0], func.entry}
    for pc in func.addrs:
        cmd = program.code[pc][1]
        ends = isinstance(cmd, (Jmp, Ret, GateRet, Call, GateCall))
        if ends and pc + 1 in func.addrs:
            leaders.add(pc + 1)
        if isinstance(cmd, Jmp):
            leaders.update(succ[pc])
    starts = sorted(leaders)
    blocks = []
    for i, s in enumerate(starts):
        end = starts[i + 1] if i + 1 < len(starts) else func.addrs[-1] + 1
        addrs = tuple(range(s, end))
        blocks.append(Block(s, addrs, succ[addrs[-1]]))
    return Cfg(func, tuple(blocks))


def _resolve_call(program: Program, pc: int, cmd, out: list):
    """Arity of a library call target, or None after recording why it is unresolvable."""
    k = cmd.check
    name = CHECK_NAMES[4]
    if k.kind == "table":
        names = program.tables.get(k.table)
        if names is None:
            out.append(Finding(pc, name, f"unknown table {k.table}"))
            return None
        funcs = [program.func_by_name[n] for n in names]
        if not funcs:
            out.append(Finding(pc, name, f"empty table {k.table}"))
            return None
        if any(f.exported for f in funcs):
            out.append(Finding(pc, name, f"table {k.table} holds an exported function"))
            return None
        if len({f.arity for f in funcs}) != 1:
            out.append(Finding(pc, name, f"table {k.table} mixes arities"))
            return None
        idx = value_set(cmd.expr)
        if idx is None or not all(0 <= i < len(funcs) for i in idx):
            out.append(Finding(pc, name, f"table index may fall outside {k.table}"))
            return None
        return funcs[0].arity
    if k.kind == "code" and k.priv is U:
        target = value_set(cmd.expr)
        if target is None or len(target) != 1:
            out.append(Finding(pc, name, "call target is not constant"))
            return None
        (t,) = target
        f = program.func_by_entry.get(t)
        if f is None:
            out.append(Finding(pc, name, f"call target {t} is not a function entry"))
            return None
        if f.exported:
            out.append(Finding(pc, name, f"call to exported function {f.name}"))
            return None
        return f.arity
    out.append(Finding(pc, name, f"call guard {k} cannot be resolved"))
    return None


# Transfer

def abs_expr(frame: AbsFrame, e) -> AbsVal:
    if isinstance(e, (Lit, Sym)):
        return INIT
    if isinstance(e, Reg):
        return frame.reg(e.name)
    # a computed value is initialized only when every operand is;
    # combining saved values does not preserve them
    vals = [abs_expr(frame, x) for x in (e.left, e.right)]
    return INIT if all(v == INIT for v in vals) else UNINIT


def _stack_off(frame: AbsFrame, cmd) -> Optional[int]:
    """Frame offset addressed by a stack-form load/store, else None."""
    if cmd.check.kind == "heap":
        return None
    c = sp_offset(cmd.expr if isinstance(cmd, Load) else cmd.addr)
    if c is None or frame.sp_off is None:
        return None
    return frame.sp_off + c


def _call_arity(program: Program, pc: int, cmd) -> Optional[int]:
    if isinstance(cmd, GateCall):
        return cmd.nargs
    return _resolve_call(program, pc, cmd, [])


def transfer(frame: AbsFrame, cmd, program: Program, pc: Optional[int] = None) -> AbsFrame:
    conv = program.conv
    if isinstance(cmd, Mov):
        if cmd.reg == "sp":
            c = sp_offset(cmd.expr)
            return frame.with_sp(None if c is None else frame.sp_off + c)
        return frame.with_reg(cmd.reg, abs_expr(frame, cmd.expr))
    if isinstance(cmd, Push):
        off = frame.sp_off + 1
        return frame.with_slot(off, abs_expr(frame, cmd.expr)).with_sp(off)
    if isinstance(cmd, Pop):
        v = frame.slot(frame.sp_off)
        if cmd.reg == "sp":
            return frame.with_sp(None)
        return frame.with_reg(cmd.reg, v).with_sp(frame.sp_off - 1)
    if isinstance(cmd, Load):
        off = _stack_off(frame, cmd)
        v = frame.slot(off) if off is not None else INIT
        if cmd.reg == "sp":
            return frame.with_sp(None)
        return frame.with_reg(cmd.reg, v)
    if isinstance(cmd, Store):
        off = _stack_off(frame, cmd)
        if off is None:
            return frame
        return frame.with_slot(off, abs_expr(frame, cmd.value))
    if isinstance(cmd, (Call, GateCall)):
        m = _call_arity(program, pc, cmd) or 0
        out = frame.drop_slots_above(frame.sp_off - m)
        for r in conv.scratch:
            out = out.with_reg(r, UNINIT)
        return out.with_reg(conv.ret, INIT)
    if isinstance(cmd, MovLabel):
        if cmd.priv is T:
            return frame.with_reg(cmd.reg, UNINIT)
        return frame
    return frame


# Analysis

def analyze_function(program: Program, func: FuncMeta, cfg: Optional[Cfg] = None) -> dict:
    """Least fixpoint: map from reachable pc to the AbsFrame before it."""
    if cfg is None:
        cfg = build_cfg(program, func)
    succ = {}
    for b in cfg.blocks:
        for i, pc in enumerate(b.addrs):
            succ[pc] = (b.addrs[i + 1],) if i + 1 < len(b.addrs) else b.succs
    frames = {func.entry: entry_frame(program, func)}
    work = deque([func.entry])
    while work:
        pc = work.popleft()
        f = frames[pc]
        if f.sp_off is None or f.sp_off > FRAME_LIMIT:
            continue
        nxt = transfer(f, program.code[pc][1], program, pc)
        for s in succ[pc]:
            old = frames.get(s)
            new = nxt if old is None else old.join(nxt)
            if new != old:
                frames[s] = new
                work.append(s)
    return frames


def _operand_findings(pc, frame, exprs, out):
    name = CHECK_NAMES[5]
    for e in exprs:
        for r in _regs(e):
            v = frame.reg(r)
            if v != INIT:
                out.append(Finding(pc, name, f"operand {r} is {v}"))


def _regs(e):
    if isinstance(e, Reg):
        return [] if e.name in ("sp", "pc") else [e.name]
    if isinstance(e, Bin):
        return _regs(e.left) + _regs(e.right)
    return []


def _saves_callee(frame, e) -> bool:
    return isinstance(e, Reg) and e.name not in ("sp", "pc") and frame.reg(e.name).is_callee


def check_function(program: Program, func: FuncMeta, frames: dict) -> list:
    conv, lay = program.conv, program.layout
    out = []
    invalid_seen = False
    for pc in sorted(frames):
        f = frames[pc]
        cmd = program.code[pc][1]
        if f.sp_off is None:
            if not invalid_seen:
                out.append(Finding(pc, CHECK_NAMES[2], "stack pointer offset unknown"))
                invalid_seen = True
            continue
        if f.sp_off > FRAME_LIMIT:
            out.append(Finding(pc, CHECK_NAMES[2], f"frame exceeds {FRAME_LIMIT} slots"))
            continue
        if isinstance(cmd, (Ret, GateRet)):
            for r in conv.csr:
                if f.reg(r) != Callee(r):
                    out.append(Finding(pc, CHECK_NAMES[1], f"{r} is {f.reg(r)} at exit"))
            if f.sp_off != 0:
                out.append(Finding(pc, CHECK_NAMES[2], f"exit with sp offset {f.sp_off}"))
            want = GateRet if func.exported else Ret
            if not isinstance(cmd, want):
                kind = "exported" if func.exported else "internal"
                out.append(Finding(pc, CHECK_NAMES[2], f"{kind} function exits with {cmd}"))
            if f.reg(conv.ret) != INIT:
                out.append(Finding(pc, CHECK_NAMES[7], f"{conv.ret} is {f.reg(conv.ret)} at exit"))
            continue
        if isinstance(cmd, Mov):
            if cmd.reg == "sp":
                if sp_offset(cmd.expr) is None:
                    out.append(Finding(pc, CHECK_NAMES[2], "stack pointer set to a non-offset value"))
            elif not _saves_callee(f, cmd.expr):
                _operand_findings(pc, f, [cmd.expr], out)
        elif isinstance(cmd, Push):
            off = f.sp_off + 1
            _frame_write(pc, func, off, out)
            if not _saves_callee(f, cmd.expr):
                _operand_findings(pc, f, [cmd.expr], out)
        elif isinstance(cmd, Pop):
            if cmd.reg == "sp":
                out.append(Finding(pc, CHECK_NAMES[2], "stack pointer popped"))
        elif isinstance(cmd, (Load, Store)):
            addr = cmd.expr if isinstance(cmd, Load) else cmd.addr
            off = _stack_off(f, cmd)
            if off is not None:
                if isinstance(cmd, Store):
                    _frame_write(pc, func, off, out)
                    if not _saves_callee(f, cmd.value):
                        _operand_findings(pc, f, [cmd.value], out)
                elif cmd.reg == "sp":
                    out.append(Finding(pc, CHECK_NAMES[2], "stack pointer loaded from memory"))
            elif cmd.check.kind == "heap" and cmd.check.priv is U:
                _operand_findings(pc, f, [addr] + ([cmd.value] if isinstance(cmd, Store) else []), out)
                vs = value_set(addr)
                if vs is None or not all(lay.in_heap(U, a) for a in vs):
                    out.append(Finding(pc, CHECK_NAMES[6], "heap address may leave the library heap"))
                if isinstance(cmd, Load) and cmd.reg == "sp":
                    out.append(Finding(pc, CHECK_NAMES[2], "stack pointer loaded from memory"))
            else:
                out.append(Finding(pc, CHECK_NAMES[6], f"memory access {cmd} is neither heap.U nor sp-relative"))
        elif isinstance(cmd, Jmp):
            _operand_findings(pc, f, [cmd.expr], out)
        elif isinstance(cmd, Call):
            _operand_findings(pc, f, [cmd.expr], out)
            found = []
            m = _resolve_call(program, pc, cmd, found)
            out.extend(found)
            if m is not None:
                _args_ready(pc, f, m, out)
        elif isinstance(cmd, GateCall):
            target = value_set(cmd.expr)
            if target is None or len(target) != 1 or next(iter(target)) not in program.imports:
                out.append(Finding(pc, CHECK_NAMES[4], "gatecall target is not an import"))
            _args_ready(pc, f, cmd.nargs, out)
        elif isinstance(cmd, MovLabel):
            if cmd.priv is U and f.reg(cmd.reg) != INIT:
                out.append(Finding(pc, CHECK_NAMES[5], f"declassifies {cmd.reg} holding {f.reg(cmd.reg)}"))
        elif isinstance(cmd, StoreLabel):
            out.append(Finding(pc, CHECK_NAMES[5], "library relabels memory"))
    return out


def _frame_write(pc, func, off, out):
    if off == 0:
        out.append(Finding(pc, CHECK_NAMES[3], "write to the return address slot"))
    elif off < -func.arity:
        k = -func.arity - off
        out.append(Finding(pc, CHECK_NAMES[3], f"write {k} slot{'s' if k > 1 else ''} below the frame"))
    elif off > FRAME_LIMIT:
        out.append(Finding(pc, CHECK_NAMES[2], f"write beyond the {FRAME_LIMIT}-slot frame"))


def _args_ready(pc, f, m, out):
    if f.sp_off < m:
        out.append(Finding(pc, CHECK_NAMES[4], f"{m} argument(s) overlap the return address"))
        return
    for i in range(m):
        v = f.slot(f.sp_off - i)
        if v != INIT:
            out.append(Finding(pc, CHECK_NAMES[4], f"argument {m - i} is {v}"))


# Reports

@dataclass(frozen=True)
class FunctionVerdict:
    name: str
    findings: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.findings


@dataclass(frozen=True)
class VerdictReport:
    functions: tuple = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return all(f.ok for f in self.functions)

    @property
    def findings(self) -> list:
        return [x for f in self.functions for x in f.findings]

    def checks_failed(self) -> set:
        return {x.check for x in self.findings}

    def to_records(self) -> list:
        out = [{"type": "verdict-report", "schema": SCHEMA_VERSION}]
        for f in self.functions:
            out.append({"type": "function", "function": f.name,
                        "verdict": "pass" if f.ok else "fail",
                        "violations": [x.as_dict() for x in f.findings]})
        out.append({"type": "library", "verdict": "pass" if self.ok else "fail"})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def to_text(self) -> str:
        lines = []
        for f in self.functions:
            lines.append(f"{f.name}: {'pass' if f.ok else 'fail'}")
            lines.extend(f"  {x}" for x in f.findings)
        lines.append(f"library: {'pass' if self.ok else 'fail'}")
        return "\n".join(lines) + "\n"


def verify_function(program: Program, func: FuncMeta) -> FunctionVerdict:
    try:
        cfg = build_cfg(program, func)
    except CfgRejected as e:
        return FunctionVerdict(func.name, tuple(e.findings))
    frames = analyze_function(program, func, cfg)
    found = check_function(program, func, frames)
    # one finding per (pc, check, message), in program order
    seen, uniq = set(), []
    for x in found:
        if x not in seen:
            seen.add(x)
            uniq.append(x)
    return FunctionVerdict(func.name, tuple(uniq))


def verify_library(program: Program) -> VerdictReport:
    funcs = sorted(program.funcs, key=lambda f: f.entry)
    return VerdictReport(tuple(verify_function(program, f) for f in funcs))

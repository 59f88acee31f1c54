"""Language definitions: privileges, expressions, guards, commands, layouts and programs."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional


class Privilege(enum.Enum):
    T = "T"
    U = "U"

    def flows_to(self, other: "Privilege") -> bool:
        # U flows everywhere, T only to T
        return self is Privilege.U or other is Privilege.T

    def join(self, other: "Privilege") -> "Privilege":
        if self is Privilege.T or other is Privilege.T:
            return Privilege.T
        return Privilege.U

    def opposite(self) -> "Privilege":
        return Privilege.U if self is Privilege.T else Privilege.T

    def __str__(self):
        return self.value


T = Privilege.T
U = Privilege.U


@dataclass(frozen=True)
class Conventions:
    """Register file shape and calling convention."""

    nregs: int = 8
    csr: tuple = ("r4", "r5", "r6", "r7")
    scratch: tuple = ("r0", "r1", "r2", "r3")
    ret: str = "r0"
    clear: tuple = ("r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7")

    @property
    def regs(self) -> tuple:
        return tuple(f"r{i}" for i in range(self.nregs))

    def index(self, name: str) -> int:
        return int(name[1:])


DEFAULT_CONV = Conventions()


# Expressions

@dataclass(frozen=True)
class Lit:
    value: int

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class Sym:
    """A label reference, kept by name so programs can be re-laid out."""

    name: str
    value: int

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Reg:
    name: str

    def __str__(self):
        return self.name


OPS = {"add": "+", "monus": "-", "mul": "*"}
_PREC = {"add": 1, "monus": 1, "mul": 2}


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Expr"
    right: "Expr"

    def __str__(self):
        prec = _PREC[self.op]
        left = _wrap(self.left, prec, False)
        right = _wrap(self.right, prec, True)
        return f"{left} {OPS[self.op]} {right}"


Expr = object  # Lit | Sym | Reg | Bin


def _wrap(e, prec, right_side):
    s = str(e)
    if isinstance(e, Bin):
        p = _PREC[e.op]
        if p < prec or (right_side and p == prec):
            return f"({s})"
    return s


def registers_in(e) -> list:
    if isinstance(e, Reg):
        return [e.name]
    if isinstance(e, Bin):
        return registers_in(e.left) + registers_in(e.right)
    return []


def const_value(e) -> Optional[int]:
    """Value of a register-free expression, else None."""
    if isinstance(e, (Lit, Sym)):
        return e.value
    if isinstance(e, Bin):
        a, b = const_value(e.left), const_value(e.right)
        if a is None or b is None:
            return None
        return apply_op(e.op, a, b)
    return None


def apply_op(op: str, a: int, b: int) -> int:
    if op == "add":
        return a + b
    if op == "monus":
        return a - b if a > b else 0
    if op == "mul":
        return a * b
    raise ValueError(op)


def sp_offset(e) -> Optional[int]:
    """Offset c when e has the shape sp, sp + c or sp - c (c constant)."""
    if isinstance(e, Reg) and e.name == "sp":
        return 0
    if isinstance(e, Bin) and e.op in ("add", "monus") and e.left == Reg("sp"):
        c = const_value(e.right)
        if c is None:
            return None
        return c if e.op == "add" else -c
    return None


# Guards

@dataclass(frozen=True)
class Check:
    kind: str  # id mem heap stack code imports table
    priv: Optional[Privilege] = None
    table: Optional[str] = None

    def __str__(self):
        if self.kind in ("id", "imports"):
            return self.kind
        if self.kind == "table":
            return f"table.{self.table}"
        return f"{self.kind}.{self.priv}"

    def apply(self, program: "Program", n: int) -> Optional[int]:
        kind = self.kind
        if kind == "id":
            return n
        lay = program.layout
        if kind == "mem":
            ok = lay.in_mem(self.priv, n)
        elif kind == "heap":
            ok = lay.in_heap(self.priv, n)
        elif kind == "stack":
            ok = lay.in_stack(self.priv, n)
        elif kind == "code":
            ent = program.code.get(n)
            ok = ent is not None and ent[0] is self.priv
        elif kind == "imports":
            ok = n in program.imports
        elif kind == "table":
            entries = program.table_addrs.get(self.table, ())
            return entries[n] if 0 <= n < len(entries) else None
        else:
            raise ValueError(kind)
        return n if ok else None


ID = Check("id")


# Commands

@dataclass(frozen=True)
class Pop:
    reg: str
    priv: Privilege

    def __str__(self):
        return f"pop {self.reg}, {self.priv}"


@dataclass(frozen=True)
class Push:
    priv: Privilege
    expr: Expr

    def __str__(self):
        return f"push {self.priv}, {self.expr}"


@dataclass(frozen=True)
class Jmp:
    check: Check
    expr: Expr

    def __str__(self):
        return f"jmp {self.check}({self.expr})"


@dataclass(frozen=True)
class Load:
    reg: str
    check: Check
    expr: Expr

    def __str__(self):
        return f"load {self.reg}, {self.check}({self.expr})"


@dataclass(frozen=True)
class Store:
    check: Check
    addr: Expr
    value: Expr

    def __str__(self):
        return f"store {self.check}({self.addr}), {self.value}"


@dataclass(frozen=True)
class GateCall:
    nargs: int
    expr: Expr

    def __str__(self):
        return f"gatecall {self.nargs}, {self.expr}"


@dataclass(frozen=True)
class GateRet:
    def __str__(self):
        return "gateret"


@dataclass(frozen=True)
class Mov:
    reg: str
    expr: Expr

    def __str__(self):
        return f"mov {self.reg}, {self.expr}"


@dataclass(frozen=True)
class Call:
    check: Check
    expr: Expr

    def __str__(self):
        return f"call {self.check}({self.expr})"


@dataclass(frozen=True)
class Ret:
    check: Check = ID

    def __str__(self):
        return f"ret {self.check}"


@dataclass(frozen=True)
class MovLabel:
    reg: str
    priv: Privilege

    def __str__(self):
        return f"movlabel {self.reg}, {self.priv}"


@dataclass(frozen=True)
class StoreLabel:
    priv: Privilege
    expr: Expr

    def __str__(self):
        return f"storelabel {self.priv}, {self.expr}"


# Layout

@dataclass(frozen=True)
class Layout:
    h_t: tuple
    s_t: tuple
    h_u: tuple
    s_u: tuple
    shared: bool = False
    ctxstar: Optional[int] = None
    ctx: Optional[int] = None
    sp0: int = 0

    def heap(self, p: Privilege) -> tuple:
        return self.h_t if p is T else self.h_u

    def stack(self, p: Privilege) -> tuple:
        return self.s_t if p is T else self.s_u

    def in_heap(self, p, n) -> bool:
        lo, hi = self.heap(p)
        return lo <= n < hi

    def in_stack(self, p, n) -> bool:
        lo, hi = self.stack(p)
        return lo <= n < hi

    def in_mem(self, p, n) -> bool:
        return self.in_heap(p, n) or self.in_stack(p, n)

    def in_any_stack(self, n) -> bool:
        return self.in_stack(T, n) or self.in_stack(U, n)

    def stack_privs(self, n) -> list:
        return [p for p in (T, U) if self.in_stack(p, n)]

    def bound(self) -> int:
        return max(r[1] for r in (self.h_t, self.s_t, self.h_u, self.s_u))

    def initial_memory(self) -> dict:
        if self.ctxstar is None:
            return {}
        return {self.ctxstar: self.ctx, self.ctx: self.s_u[0] - 1}


NACL_DEFAULT = Layout(h_t=(0, 128), s_t=(128, 256), h_u=(256, 384), s_u=(384, 512),
                      ctxstar=0, ctx=8, sp0=127)
ZEROCOST_DEFAULT = Layout(h_t=(0, 256), s_t=(512, 1024), h_u=(256, 512), s_u=(512, 1024),
                          shared=True, sp0=511)

NAMED_LAYOUTS = {"nacl-default": NACL_DEFAULT, "zerocost-default": ZEROCOST_DEFAULT}


def region_of(layout: Layout, addr: int) -> frozenset:
    """Names of the regions containing addr; empty when outside every region."""
    out = set()
    if layout.in_heap(T, addr):
        out.add("H_T")
    if layout.in_heap(U, addr):
        out.add("H_U")
    if layout.in_stack(T, addr):
        out.add("S_T")
    if layout.in_stack(U, addr):
        out.add("S_U")
    return frozenset(out)


# Programs

@dataclass(frozen=True)
class FuncMeta:
    name: str
    entry: int
    arity: int
    addrs: range
    exported: bool = False


@dataclass(frozen=True)
class Program:
    code: Mapping[int, tuple]
    layout: Layout = ZEROCOST_DEFAULT
    labels: Mapping[str, int] = field(default_factory=dict)
    imports: frozenset = frozenset()
    funcs: tuple = ()
    tables: Mapping[str, tuple] = field(default_factory=dict)
    memory: Mapping[int, int] = field(default_factory=dict)
    entry: int = 0
    conv: Conventions = DEFAULT_CONV

    @cached_property
    def func_at(self) -> dict:
        out = {}
        for f in self.funcs:
            for a in f.addrs:
                out[a] = f
        return out

    @cached_property
    def func_by_name(self) -> dict:
        return {f.name: f for f in self.funcs}

    @cached_property
    def func_by_entry(self) -> dict:
        return {f.entry: f for f in self.funcs}

    @cached_property
    def table_addrs(self) -> dict:
        return {name: tuple(self.func_by_name[f].entry for f in names)
                for name, names in self.tables.items()}

    def priv_at(self, addr) -> Optional[Privilege]:
        ent = self.code.get(addr)
        return ent[0] if ent else None

    def initial_memory(self) -> dict:
        mem = self.layout.initial_memory()
        mem.update(self.memory)
        return {a: v for a, v in mem.items() if v}

    def label_for(self, addr) -> Optional[str]:
        names = sorted(n for n, a in self.labels.items() if a == addr)
        return names[0] if names else None


# Well-formedness

class Discipline(enum.Enum):
    NACL = "nacl"
    ZEROCOST = "zerocost"


@dataclass(frozen=True)
class Violation:
    pc: Optional[int]
    message: str

    def __str__(self):
        return self.message if self.pc is None else f"pc {self.pc}: {self.message}"


def _cf_guard_ok(program, p, cmd) -> bool:
    k = cmd.check
    if k.kind == "code" and k.priv is p:
        return True
    if k.kind == "table":
        return all(program.priv_at(a) is p for a in program.table_addrs.get(k.table, ()))
    return False


def well_formed(program: Program, discipline: Discipline) -> list:
    """Static discipline conditions; an empty list means the program conforms."""
    discipline = Discipline(discipline)
    out = []
    if discipline is Discipline.NACL:
        for pc in sorted(program.code):
            p, cmd = program.code[pc]
            if p is U and isinstance(cmd, (Pop, Push)) and cmd.priv is not U:
                out.append(Violation(pc, "library stack access not annotated Untrusted"))
            if p is U and isinstance(cmd, (Load, Store)):
                k = cmd.check
                if not (k.kind in ("mem", "heap", "stack") and k.priv is U):
                    out.append(Violation(pc, "library memory access not confined to sandbox memory"))
            if isinstance(cmd, (Call, Ret, Jmp)) and not _cf_guard_ok(program, p, cmd):
                side = "library" if p is U else "application"
                out.append(Violation(pc, f"unguarded control flow in {side}"))
    else:
        for pc in sorted(program.code):
            p, cmd = program.code[pc]
            f = program.func_at.get(pc)
            if p is T:
                if f is not None:
                    out.append(Violation(pc, f"function {f.name} contains application code"))
                continue
            if f is None:
                out.append(Violation(pc, "library code not partitioned into functions"))
            if isinstance(cmd, (Load, Store)):
                k = cmd.check
                addr = cmd.expr if isinstance(cmd, Load) else cmd.addr
                heap_ok = k.kind == "heap" and k.priv is U
                stack_ok = (sp_offset(addr) is not None
                            and (k.kind == "id" or (k.kind in ("stack", "mem") and k.priv is U)))
                if not (heap_ok or stack_ok):
                    out.append(Violation(pc, "library memory access not guarded heap.U"))
            elif isinstance(cmd, Jmp):
                if not (cmd.check.kind == "code" and cmd.check.priv is U):
                    out.append(Violation(pc, "unguarded control flow in library"))
            elif isinstance(cmd, Call):
                if not _cf_guard_ok(program, U, cmd):
                    out.append(Violation(pc, "unguarded control flow in library"))
            elif isinstance(cmd, GateCall):
                target = const_value(cmd.expr)
                if target is None or target not in program.imports:
                    out.append(Violation(pc, "library gatecall target not an import"))
    if program.priv_at(program.entry) is not T:
        out.append(Violation(None, "entry pc not in application code"))
    if discipline is Discipline.NACL:
        lay = program.layout
        if lay.ctxstar is None:
            out.append(Violation(None, "layout has no transition context"))
        else:
            if not (lay.in_heap(T, lay.ctxstar) and lay.in_heap(T, lay.ctx)):
                out.append(Violation(None, "transition context outside application heap"))
            mem = program.initial_memory()
            if mem.get(lay.ctxstar, 0) != lay.ctx or mem.get(lay.ctx, 0) != lay.s_u[0] - 1:
                out.append(Violation(None, "transition context not initialized"))
    for a in sorted(program.imports):
        if program.priv_at(a) is not T:
            out.append(Violation(a, "import is not application code"))
    return out

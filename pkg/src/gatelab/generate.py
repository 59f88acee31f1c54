"""Random zero-cost programs, seeded attack mutations, and the NaCl-discipline translation."""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, replace

from .asm import parse_asm, pretty_print
from .core import NACL_DEFAULT, Check, GateCall, Load, Program, Store, T, U, const_value


@dataclass(frozen=True)
class GenParams:
    min_funcs: int = 1
    max_funcs: int = 6
    max_arity: int = 3
    min_calls: int = 1
    max_calls: int = 4
    max_items: int = 5
    callback_prob: float = 0.35
    force_callback: bool = False
    precall_prob: float = 0.6
    export_prob: float = 0.35


DEFAULT_PARAMS = GenParams()

SCRATCH = ("r1", "r2", "r3")
CSRS = ("r4", "r5", "r6", "r7")
HEAP_LO, HEAP_HI = 256, 356


@dataclass
class _FuncSpec:
    index: int
    name: str
    arity: int
    exported: bool


class _Body:
    """Emits one function body while tracking the stack offset and initialized registers."""

    def __init__(self, gen: "_Gen", spec: _FuncSpec):
        self.g, self.rng, self.spec = gen, gen.rng, spec
        self.lines = []
        self.sp = 0
        self.init = set()
        self.locals = []
        self.saved = []

    def emit(self, text):
        self.lines.append(f"    {text}")

    def label(self, stem):
        self.g.nlabels += 1
        return f"{self.spec.name}_{stem}{self.g.nlabels}"

    def place(self, name):
        self.lines.append(f"{name}:")

    def slot(self, off):
        d = self.sp - off
        if d == 0:
            return "sp"
        return f"sp - {d}" if d > 0 else f"sp + {-d}"

    def operand(self):
        regs = sorted(self.init)
        if regs and self.rng.random() < 0.6:
            return self.rng.choice(regs)
        return str(self.rng.randint(0, 9))

    def expr(self):
        a = self.operand()
        shape = self.rng.randrange(4)
        if shape == 0:
            return a
        if shape == 1:
            return f"{a} + {self.operand()}"
        if shape == 2:
            return f"{a} - {self.operand()}"
        return f"{a} * {self.rng.randint(0, 3)}"

    def dest(self):
        pool = list(SCRATCH) + ["r0"] + self.saved
        return self.rng.choice(pool)

    # items

    def arith(self):
        r = self.dest()
        self.emit(f"mov {r}, {self.expr()}")
        self.init.add(r)

    def arg_load(self):
        if not self.spec.arity:
            return self.arith()
        r = self.rng.choice(SCRATCH)
        j = self.rng.randint(1, self.spec.arity)
        self.emit(f"load {r}, stack.U({self.slot(-j)})")
        self.init.add(r)

    def local_op(self):
        if not self.locals:
            return self.arith()
        off = self.rng.choice(self.locals)
        if self.rng.random() < 0.5:
            self.emit(f"store stack.U({self.slot(off)}), {self.operand()}")
        else:
            r = self.rng.choice(SCRATCH)
            self.emit(f"load {r}, stack.U({self.slot(off)})")
            self.init.add(r)

    def heap_addr(self):
        regs = sorted(self.init)
        if regs and self.rng.random() < 0.3:
            r = self.rng.choice(regs)
            return f"{HEAP_LO} + (64 - (64 - {r}))"
        return str(self.rng.randrange(HEAP_LO, HEAP_HI))

    def heap_op(self):
        if self.rng.random() < 0.5:
            self.emit(f"store heap.U({self.heap_addr()}), {self.operand()}")
        else:
            addr = self.heap_addr()
            r = self.rng.choice(SCRATCH)
            self.emit(f"load {r}, heap.U({addr})")
            self.init.add(r)

    def push_args(self, m):
        for _ in range(m):
            self.emit(f"push U, {self.operand()}")
            self.sp += 1

    def after_call(self, m):
        if m:
            self.emit(f"mov sp, sp - {m}")
            self.sp -= m
        self.init -= set(SCRATCH)
        self.init.add("r0")

    def direct_call(self):
        callees = self.g.callees(self.spec.index)
        if not callees:
            return self.arith()
        f = self.rng.choice(callees)
        self.push_args(f.arity)
        self.emit(f"call code.U({f.name})")
        self.after_call(f.arity)

    def table_call(self):
        tables = self.g.usable_tables(self.spec.index)
        if not tables:
            return self.direct_call()
        name, funcs = self.rng.choice(tables)
        m = funcs[0].arity
        c = len(funcs) - 1
        regs = sorted(self.init)
        idx = f"{c} - ({c} - {self.rng.choice(regs)})" if regs else str(self.rng.randint(0, c))
        self.push_args(m)
        self.emit(f"call table.{name}({idx})")
        self.after_call(m)

    def callback(self):
        if not self.g.callbacks:
            return self.arith()
        name, m, _ = self.rng.choice(self.g.callbacks)
        self.push_args(m)
        self.emit(f"gatecall {m}, {name}")
        self.after_call(m)

    def branch_reg(self):
        regs = sorted(r for r in self.init if r in SCRATCH or r == "r0")
        if regs:
            return self.rng.choice(regs)
        r = self.rng.choice(SCRATCH)
        self.emit(f"mov {r}, {self.rng.randint(0, 1)}")
        self.init.add(r)
        return r

    def diamond(self):
        r = self.branch_reg()
        lt, le, lj = self.label("then"), self.label("else"), self.label("join")
        self.emit(f"jmp code.U({lt} + (1 - {r}) * ({le} - {lt}))")
        before = set(self.init)
        self.place(lt)
        for _ in range(self.rng.randint(1, 2)):
            self.simple(calls=True)
        self.emit(f"jmp code.U({lj})")
        after_then = self.init
        self.init = set(before)
        self.place(le)
        for _ in range(self.rng.randint(1, 2)):
            self.simple(calls=True)
        self.init &= after_then
        self.place(lj)

    def loop(self):
        n = self.rng.randint(1, 3)
        self.emit(f"push U, {n}")
        self.sp += 1
        counter = self.sp
        head, done = self.label("loop"), self.label("done")
        self.place(head)
        for _ in range(self.rng.randint(1, 2)):
            self.simple(calls=False)
        r = self.rng.choice(SCRATCH)
        self.emit(f"load {r}, stack.U({self.slot(counter)})")
        self.emit(f"mov {r}, {r} - 1")
        self.emit(f"store stack.U({self.slot(counter)}), {r}")
        self.emit(f"jmp code.U({head} + (1 - {r}) * ({done} - {head}))")
        self.init.add(r)
        self.place(done)
        self.emit("mov sp, sp - 1")
        self.sp -= 1

    def simple(self, calls):
        opts = [self.arith, self.arg_load, self.local_op, self.heap_op]
        if calls:
            opts += [self.direct_call, self.callback]
        self.rng.choice(opts)()

    def item(self):
        opts = [self.arith, self.arg_load, self.local_op, self.heap_op, self.heap_op,
                self.direct_call, self.table_call, self.callback, self.diamond, self.loop]
        self.rng.choice(opts)()

    # whole function

    def precall(self):
        callees = [f for f in self.g.callees(self.spec.index) if f.arity > 0]
        if not callees:
            return
        f = self.rng.choice(callees)
        for _ in range(f.arity):
            self.emit(f"push U, {self.rng.randint(0, 9)}")
            self.sp += 1
        self.emit(f"call code.U({f.name})")
        self.after_call(f.arity)

    def build(self, precall: bool, force_callback: bool) -> list:
        spec = self.spec
        if precall:
            self.precall()
        self.saved = sorted(self.rng.sample(CSRS, self.rng.randint(1, 3)))
        for r in self.saved:
            self.emit(f"push U, {r}")
            self.sp += 1
        for r in self.saved:
            self.emit(f"mov {r}, {self.g.constant()}")
            self.init.add(r)
        for _ in range(self.rng.randint(0, 2)):
            self.emit(f"push U, {self.rng.randint(0, 9)}")
            self.sp += 1
            self.locals.append(self.sp)
        if force_callback:
            self.callback()
        for _ in range(self.rng.randint(1, self.g.params.max_items)):
            self.item()
        regs = sorted(self.init)
        if regs:
            self.emit(f"mov r0, {self.rng.choice(regs)} + {self.rng.randint(0, 9)}")
        else:
            self.emit(f"mov r0, {self.rng.randint(0, 9)}")
        if self.locals:
            self.emit(f"mov sp, sp - {len(self.locals)}")
            self.sp -= len(self.locals)
        for r in reversed(self.saved):
            self.emit(f"pop {r}, U")
            self.sp -= 1
        assert self.sp == 0
        self.emit("gateret" if spec.exported else "ret code.U")
        head = f".func {spec.name} arity={spec.arity}" + (" exported" if spec.exported else "")
        return [head] + self.lines + [".endfunc"]


class _Gen:
    def __init__(self, seed, params: GenParams):
        self.rng = random.Random(f"gen:{seed}")
        self.params = params
        self.nlabels = 0
        self.used_constants = set()
        self.funcs = []
        self.tables = {}
        self.callbacks = []

    def constant(self):
        while True:
            k = self.rng.randrange(10, 1000)
            if k not in self.used_constants:
                self.used_constants.add(k)
                return k

    def callees(self, i):
        return [f for f in self.funcs if f.index > i and not f.exported]

    def usable_tables(self, i):
        return [(name, fs) for name, fs in sorted(self.tables.items())
                if min(f.index for f in fs) > i]

    def source(self) -> str:
        p, rng = self.params, self.rng
        k = rng.randint(p.min_funcs, p.max_funcs)
        for i in range(k):
            exported = i == 0 or rng.random() < p.export_prob
            self.funcs.append(_FuncSpec(i, f"f{i}", rng.randint(0, p.max_arity), exported))
        by_arity = {}
        for f in self.funcs:
            if not f.exported:
                by_arity.setdefault(f.arity, []).append(f)
        for a, fs in sorted(by_arity.items()):
            self.tables[f"t{a}"] = fs
        want_cb = p.force_callback or rng.random() < p.callback_prob
        if want_cb:
            for j in range(rng.randint(1, 2)):
                self.callbacks.append((f"cb{j}", rng.randint(1, 2), rng.randint(1, 9)))

        lib = []
        for f in self.funcs:
            body = _Body(self, f)
            precall = f.index == 0 and rng.random() < p.precall_prob
            lib += body.build(precall, force_callback=(f.index == 0 and p.force_callback))

        out = [".layout zerocost-default"]
        if self.callbacks:
            out.append(".imports " + ", ".join(c[0] for c in self.callbacks))
        for name, fs in sorted(self.tables.items()):
            out.append(f".table {name} = [{', '.join(f.name for f in fs)}]")
        out.append(".lib")
        out += lib
        out.append(".app")
        for name, m, c in self.callbacks:
            out += [f"{name}:", "    load r0, stack.T(sp - 1)", f"    mov r0, r0 + {c}", "    gateret"]
        out += self.driver()
        return "\n".join(out) + "\n"

    def driver(self) -> list:
        rng, p = self.rng, self.params
        lines = ["main:"]
        for _ in range(rng.randint(4, 6)):
            lines.append(f"    push T, {rng.randint(1, 1 << 16)}")
        for r in CSRS:
            lines.append(f"    mov {r}, {5000 + rng.randrange(5000)}")
        for r in ("r0",) + SCRATCH:
            lines.append(f"    mov {r}, {rng.randint(1, 1 << 16)}")
        for j in range(rng.randint(1, 4)):
            lines.append(f"    store heap.T({100 + j}), {rng.randint(1, 1 << 16)}")
        exported = [f for f in self.funcs if f.exported]
        calls = [exported[0]] + [rng.choice(exported)
                                 for _ in range(rng.randint(p.min_calls, p.max_calls) - 1)]
        for c, f in enumerate(calls):
            for _ in range(f.arity):
                lines.append(f"    push T, {rng.randint(0, 9)}")
            lines.append(f"    gatecall {f.arity}, {f.name}")
            if f.arity:
                lines.append(f"    mov sp, sp - {f.arity}")
            lines.append(f"    store heap.T({120 + c}), r0")
        return lines


def gen_source(seed, params: GenParams = DEFAULT_PARAMS) -> str:
    return _Gen(seed, params).source()


def gen_library(seed, params: GenParams = DEFAULT_PARAMS) -> Program:
    """A zero-cost-discipline program (library plus driver) determined by seed."""
    return parse_asm(gen_source(seed, params))


# Mutations

class MutationKind(str, enum.Enum):
    SKIP_CSR_RESTORE = "SkipCsrRestore"
    CLOBBER_CSR_THEN_RET = "ClobberCsrThenRet"
    READ_UNINIT_SCRATCH = "ReadUninitScratch"
    STORE_BELOW_FRAME = "StoreBelowFrame"
    OVERWRITE_RET_ADDR = "OverwriteRetAddr"
    WRONG_ARITY_CALL = "WrongArityCall"
    CROSS_FUNCTION_JMP = "CrossFunctionJmp"
    TAMPER_SP_BEFORE_RET = "TamperSpBeforeRet"
    LEAK_SECRET_TO_LIB_HEAP = "LeakSecretToLibHeap"


# kind -> (verifier check names, monitor reasons); any listed item counts as the expected one
ATTACK_TABLE = {
    MutationKind.SKIP_CSR_RESTORE: ({"csr-restoration"}, {"CsrNotRestored"}),
    MutationKind.CLOBBER_CSR_THEN_RET: ({"csr-restoration"}, {"CsrNotRestored"}),
    MutationKind.READ_UNINIT_SCRATCH: ({"confidentiality"}, {"SecretFlow", "SecretToLibHeap"}),
    MutationKind.STORE_BELOW_FRAME: ({"frame-protection"}, {"WriteOutsideFrame"}),
    MutationKind.OVERWRITE_RET_ADDR: ({"frame-protection"}, {"WriteOutsideFrame"}),
    MutationKind.WRONG_ARITY_CALL: ({"forward-cfi"}, {"TypecheckFailed"}),
    MutationKind.CROSS_FUNCTION_JMP: ({"cfg"}, {"CrossFunctionJump"}),
    MutationKind.TAMPER_SP_BEFORE_RET: ({"well-bracketing"}, {"RetAddrMismatch"}),
    MutationKind.LEAK_SECRET_TO_LIB_HEAP: ({"confidentiality"}, {"SecretToLibHeap"}),
}


class NotApplicable(Exception):
    """The program has no site for the requested mutation."""


def first_export(program: Program):
    """The library function entered by the first trusted gatecall in the driver."""
    for a in sorted(program.code):
        if a < program.entry:
            continue
        p, cmd = program.code[a]
        if p is T and isinstance(cmd, GateCall):
            f = program.func_by_entry.get(const_value(cmd.expr))
            if f is not None:
                return f
    raise NotApplicable("driver makes no gatecall into a library function")


def mutate(program: Program, kind: MutationKind, seed) -> Program:
    kind = MutationKind(kind)
    rng = random.Random(f"{kind.value}:{seed}")
    f = first_export(program)
    lines = pretty_print(program).splitlines()
    start = next(i for i, ln in enumerate(lines)
                 if ln.split()[:2] == [".func", f.name])
    end = next(i for i in range(start, len(lines)) if lines[i] == ".endfunc")
    body = range(start + 1, end)

    def find(pred):
        return [i for i in body if pred(lines[i].strip())]

    def at_entry(text):
        lines.insert(start + 1, f"    {text}")

    def before_exit(text):
        (i,) = find(lambda s: s == "gateret")
        lines.insert(i, f"    {text}")

    def drop_restore(reg=None):
        pops = find(lambda s: s.startswith("pop r") and s.endswith(", U") and s[4:6] in CSRS)
        if reg is not None:
            pops = [i for i in pops if lines[i].strip()[4:6] == reg]
        if not pops:
            return None
        i = rng.choice(pops)
        reg = lines[i].strip()[4:6]
        lines[i] = "    mov sp, sp - 1"
        return reg

    if kind is MutationKind.SKIP_CSR_RESTORE:
        if drop_restore() is None:
            raise NotApplicable("no callee-save restore")
    elif kind is MutationKind.CLOBBER_CSR_THEN_RET:
        reg = drop_restore() or rng.choice(CSRS)
        before_exit(f"mov {reg}, {rng.randint(1000, 2000)}")
    elif kind is MutationKind.READ_UNINIT_SCRATCH:
        at_entry(f"store heap.U({rng.randrange(HEAP_LO, HEAP_HI)}), {rng.choice(SCRATCH)}")
    elif kind is MutationKind.STORE_BELOW_FRAME:
        at_entry(f"store id(sp - {f.arity + 1 + rng.randint(0, 2)}), r0")
    elif kind is MutationKind.OVERWRITE_RET_ADDR:
        at_entry("store id(sp), 9999")
    elif kind is MutationKind.WRONG_ARITY_CALL:
        calls = find(lambda s: s.startswith("call "))
        if not calls:
            raise NotApplicable("no call")
        ci = calls[0]
        pushes = list(range(start + 1, ci))
        if not pushes or not all(lines[i].strip().startswith("push U, ") for i in pushes):
            raise NotApplicable("first call does not open the function")
        m = len(pushes)
        if lines[ci + 1].strip() != f"mov sp, sp - {m}":
            raise NotApplicable("call not followed by argument cleanup")
        if m == 1:
            del lines[ci + 1]
        else:
            lines[ci + 1] = f"    mov sp, sp - {m - 1}"
        del lines[ci - 1]
    elif kind is MutationKind.CROSS_FUNCTION_JMP:
        others = [g.name for g in program.funcs if g.name != f.name]
        if not others:
            raise NotApplicable("single-function library")
        at_entry(f"jmp code.U({rng.choice(others)})")
    elif kind is MutationKind.TAMPER_SP_BEFORE_RET:
        before_exit("mov sp, sp + 1")
    elif kind is MutationKind.LEAK_SECRET_TO_LIB_HEAP:
        at_entry(f"store heap.U({rng.randrange(HEAP_LO, HEAP_HI)}), {rng.choice(CSRS)}")
    return parse_asm("\n".join(lines) + "\n", program.conv)


def mutants(kind: MutationKind, count: int, params: GenParams = DEFAULT_PARAMS, start: int = 0):
    """First `count` (seed, program) instances of kind over consecutive generator seeds."""
    out, seed = [], start
    while len(out) < count:
        try:
            out.append((seed, mutate(gen_library(seed, params), kind, seed)))
        except NotApplicable:
            pass
        seed += 1
    return out


# NaCl-discipline translation

def to_nacl(program: Program) -> Program:
    """Same code on the NaCl layout, library memory accesses confined to sandbox memory.

    Function metadata stays: indirect-call tables resolve through it.
    """
    sandbox = Check("mem", U)
    code = {}
    for a, (p, cmd) in program.code.items():
        if p is U and isinstance(cmd, (Load, Store)):
            cmd = replace(cmd, check=sandbox)
        code[a] = (p, cmd)
    return replace(program, code=code, layout=NACL_DEFAULT)

"""Two-pass assembler and pretty printer for the gated assembly text format."""

from __future__ import annotations

import re

from .core import (
    DEFAULT_CONV, ID, NAMED_LAYOUTS, Bin, Call, Check, FuncMeta, GateCall,
    GateRet, Jmp, Layout, Lit, Load, Mov, MovLabel, Pop, Privilege, Program, Push, Reg, Ret,
    Store, StoreLabel, Sym,
)


class AsmError(Exception):
    def __init__(self, message, line=None, col=None):
        self.line, self.col = line, col
        where = "" if line is None else f"line {line}" + ("" if col is None else f":{col}")
        super().__init__(f"{where}: {message}" if where else message)


_TOKEN = re.compile(r"\s*(?:(0x[0-9a-fA-F]+|\d+)|([A-Za-z_][\w.]*)|(\S))")
_LABEL = re.compile(r"^([A-Za-z_]\w*)\s*:(.*)$")
_RANGE = re.compile(r"^(\d+)\.\.(\d+)$")


def _tokens(text, line, col0):
    out, pos = [], 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            break
        if m.group(0).strip() == "":
            break
        num, ident, punct = m.groups()
        col = col0 + m.start(m.lastindex)
        if num is not None:
            out.append(("num", int(num, 0), col))
        elif ident is not None:
            out.append(("id", ident, col))
        else:
            out.append(("p", punct, col))
        pos = m.end()
    return out


class _Parser:
    """Recursive-descent parser for one command's operands."""

    def __init__(self, toks, line, labels, conv):
        self.toks, self.i, self.line = toks, 0, line
        self.labels, self.conv = labels, conv

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def error(self, msg):
        tok = self.peek()
        raise AsmError(msg, self.line, tok[2] if tok else None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok is None or (kind and tok[0] != kind) or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            self.error(f"expected {want}")
        self.i += 1
        return tok

    def end(self):
        if self.peek() is not None:
            self.error(f"unexpected {self.peek()[1]!r}")

    def reg(self, allow_sp=False):
        tok = self.take("id")
        name = tok[1]
        if name in self.conv.regs or (allow_sp and name == "sp"):
            return name
        raise AsmError(f"bad register {name!r}", self.line, tok[2])

    def priv(self):
        tok = self.take("id")
        if tok[1] not in ("T", "U"):
            raise AsmError(f"bad privilege {tok[1]!r}", self.line, tok[2])
        return Privilege(tok[1])

    def check(self):
        tok = self.take("id")
        name = tok[1]
        if name in ("id", "imports"):
            return Check(name)
        kind, _, rest = name.partition(".")
        if kind in ("mem", "heap", "stack", "code") and rest in ("T", "U"):
            return Check(kind, Privilege(rest))
        if kind == "table" and rest:
            return Check("table", table=rest)
        raise AsmError(f"bad guard {name!r}", self.line, tok[2])

    def number(self):
        return self.take("num")[1]

    def expr(self):
        e = self.term()
        while self.peek() and self.peek()[1] in ("+", "-") and self.peek()[0] == "p":
            op = "add" if self.take()[1] == "+" else "monus"
            e = Bin(op, e, self.term())
        return e

    def term(self):
        e = self.atom()
        while self.peek() and self.peek()[0] == "p" and self.peek()[1] == "*":
            self.take()
            e = Bin("mul", e, self.atom())
        return e

    def atom(self):
        tok = self.peek()
        if tok is None:
            self.error("expected expression")
        if tok[0] == "num":
            self.i += 1
            return Lit(tok[1])
        if tok[0] == "p" and tok[1] == "(":
            self.i += 1
            e = self.expr()
            self.take("p", ")")
            return e
        if tok[0] == "id":
            self.i += 1
            name = tok[1]
            if name in self.conv.regs or name in ("sp", "pc"):
                return Reg(name)
            if name not in self.labels:
                raise AsmError(f"unknown label {name!r}", self.line, tok[2])
            return Sym(name, self.labels[name])
        self.error(f"unexpected {tok[1]!r}")

    def guarded(self):
        k = self.check()
        self.take("p", "(")
        e = self.expr()
        self.take("p", ")")
        return k, e

    def comma(self):
        self.take("p", ",")

    def command(self, mnemonic):
        if mnemonic == "pop":
            r = self.reg(); self.comma(); p = self.priv()
            cmd = Pop(r, p)
        elif mnemonic == "push":
            p = self.priv(); self.comma()
            cmd = Push(p, self.expr())
        elif mnemonic == "jmp":
            cmd = Jmp(*self.guarded())
        elif mnemonic == "load":
            r = self.reg(); self.comma()
            k, e = self.guarded()
            cmd = Load(r, k, e)
        elif mnemonic == "store":
            k, a = self.guarded(); self.comma()
            cmd = Store(k, a, self.expr())
        elif mnemonic == "gatecall":
            n = self.number(); self.comma()
            cmd = GateCall(n, self.expr())
        elif mnemonic == "gateret":
            cmd = GateRet()
        elif mnemonic == "mov":
            r = self.reg(allow_sp=True); self.comma()
            cmd = Mov(r, self.expr())
        elif mnemonic == "call":
            cmd = Call(*self.guarded())
        elif mnemonic == "ret":
            cmd = Ret(self.check() if self.peek() else ID)
        elif mnemonic == "movlabel":
            r = self.reg(); self.comma()
            cmd = MovLabel(r, self.priv())
        elif mnemonic == "storelabel":
            p = self.priv(); self.comma()
            cmd = StoreLabel(p, self.expr())
        else:
            raise AsmError(f"unknown mnemonic {mnemonic!r}", self.line)
        self.end()
        return cmd


def parse_command(text, labels=None, conv=DEFAULT_CONV, line=None):
    """Parse a single command line (no label prefix)."""
    toks = _tokens(text, line, 1)
    if not toks or toks[0][0] != "id":
        raise AsmError("expected a command", line)
    p = _Parser(toks[1:], line, labels or {}, conv)
    return p.command(toks[0][1].lower())


def _strip(line):
    return line.split(";", 1)[0].strip()


def _parse_layout(args, lineno):
    if not args:
        raise AsmError("missing layout", lineno)
    if args[0] in NAMED_LAYOUTS:
        if len(args) > 1:
            raise AsmError("named layouts take no arguments", lineno)
        return NAMED_LAYOUTS[args[0]]
    if args[0] != "custom":
        raise AsmError(f"unknown layout {args[0]!r}", lineno)
    vals = {"shared": False}
    for a in args[1:]:
        if a == "shared":
            vals["shared"] = True
            continue
        key, eq, val = a.partition("=")
        if not eq:
            raise AsmError(f"bad layout field {a!r}", lineno)
        if key in ("h_t", "s_t", "h_u", "s_u"):
            m = _RANGE.match(val)
            if not m:
                raise AsmError(f"bad range {val!r}", lineno)
            vals[key] = (int(m.group(1)), int(m.group(2)))
        elif key in ("ctxstar", "ctx", "sp0"):
            vals[key] = int(val, 0)
        else:
            raise AsmError(f"unknown layout field {key!r}", lineno)
    for key in ("h_t", "s_t", "h_u", "s_u"):
        if key not in vals:
            raise AsmError(f"layout missing {key}", lineno)
    if vals["shared"] and vals["s_t"] != vals["s_u"]:
        raise AsmError("shared layout needs s_t == s_u", lineno)
    if ("ctxstar" in vals) != ("ctx" in vals):
        raise AsmError("ctxstar and ctx go together", lineno)
    lay = Layout(**vals)
    regions = [lay.h_t, lay.h_u, lay.s_t] + ([] if lay.shared else [lay.s_u])
    for i, a in enumerate(regions):
        for b in regions[i + 1:]:
            if a[0] < b[1] and b[0] < a[1]:
                raise AsmError("layout regions overlap", lineno)
    return lay


def parse_asm(text: str, conv=DEFAULT_CONV) -> Program:
    """Assemble source text into a Program."""
    layout = None
    section = None
    addr = 0
    labels, label_lines = {}, {}
    pending = []            # (addr, priv, command text, line, col)
    funcs, open_func = [], None
    tables, table_lines = {}, {}
    imports_raw, mem_raw = [], []
    entry_raw = None

    def define(name, value, lineno):
        if name in labels:
            raise AsmError(f"duplicate label {name!r}", lineno)
        labels[name] = value
        label_lines[name] = lineno

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        m = _LABEL.match(line)
        if m and not line.startswith("."):
            define(m.group(1), addr, lineno)
            line = m.group(2).strip()
            if not line:
                continue
        if line.startswith("."):
            word, _, rest = line.partition(" ")
            rest = rest.strip()
            args = rest.split()
            if word == ".layout":
                layout = _parse_layout(args, lineno)
            elif word in (".app", ".lib"):
                if open_func:
                    raise AsmError("section change inside .func", lineno)
                section = Privilege.T if word == ".app" else Privilege.U
            elif word == ".func":
                if section is not Privilege.U:
                    raise AsmError(".func outside .lib", lineno)
                if open_func:
                    raise AsmError("nested .func", lineno)
                if not args:
                    raise AsmError(".func needs a name", lineno)
                arity, exported = 0, False
                for a in args[1:]:
                    if a.startswith("arity="):
                        try:
                            arity = int(a[6:])
                        except ValueError:
                            raise AsmError(f"bad arity {a!r}", lineno)
                    elif a == "exported":
                        exported = True
                    else:
                        raise AsmError(f"unknown .func option {a!r}", lineno)
                define(args[0], addr, lineno)
                open_func = (args[0], addr, arity, exported, lineno)
            elif word == ".endfunc":
                if not open_func:
                    raise AsmError(".endfunc without .func", lineno)
                name, start, arity, exported, fl = open_func
                if addr <= start:
                    raise AsmError(f"function {name!r} is empty", fl)
                funcs.append(FuncMeta(name, start, arity, range(start, addr), exported))
                open_func = None
            elif word == ".table":
                m2 = re.match(r"^([A-Za-z_]\w*)\s*=\s*\[(.*)\]$", rest)
                if not m2:
                    raise AsmError("bad .table", lineno)
                if m2.group(1) in tables:
                    raise AsmError(f"duplicate table {m2.group(1)!r}", lineno)
                names = tuple(x.strip() for x in m2.group(2).split(",") if x.strip())
                tables[m2.group(1)] = names
                table_lines[m2.group(1)] = lineno
            elif word == ".imports":
                imports_raw.extend((x.strip(), lineno) for x in rest.split(",") if x.strip())
            elif word == ".mem":
                m2 = re.match(r"^(\S+)\s*=\s*(\S+)$", rest)
                if not m2:
                    raise AsmError("bad .mem", lineno)
                mem_raw.append((m2.group(1), m2.group(2), lineno))
            elif word == ".entry":
                entry_raw = (rest, lineno)
            elif word == ".org":
                if open_func:
                    raise AsmError(".org inside .func", lineno)
                try:
                    addr = int(rest, 0)
                except ValueError:
                    raise AsmError("bad .org", lineno)
            elif word == ".equ":
                m2 = re.match(r"^([A-Za-z_]\w*)\s*=\s*(\S+)$", rest)
                if not m2:
                    raise AsmError("bad .equ", lineno)
                define(m2.group(1), int(m2.group(2), 0), lineno)
            else:
                raise AsmError(f"unknown directive {word}", lineno)
            continue
        if section is None:
            raise AsmError("command outside .app/.lib", lineno)
        col = raw.find(line) + 1
        pending.append((addr, section, line, lineno, col))
        addr += 1
    if open_func:
        raise AsmError(f"unterminated .func {open_func[0]!r}", open_func[4])

    def resolve(tok, lineno):
        try:
            return int(tok, 0)
        except ValueError:
            if tok not in labels:
                raise AsmError(f"unknown label {tok!r}", lineno)
            return labels[tok]

    code = {}
    for a, priv, line, lineno, col in pending:
        if a in code:
            raise AsmError(f"address {a} assigned twice", lineno)
        toks = _tokens(line, lineno, col)
        if not toks or toks[0][0] != "id":
            raise AsmError("expected a command", lineno, col)
        cmd = _Parser(toks[1:], lineno, labels, conv).command(toks[0][1].lower())
        code[a] = (priv, cmd)

    fnames = {f.name for f in funcs}
    for name, names in tables.items():
        for n in names:
            if n not in fnames:
                raise AsmError(f"table {name!r} references unknown function {n!r}", table_lines[name])
    for a, (priv, cmd) in code.items():
        k = getattr(cmd, "check", None)
        if k is not None and k.kind == "table" and k.table not in tables:
            raise AsmError(f"unknown table {k.table!r}", None)
    funcs.sort(key=lambda f: f.entry)
    for f, g in zip(funcs, funcs[1:]):
        if f.addrs.stop > g.addrs.start:
            raise AsmError(f"functions {f.name!r} and {g.name!r} overlap")
    for f in funcs:
        for a in f.addrs:
            if a not in code:
                raise AsmError(f"function {f.name!r} has a gap at {a}")

    imports = frozenset(resolve(x, ln) for x, ln in imports_raw)
    memory = {}
    for a, v, ln in mem_raw:
        memory[resolve(a, ln)] = resolve(v, ln)
    if entry_raw is not None:
        entry = resolve(*entry_raw)
    elif "main" in labels:
        entry = labels["main"]
    else:
        entry = 0
    return Program(code=code, layout=layout or NAMED_LAYOUTS["zerocost-default"], labels=labels,
                   imports=imports, funcs=tuple(funcs), tables=tables, memory=memory,
                   entry=entry, conv=conv)


def _layout_text(lay: Layout) -> str:
    for name, named in NAMED_LAYOUTS.items():
        if lay == named:
            return name
    parts = ["custom"]
    for key in ("h_t", "s_t", "h_u", "s_u"):
        lo, hi = getattr(lay, key)
        parts.append(f"{key}={lo}..{hi}")
    if lay.shared:
        parts.append("shared")
    if lay.ctxstar is not None:
        parts.append(f"ctxstar={lay.ctxstar} ctx={lay.ctx}")
    parts.append(f"sp0={lay.sp0}")
    return " ".join(parts)


def pretty_print(program: Program) -> str:
    """Render a Program as source text that assembles back to an equal Program."""
    def name_of(a):
        return program.label_for(a) or str(a)

    out = [f".layout {_layout_text(program.layout)}"]
    if program.imports:
        out.append(".imports " + ", ".join(name_of(a) for a in sorted(program.imports)))
    for name, names in program.tables.items():
        out.append(f".table {name} = [{', '.join(names)}]")
    for a in sorted(program.memory):
        out.append(f".mem {a} = {program.memory[a]}")
    fstart = {f.entry: f for f in program.funcs}
    fend = {f.addrs.stop - 1: f for f in program.funcs}
    at = {}
    for name, a in program.labels.items():
        if name not in program.func_by_name:
            at.setdefault(a, []).append(name)
    code_labels = set()
    section, expect = None, 0
    for a in sorted(program.code):
        priv, cmd = program.code[a]
        if priv is not section:
            out.append(".app" if priv is Privilege.T else ".lib")
            section = priv
        if a != expect:
            out.append(f".org {a}")
        if a in fstart:
            f = fstart[a]
            opts = f" arity={f.arity}" + (" exported" if f.exported else "")
            out.append(f".func {f.name}{opts}")
        for name in sorted(at.get(a, ())):
            out.append(f"{name}:")
            code_labels.add(name)
        out.append(f"    {cmd}")
        if a in fend:
            out.append(".endfunc")
        expect = a + 1
    for name in sorted(program.labels):
        if name not in code_labels and name not in program.func_by_name:
            out.append(f".equ {name} = {program.labels[name]}")
    default_entry = program.labels.get("main", 0)
    if program.entry != default_entry or "main" not in program.labels:
        out.append(f".entry {program.entry}")
    return "\n".join(out) + "\n"

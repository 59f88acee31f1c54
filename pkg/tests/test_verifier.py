import random

import pytest
from hypothesis import given, settings, strategies as st

from gatelab.asm import parse_asm
from gatelab.core import Bin, Lit, Reg
from gatelab.generate import gen_library
from gatelab.machine import Outcome
from gatelab.monitor import run_monitored
from gatelab.verifier import (
    INIT, UNINIT, AbsFrame, Callee, CfgRejected, analyze_function, build_cfg, entry_frame, leq,
    meet, transfer, value_set, verify_library,
)

from conftest import load

absvals = st.sampled_from([UNINIT, INIT] + [Callee(f"r{i}") for i in range(4, 8)])


@given(absvals, absvals, absvals)
def test_meet_semilattice(a, b, c):
    assert meet(a, a) == a
    assert meet(a, b) == meet(b, a)
    assert meet(meet(a, b), c) == meet(a, meet(b, c))
    assert meet(UNINIT, a) == UNINIT
    assert leq(meet(a, b), a) and leq(meet(a, b), b)
    if a != b and UNINIT not in (a, b):
        assert meet(a, b) == UNINIT


frames = st.builds(
    lambda regs, slots, sp: AbsFrame(tuple(regs), tuple(sorted(slots.items())), sp),
    st.lists(absvals, min_size=8, max_size=8),
    st.dictionaries(st.integers(-3, 6).filter(bool), absvals.filter(lambda v: v != UNINIT), max_size=4),
    st.one_of(st.none(), st.integers(0, 6)),
)


@given(frames, frames)
def test_frame_join_is_pointwise_meet(x, y):
    j = x.join(y)
    assert j == y.join(x) and x.join(x) == x
    for r in (f"r{i}" for i in range(8)):
        assert j.reg(r) == meet(x.reg(r), y.reg(r))
    for off in range(-3, 7):
        assert leq(j.slot(off), x.slot(off))
    if x.sp_off is None or y.sp_off is None:
        assert j.sp_off is None


def _lib(body, arity=0, exported=True, extra=""):
    exp = " exported" if exported else ""
    src = f".layout zerocost-default\n.lib\n.func f arity={arity}{exp}\n{body}\n.endfunc\n{extra}"
    prog = parse_asm(src)
    return prog, prog.func_by_name["f"]


def test_cfg_straight_line_single_block():
    prog, f = _lib("    mov r0, 1\n    mov r1, 2\n    mov r0, r0 + r1\n    gateret")
    cfg = build_cfg(prog, f)
    assert len(cfg.blocks) == 1 and cfg.edges == []


def test_cfg_diamond():
    prog, f = _lib("""    load r1, stack.U(sp - 1)
    jmp code.U(left + (1 - r1) * (right - left))
left:
    mov r0, 2
    jmp code.U(done)
right:
    mov r0, 3
done:
    gateret""", arity=1)
    cfg = build_cfg(prog, f)
    assert len(cfg.blocks) == 4 and len(cfg.edges) == 4


def test_cfg_cross_function_jump_rejected():
    prog, f = _lib("    jmp code.U(g)", extra=".func g arity=0\n    mov r0, 0\n    ret code.U\n.endfunc\n")
    with pytest.raises(CfgRejected) as e:
        build_cfg(prog, f)
    assert "cross-function jump" in str(e.value)


def test_cfg_rejects_computed_jump():
    prog, f = _lib("    jmp code.U(r1)\n    gateret")
    with pytest.raises(CfgRejected):
        build_cfg(prog, f)


def test_value_set():
    assert value_set(Lit(4)) == {4}
    assert value_set(Reg("r1")) is None
    assert value_set(Bin("monus", Lit(1), Reg("r4"))) == {0, 1}
    assert value_set(Bin("mul", Reg("r4"), Lit(0))) == {0}


def test_transfer_examples():
    prog, f = _lib("    gateret")
    e = entry_frame(prog, f)
    pushed = transfer(e, parse_asm(".lib\n.func x arity=0\n push U, r4\n.endfunc").code[0][1], prog)
    assert pushed.slot(1) == Callee("r4") and pushed.sp_off == 1
    mov = parse_asm(".lib\n.func x arity=0\n mov r3, r5 + r1\n mov r1, 2\n.endfunc").code
    fr = e.with_reg("r1", INIT)
    assert transfer(fr, mov[0][1], prog).reg("r3") == UNINIT
    assert transfer(e, mov[1][1], prog).reg("r1") == INIT


def test_entry_frame_arity_two():
    prog, f = _lib("    gateret", arity=2)
    e = entry_frame(prog, f)
    assert e.slot(-2) == INIT and e.slot(-1) == INIT and e.sp_off == 0
    assert [e.reg(f"r{i}") for i in range(4, 8)] == [Callee(f"r{i}") for i in range(4, 8)]
    assert all(e.reg(f"r{i}") == UNINIT for i in range(4))


def test_loop_join_makes_partial_write_uninit():
    prog, f = _lib("""    mov r2, 3
top:
    jmp code.U(body + (1 - r2) * (out - body))
body:
    mov r1, 7
    mov r2, r2 - 1
    jmp code.U(top)
out:
    mov r0, 0
    gateret""")
    frames = analyze_function(prog, f)
    top = prog.labels["top"]
    assert frames[top].reg("r1") == UNINIT
    assert frames[prog.labels["body"] + 1].reg("r1") == INIT


def test_straight_line_fixpoint():
    prog, f = _lib("    mov r0, 1\n    mov r1, r0\n    gateret")
    frames = analyze_function(prog, f)
    assert sorted(frames) == list(f.addrs)


def test_bad_func_flagged_at_operand():
    rep = verify_library(load("uninit_operand.gal"))
    bad, good = rep.functions
    assert (bad.name, good.name) == ("bad", "good")
    assert [(x.pc, x.check) for x in bad.findings] == [(2, "confidentiality")]
    assert "Callee(r5)" in bad.findings[0].message
    assert good.ok


def test_call_with_uninit_argument_fails_cfi():
    prog, _ = _lib("    mov sp, sp + 1\n    call code.U(g)\n    mov sp, sp - 1\n    gateret",
                   extra=".func g arity=1\n    mov r0, 0\n    ret code.U\n.endfunc\n")
    rep = verify_library(prog)
    assert "forward-cfi" in rep.checks_failed()


def test_frame_tamper_helper_fails_frame_protection():
    rep = verify_library(load("frame_tamper.gal"))
    helper = next(f for f in rep.functions if f.name == "helper")
    assert [(x.pc, x.check) for x in helper.findings] == [(8, "frame-protection")]


def test_factorial_passes_and_runs():
    prog = load("factorial.gal")
    assert verify_library(prog).ok
    mt = run_monitored(prog)
    assert mt.outcome is Outcome.HALTED and mt.final.machine.read(100) == 120


def test_exported_plain_ret_fails():
    prog, _ = _lib("    mov r0, 0\n    ret code.U")
    rep = verify_library(prog)
    assert rep.checks_failed() == {"well-bracketing"}


def test_internal_gateret_fails():
    prog, _ = _lib("    mov r0, 0\n    gateret", exported=False)
    assert "well-bracketing" in verify_library(prog).checks_failed()


def test_csr_clobber_fails():
    assert verify_library(load("csr_clobber.gal")).checks_failed() == {"csr-restoration"}


def test_secret_return_fails():
    prog, _ = _lib("    mov r0, r1\n    gateret")
    assert {"public-return", "confidentiality"} <= verify_library(prog).checks_failed()


def test_unguarded_memory_fails():
    prog, _ = _lib("    mov r0, 0\n    store heap.U(r0 + 600), r0\n    gateret")
    assert "memory-discipline" in verify_library(prog).checks_failed()


def test_report_formats():
    rep = verify_library(load("frame_tamper.gal"))
    text = rep.to_text()
    assert text.startswith("outer: pass\nhelper: fail\n") and text.endswith("library: fail\n")
    recs = rep.to_records()
    assert recs[0]["type"] == "verdict-report" and recs[-1] == {"type": "library", "verdict": "fail"}


def _reordered(source, seed):
    """Same library with its functions emitted in a shuffled order."""
    head, rest = source.split(".lib\n", 1)
    lib, app = rest.split(".app\n", 1)
    chunks = [c + ".endfunc\n" for c in lib.split(".endfunc\n") if c.strip()]
    tables = [c for c in chunks if not c.lstrip().startswith(".func")]
    funcs = [c for c in chunks if c.lstrip().startswith(".func")]
    random.Random(seed).shuffle(funcs)
    return head + ".lib\n" + "".join(funcs) + "".join(t.replace(".endfunc\n", "") for t in tables) + ".app\n" + app


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_verdict_determinism_and_reorder_stability(seed):
    from gatelab.generate import gen_source
    src = gen_source(seed)
    a = verify_library(parse_asm(src))
    assert a.to_jsonl() == verify_library(parse_asm(src)).to_jsonl()
    assert a.ok
    b = verify_library(parse_asm(_reordered(src, seed)))
    assert b.ok
    assert sorted(f.name for f in a.functions) == sorted(f.name for f in b.functions)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_generated_libraries_verify_and_monitor_clean(seed):
    prog = gen_library(seed)
    assert verify_library(prog).ok
    assert run_monitored(prog, fuel=10000).error is None

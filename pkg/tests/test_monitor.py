import pytest
from hypothesis import given, settings, strategies as st

from gatelab.asm import parse_asm
from gatelab.core import T, U
from gatelab.generate import MutationKind, NotApplicable, gen_library, mutate
from gatelab.machine import MachineError, Outcome, initial_state, step
from gatelab.monitor import (
    POLICIES, Reason, SENTINEL, check_refinement, classify, initial_overlay, ostep, run_monitored,
)
from gatelab.transitions import NACL, ZERO

from conftest import load

NACL_POL = POLICIES["nacl-default"]


def _at_first_gatecall(prog):
    o = initial_overlay(prog)
    while type(prog.code[o.machine.pc][1]).__name__ != "GateCall":
        o, _ = ostep(prog, o, NACL_POL)
    return o


def test_classify_nacl_default():
    prog = load("add5.gal")
    o = _at_first_gatecall(prog)
    c = classify(NACL_POL, prog, o)
    assert c.reg_labels == (T,) * 8
    assert c.reg_label("sp") is U and c.reg_label("pc") is U
    sp = o.machine.sp
    assert c.mem_labels.get(sp) is U                     # the one argument slot
    assert c.mem_labels.get(sp + 1) is T                 # shared stack above the args
    assert c.mem_labels.get(300) is U and c.mem_labels.get(100) is T
    assert c.machine == o.machine


def test_classify_all_public():
    prog = load("add5.gal")
    c = classify(POLICIES["all-public"], prog, _at_first_gatecall(prog))
    assert set(c.reg_labels) == {U}
    assert all(c.mem_labels.get(a) is U for a in range(0, 1024, 7))


def test_classify_nacl_layout_labels_sandbox_stack_public():
    prog = load("nacl_roundtrip.gal")
    lab = NACL_POL.labeling(prog, initial_state(prog))
    assert lab.addr(400) is U and lab.addr(200) is T and lab.addr(100) is T
    assert lab.addr(0) is U and lab.addr(8) is U          # runtime context bookkeeping


def test_initial_overlay_mega_frame():
    prog = load("add5.gal")
    o = initial_overlay(prog)
    assert len(o.stack) == 1
    assert o.top.base == prog.layout.sp0 + 1 and o.top.ret_addr_loc == SENTINEL
    assert o.erase() == initial_state(prog)


def test_store_below_frame_errs():
    mt = run_monitored(load("frame_tamper.gal"))
    assert mt.outcome is Outcome.ERROR
    assert mt.error.reason is Reason.WRITE_OUTSIDE_FRAME and mt.error.pc == 8


def test_csr_clobber_errs():
    mt = run_monitored(load("csr_clobber.gal"))
    assert mt.error.reason is Reason.CSR_NOT_RESTORED
    assert "r4" in mt.error.detail


def test_secret_scratch_to_lib_heap_errs():
    prog = parse_asm("""
.layout zerocost-default
.lib
.func f arity=0 exported
    store heap.U(300), r2
    mov r0, 0
    gateret
.endfunc
.app
main:
    mov r2, 99
    gatecall 0, f
""")
    mt = run_monitored(prog)
    assert mt.error.reason is Reason.SECRET_TO_LIB_HEAP
    assert run_monitored(prog, policy=POLICIES["all-public"]).outcome is Outcome.HALTED


def test_benign_two_call_run_halts():
    prog = load("add5.gal")
    mt = run_monitored(prog)
    assert mt.outcome is Outcome.HALTED and mt.error is None
    assert mt.final.machine.read(100) == 15 and mt.final.machine.read(101) == 25
    assert len(mt.final.stack) == 1
    assert check_refinement(prog, mt) == []


def test_missing_epilogue_errs():
    prog = parse_asm("""
.layout zerocost-default
.lib
.func add arity=2 exported
    load r0, stack.U(sp - 1)
    load r1, stack.U(sp - 2)
    push U, r0
    mov r0, r0 + r1
    gateret
.endfunc
.app
main:
    push T, 1
    push T, 2
    gatecall 2, add
""")
    mt = run_monitored(prog)
    assert mt.error.reason is Reason.RET_ADDR_MISMATCH


def test_cross_function_jump_errs():
    prog = parse_asm("""
.layout zerocost-default
.lib
.func f arity=0 exported
    jmp code.U(inside)
.endfunc
.func g arity=0
    mov r0, 1
inside:
    mov r0, 2
    ret code.U
.endfunc
.app
main:
    gatecall 0, f
""")
    mt = run_monitored(prog)
    assert mt.error.reason is Reason.CROSS_FUNCTION_JUMP


def test_rejects_nacl_strategy():
    with pytest.raises(ValueError):
        run_monitored(load("add5.gal"), NACL)


def test_records_carry_frame_summary_and_error():
    recs = run_monitored(load("frame_tamper.gal")).to_records()
    assert recs[0]["type"] == "monitored-trace"
    assert all("frame" in r for r in recs if r["type"] == "step")
    assert recs[-1] == {"type": "overlay-error", "reason": "WriteOutsideFrame", "pc": 8,
                        "detail": recs[-1]["detail"]}


def _programs(seed, kind):
    prog = gen_library(seed)
    if kind is None:
        return prog
    try:
        return mutate(prog, kind, seed)
    except NotApplicable:
        return prog


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([None] + list(MutationKind)),
       st.sampled_from(sorted(POLICIES)))
def test_refinement_and_transparency(seed, kind, pol):
    prog = _programs(seed, kind)
    policy = POLICIES[pol]
    mt = run_monitored(prog, policy=policy, fuel=5000)
    assert check_refinement(prog, mt) == []
    # in trusted code the monitor steps exactly when the machine does
    for o in mt.states:
        ent = prog.code.get(o.machine.pc)
        if ent is None or ent[0] is not T:
            continue
        try:
            concrete = step(prog, o.machine, ZERO)
        except MachineError:
            concrete = None
        try:
            got = ostep(prog, o, policy)
        except Exception:
            got = None
        if concrete is None:
            assert got is None
        else:
            assert got is not None and got[0].machine == concrete[0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([None] + list(MutationKind)))
def test_label_monotonicity(seed, kind):
    prog = _programs(seed, kind)
    mt = run_monitored(prog, fuel=5000)
    for rec, pre, post in zip(mt.records, mt.states, mt.states[1:]):
        name = type(rec.cmd).__name__
        if name in ("StoreLabel", "MovLabel") or (name == "GateCall" and rec.priv is T):
            continue
        touched = set(pre.mem_labels.over) | set(post.mem_labels.over) | set(range(0, 1024, 13))
        for a in touched:
            if pre.mem_labels.get(a) is U and post.mem_labels.get(a) is T:
                # only a store or push of a secret may do that
                assert name in ("Store", "Push")

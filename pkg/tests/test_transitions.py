import pytest
from hypothesis import given, settings, strategies as st

from gatelab.asm import parse_asm
from gatelab.core import Conventions, T
from gatelab.generate import gen_library, to_nacl
from gatelab.machine import Fault, MachineError, Outcome, initial_state, run, step
from gatelab.properties import check_csr_integrity, check_ra_integrity, wb_segments
from gatelab.transitions import NACL, ZERO, Direction, gate_cost

from conftest import load
from template_oracle import (
    RA_PUSH, cb_springboard_lines, cb_trampoline_lines, springboard_lines, trampoline_lines,
)


@pytest.mark.parametrize("n", range(6))
@pytest.mark.parametrize("ncsr, nclear", [(4, 8), (2, 8), (0, 4)])
def test_gate_cost_matches_template_tally(n, ncsr, nclear):
    a2l = Direction.APP_TO_LIB
    l2a = Direction.LIB_TO_APP
    assert gate_cost(NACL, a2l, n, ncsr=ncsr, nclear=nclear) == RA_PUSH + len(springboard_lines(n, ncsr, nclear))
    assert gate_cost(NACL, l2a, n, ncsr=ncsr, nclear=nclear) == RA_PUSH + len(cb_springboard_lines(n))
    assert gate_cost(NACL, l2a, ret=True, ncsr=ncsr, nclear=nclear) == len(trampoline_lines(ncsr))
    assert gate_cost(NACL, a2l, ret=True, ncsr=ncsr, nclear=nclear) == len(cb_trampoline_lines(nclear))


def test_gate_cost_shape():
    a2l = Direction.APP_TO_LIB
    assert all(gate_cost(ZERO, d, n, ret=r) == 1 for d in Direction for n in range(5) for r in (0, 1))
    costs = [gate_cost(NACL, a2l, n) for n in range(8)]
    assert costs == sorted(set(costs))
    assert gate_cost(NACL, a2l, 2) - gate_cost(NACL, a2l, 0) == 6
    assert gate_cost(NACL, a2l, 0) > gate_cost(ZERO, a2l, 0)


ZC = """
.layout zerocost-default
.imports cb
.lib
.func f arity=1 exported
    gatecall 0, 999
    gateret
.endfunc
.app
cb:
    gateret
main:
    mov sp, 512
    gatecall 1, f
"""


def test_zerocost_gatecall_and_gateret():
    prog = parse_asm(ZC)
    s = initial_state(prog)
    s, _ = step(prog, s, ZERO)
    assert s.sp == 512
    s2, ops = step(prog, s, ZERO)
    assert (s2.sp, s2.read(513), s2.pc, ops) == (513, s.pc + 1, 0, 1)
    s3, ops = step(prog, s2.moved(1), ZERO)
    assert (s3.pc, s3.sp, ops) == (s.pc + 1, 512, 1)


def test_zerocost_library_gatecall_needs_import():
    prog = parse_asm(ZC)
    s = initial_state(prog).moved(0, 600)
    with pytest.raises(MachineError) as e:
        step(prog, s, ZERO)
    assert e.value.fault is Fault.GUARD_UNDEFINED


def test_zerocost_gatecall_into_own_domain_fails():
    prog = parse_asm(ZC.replace("gatecall 1, f", "gatecall 1, cb"))
    tr = run(prog, ZERO)
    assert tr.outcome is Outcome.ERROR and tr.error.fault is Fault.GUARD_UNDEFINED


NACL_CB = """
.layout nacl-default
.imports cb
.lib
.func f arity=1 exported
    mov r4, 77
    push U, 3
    gatecall 1, cb
    mov sp, sp - 1
    mov r0, 9
    gateret
.endfunc
.app
cb:
    mov r1, 5
    mov r2, 6
    mov r3, 7
    gateret
main:
    mov r4, 4242
    mov r5, 5151
    push T, 11
    gatecall 1, f
    mov sp, sp - 1
    store heap.T(100), r4
"""


def test_nacl_round_trip_restores_csrs_and_return_address():
    prog = parse_asm(NACL_CB)
    tr = run(prog, NACL)
    assert tr.outcome is Outcome.HALTED
    segs = wb_segments(tr)
    assert [(s.depth) for s in segs] == [0, 1]
    outer = segs[0]
    pre, post = tr.states[outer.call], tr.states[outer.ret + 1]
    assert post.pc == pre.pc + 1 and post.sp == pre.sp
    assert post.reg("r4") == 4242 and post.reg("r5") == 5151
    assert check_csr_integrity(tr) == [] and check_ra_integrity(tr) == []


def test_nacl_callback_return_clears_registers():
    prog = parse_asm(NACL_CB)
    tr = run(prog, NACL)
    segs = wb_segments(tr)
    cb_ret = segs[1].ret
    after = tr.states[cb_ret + 1]
    assert after.regs == (0,) * 8


def test_nacl_callback_to_non_import_fails():
    prog = parse_asm(NACL_CB.replace("gatecall 1, cb", "gatecall 1, main"))
    tr = run(prog, NACL)
    assert tr.outcome is Outcome.ERROR and tr.error.fault is Fault.GUARD_UNDEFINED


def test_nacl_gatecall_copies_arguments_and_clears():
    prog = parse_asm(NACL_CB)
    tr = run(prog, NACL)
    i = next(r.index for r in tr.records if str(r.cmd) == "gatecall 1, f")
    pre, post = tr.states[i], tr.states[i + 1]
    assert post.regs == (0,) * 8
    assert post.read(pre.sp + 1) == pre.pc + 1
    assert post.read(384) == 11 and post.sp == 384
    touched = {a for a in set(pre.mem) | set(post.mem) if pre.read(a) != post.read(a)}
    lay = prog.layout
    # only the context block and the two stacks are written
    assert all(lay.in_heap(T, a) or lay.in_any_stack(a) for a in touched)


def test_measured_micro_ops_match_gate_cost():
    for n in (0, 1, 2, 4):
        args = "".join(f"    push T, {i}\n" for i in range(n))
        src = (f".layout nacl-default\n.lib\n.func f arity={n} exported\n    mov r0, 1\n    gateret\n"
               f".endfunc\n.app\nmain:\n{args}    gatecall {n}, f\n")
        prog = parse_asm(src)
        for strategy in (NACL, ZERO):
            tr = run(prog, strategy)
            ops = {str(r.cmd): r.micro_ops for r in tr.records}
            assert ops[f"gatecall {n}, f"] == gate_cost(strategy, Direction.APP_TO_LIB, n)
            assert ops["gateret"] == gate_cost(strategy, Direction.LIB_TO_APP, ret=True)


def test_nacl_template_region_checks():
    prog = parse_asm(NACL_CB)
    from dataclasses import replace
    bad = replace(prog, memory={0: 300})          # context pointer into library heap
    tr = run(bad, NACL)
    assert tr.outcome is Outcome.ERROR and tr.error.fault is Fault.REGION_VIOLATION


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_gatecall_writes_return_address_for_both_strategies(seed):
    prog = gen_library(seed)
    for p, strategy in ((prog, ZERO), (to_nacl(prog), NACL)):
        tr = run(p, strategy, 5000)
        for r in tr.records:
            if type(r.cmd).__name__ == "GateCall" and r.index + 1 < len(tr.states):
                assert tr.states[r.index + 1].read(r.sp + 1) == r.pc + 1
                assert p.priv_at(tr.states[r.index + 1].pc) is r.priv.opposite()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_nacl_integrity_on_generated_programs(seed):
    prog = to_nacl(gen_library(seed))
    tr = run(prog, NACL, 10000)
    assert check_csr_integrity(tr) == [] and check_ra_integrity(tr) == []


def test_custom_conventions_change_costs():
    conv = Conventions(csr=("r6", "r7"), clear=("r0", "r1", "r2"))
    assert gate_cost(NACL, Direction.APP_TO_LIB, 0, ncsr=len(conv.csr), nclear=len(conv.clear)) == 10 + 4 + 3

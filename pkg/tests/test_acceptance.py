"""Acceptance criteria, one test each; every test records a single PASS/FAIL line."""

import contextlib
import io
import json
import tempfile
import time
from pathlib import Path

import pytest

from gatelab.cli import main
from gatelab.core import Discipline, well_formed
from gatelab.generate import ATTACK_TABLE, MutationKind, gen_library, mutants, to_nacl
from gatelab.machine import run
from gatelab.monitor import POLICIES, check_refinement, run_monitored
from gatelab.properties import (
    check_csr_integrity, check_ra_integrity, check_strong_ni, report_records,
)
from gatelab.transitions import NACL, ZERO, Direction, gate_cost
from gatelab.verifier import verify_library

import conftest
from conftest import PROGRAMS, load
from template_oracle import nacl_costs

GOLDEN = Path(__file__).resolve().parent / "golden"
FUEL = 10000
POLICY = POLICIES["nacl-default"]

# every monitored run from criteria 1-4 is checked here, for criterion 5
REFINEMENT = {"runs": 0, "failures": []}


def _report(num, ok, detail):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE[num] = line
    print(line)


def _monitor(program, tag):
    mt = run_monitored(program, ZERO, POLICY, FUEL)
    REFINEMENT["runs"] += 1
    if check_refinement(program, mt):
        REFINEMENT["failures"].append(tag)
    return mt


@pytest.fixture(scope="module")
def attack_instances():
    return {kind: mutants(kind, 100) for kind in MutationKind}


def test_1_differential_soundness():
    t0 = time.perf_counter()
    rejected, bad = 0, []
    for seed in range(1000):
        prog = gen_library(seed)
        if not verify_library(prog).ok:
            rejected += 1
            continue
        mt = _monitor(prog, f"c1:{seed}")
        tr = run(prog, ZERO, FUEL)
        if mt.error is not None or check_csr_integrity(tr) or check_ra_integrity(tr):
            bad.append(seed)
    dt = time.perf_counter() - t0
    ok = not bad and dt < 120
    _report(1, ok, f"{1000 - rejected} verified libraries, {len(bad)} failures, {dt:.1f}s")
    assert not bad, bad
    assert dt < 120


def test_2_attack_suite(attack_instances):
    t0 = time.perf_counter()
    total, caught, missed = 0, 0, []
    for kind, items in attack_instances.items():
        checks, reasons = ATTACK_TABLE[kind]
        for seed, prog in items:
            total += 1
            v = verify_library(prog).checks_failed() & checks
            mt = _monitor(prog, f"c2:{kind.value}:{seed}")
            m = mt.error is not None and mt.error.reason.value in reasons
            if v and m:
                caught += 1
            else:
                missed.append((kind.value, seed, bool(v), mt.error and mt.error.reason.value))
    dt = time.perf_counter() - t0
    ok = caught == total == 900 and dt < 60
    _report(2, ok, f"{caught}/{total} attacks rejected by verifier and monitor, {dt:.1f}s")
    assert total == 900 and caught == 900, missed[:10]
    assert dt < 60


def test_3_nacl_shield(attack_instances):
    t0 = time.perf_counter()
    total, held, broken = 0, 0, []
    for kind, items in attack_instances.items():
        for seed, prog in items:
            total += 1
            nprog = to_nacl(prog)
            tr = run(nprog, NACL, FUEL)
            fine = (not well_formed(nprog, Discipline.NACL) and not check_csr_integrity(tr)
                    and not check_ra_integrity(tr)
                    and check_strong_ni(nprog, POLICY, NACL, seed, FUEL).ok)
            held += fine
            if not fine:
                broken.append((kind.value, seed))
    dt = time.perf_counter() - t0
    _report(3, held == total == 900, f"{held}/{total} attacks contained by heavyweight gates, {dt:.1f}s")
    assert total == 900 and held == 900, broken[:10]


def test_4_noninterference():
    t0 = time.perf_counter()
    passed, runs, seed = 0, 0, 0
    failures = []
    while runs < 600:
        prog = gen_library(seed)
        if verify_library(prog).ok:
            _monitor(prog, f"c4:{seed}")
            for k in range(3):
                runs += 1
                v = check_strong_ni(prog, POLICY, ZERO, seed=f"{seed}/{k}", fuel=FUEL)
                passed += v.ok
                if not v.ok:
                    failures.append((seed, k, str(v)))
        seed += 1
    teeth = 0
    for kind in (MutationKind.READ_UNINIT_SCRATCH, MutationKind.LEAK_SECRET_TO_LIB_HEAP):
        for s, prog in mutants(kind, 40):
            _monitor(prog, f"c4:{kind.value}:{s}")
            teeth += not check_strong_ni(prog, POLICY, ZERO, seed=s, fuel=FUEL).ok
    dt = time.perf_counter() - t0
    ok = passed == 600 and teeth >= 50
    _report(4, ok, f"{passed}/600 low-equivalent pairs agree; {teeth}/80 leaking mutants diverge, {dt:.1f}s")
    assert passed == 600, failures[:10]
    assert teeth >= 50


def test_5_refinement():
    # runs after 1-4 in file order; collect them if this test is run alone
    if REFINEMENT["runs"] == 0:
        for seed in range(50):
            _monitor(gen_library(seed), f"c5:{seed}")
    ok = not REFINEMENT["failures"]
    _report(5, ok, f"{REFINEMENT['runs']} monitored runs, {len(REFINEMENT['failures'])} refinement mismatches")
    assert ok, REFINEMENT["failures"][:10]


def _measured_ops(n):
    args = "".join(f"    push T, {i}\n" for i in range(n))
    src = (f".layout nacl-default\n.lib\n.func f arity={n} exported\n    mov r0, 1\n    gateret\n"
           f".endfunc\n.app\nmain:\n{args}    gatecall {n}, f\n    mov sp, sp - {n}\n")
    out = {}
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "rt.gal"
        path.write_text(src)
        for gates in ("nacl", "zero"):
            buf = io.StringIO()
            with contextlib.redirect_stdout(buf):
                assert main(["run", str(path), "--gates", gates, "--format", "records"]) == 0
            recs = [json.loads(x) for x in buf.getvalue().splitlines()]
            steps = {r["cmd"]: r["micro_ops"] for r in recs if r["type"] == "step"}
            out[gates] = (steps[f"gatecall {n}, f"], steps["gateret"])
    return out


def test_6_transition_costs():
    a2l, l2a = Direction.APP_TO_LIB, Direction.LIB_TO_APP
    rows, problems = [], []
    prev = None
    for n in (0, 1, 2, 4):
        zc = gate_cost(ZERO, a2l, n)
        nc = gate_cost(NACL, a2l, n)
        tally = nacl_costs(n)
        if zc != 1:
            problems.append(f"zero-cost n={n} is {zc}")
        if nc != tally[0]:
            problems.append(f"nacl n={n}: gate_cost {nc} vs tally {tally[0]}")
        if nc <= zc or (prev is not None and nc <= prev):
            problems.append(f"ordering broken at n={n}")
        prev = nc
        measured = _measured_ops(n)
        if measured["nacl"] != (nc, gate_cost(NACL, l2a, ret=True)):
            problems.append(f"measured nacl n={n}: {measured['nacl']}")
        if measured["zero"] != (1, 1):
            problems.append(f"measured zero n={n}: {measured['zero']}")
        rows.append(f"n={n}:{nc}/{zc}")
    _report(6, not problems, "nacl/zero app->lib costs " + " ".join(rows))
    assert not problems, problems


def _worked_reports():
    out = {}
    tamper = load("frame_tamper.gal")
    out["frame_tamper.verify.jsonl"] = verify_library(tamper).to_jsonl()
    out["frame_tamper.monitor.jsonl"] = run_monitored(tamper).to_jsonl()
    out["uninit_operand.verify.jsonl"] = verify_library(load("uninit_operand.gal")).to_jsonl()
    clobber = load("csr_clobber.gal")
    out["csr_clobber.monitor.jsonl"] = run_monitored(clobber).to_jsonl()
    viols = check_csr_integrity(run(clobber, ZERO))
    out["csr_clobber.csr.jsonl"] = report_records(v.as_dict() for v in viols)
    return out, tamper, clobber


def test_7_worked_examples():
    reports, tamper, clobber = _worked_reports()
    again, _, _ = _worked_reports()
    problems = []
    # (a) frame tampering
    rep = verify_library(tamper)
    if "frame-protection" not in rep.checks_failed():
        problems.append("a: verifier accepted the helper")
    mt = run_monitored(tamper)
    if mt.error is None or mt.error.reason.value != "WriteOutsideFrame":
        problems.append(f"a: monitor outcome {mt.error}")
    # (b) uninitialized operand
    bad, good = verify_library(load("uninit_operand.gal")).functions
    flagged = [(x.pc, x.check) for x in bad.findings]
    uninit_pc = 2                          # mov r3, r5 + r4
    if flagged != [(uninit_pc, "confidentiality")] or not good.ok:
        problems.append(f"b: findings {flagged}, good ok={good.ok}")
    # (c) callee-save clobbering
    mc = run_monitored(clobber)
    if mc.error is None or mc.error.reason.value != "CsrNotRestored":
        problems.append(f"c: monitor outcome {mc.error}")
    if [v.where for v in check_csr_integrity(run(clobber, ZERO))] != ["r4"]:
        problems.append("c: no CSR-integrity violation under zero-cost gates")
    # byte stability: repeated runs and the checked-in reports
    for name, text in reports.items():
        if again[name] != text:
            problems.append(f"{name} differs between runs")
        if (GOLDEN / name).read_text() != text:
            problems.append(f"{name} differs from tests/golden")
    _report(7, not problems, f"3/3 worked examples, {len(reports)} reports byte-stable"
            if not problems else "; ".join(problems))
    assert not problems, problems


def test_8_false_positive_guard():
    t0 = time.perf_counter()
    rejected, errors = [], []
    for seed in range(5000):
        prog = gen_library(seed)
        if not verify_library(prog).ok:
            rejected.append(seed)
        if run_monitored(prog, ZERO, POLICY, FUEL).error is not None:
            errors.append(seed)
    dt = time.perf_counter() - t0
    ok = not rejected and not errors and dt < 300
    _report(8, ok, f"5000 seeds: {len(rejected)} rejections, {len(errors)} monitor errors, {dt:.1f}s")
    assert not rejected and not errors, (rejected[:10], errors[:10])
    assert dt < 300

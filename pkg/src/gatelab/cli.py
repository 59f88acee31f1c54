"""Command-line front end: gatelab {asm,run,monitor,verify,check,fuzz}."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor

from .asm import AsmError, parse_asm
from .core import Discipline, well_formed
from .generate import ATTACK_TABLE, GenParams, MutationKind, NotApplicable, gen_library, mutate
from .machine import SCHEMA_VERSION, Outcome, run
from .monitor import POLICIES, check_refinement, run_monitored
from .properties import check_csr_integrity, check_ra_integrity, check_strong_ni
from .transitions import STRATEGIES
from .verifier import verify_library

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PROPERTIES = ("csr", "ra", "ni", "refinement")


class UsageError(Exception):
    pass


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def _load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}")
    try:
        return parse_asm(text)
    except AsmError as e:
        raise UsageError(f"{path}: {e}")


def _discipline(program):
    return Discipline.NACL if program.layout.ctxstar is not None else Discipline.ZEROCOST


def _trace_text(trace) -> str:
    lines = [f"{r.index:5d}  pc={r.pc:<5d} sp={r.sp:<5d} {r.priv}  {str(r.cmd):<36s} ops={r.micro_ops}"
             for r in trace.records]
    out = trace.outcome_record()
    tail = f"outcome: {out['outcome']} after {out['steps']} step(s), pc={out['pc']} sp={out['sp']}"
    if trace.error is not None:
        tail += f"\nerror: {trace.error}"
    return "\n".join(lines + [tail]) + "\n"


def cmd_asm(args):
    program = _load(args.file)
    found = well_formed(program, _discipline(program))
    if args.format == "records":
        rows = [{"type": "well-formed", "schema": SCHEMA_VERSION,
                 "discipline": _discipline(program).value, "ok": not found}]
        rows += [{"type": "violation", "pc": v.pc, "message": v.message} for v in found]
        text = _jsonl(rows)
    else:
        lines = [f"{_discipline(program).value} discipline: "
                 f"{len(program.code)} instruction(s), {len(program.funcs)} function(s)"]
        lines += [f"  {v}" for v in found]
        lines.append("well-formed" if not found else f"{len(found)} violation(s)")
        text = "\n".join(lines) + "\n"
    return text, EXIT_OK if not found else EXIT_FAIL


def cmd_run(args):
    program = _load(args.file)
    trace = run(program, STRATEGIES[args.gates], args.fuel)
    text = trace.to_jsonl() if args.format == "records" else _trace_text(trace)
    return text, EXIT_OK if trace.outcome is Outcome.HALTED else EXIT_FAIL


def cmd_monitor(args):
    program = _load(args.file)
    mt = run_monitored(program, policy=POLICIES[args.policy], fuel=args.fuel)
    if args.format == "records":
        text = mt.to_jsonl()
    else:
        lines = []
        for r, o in zip(mt.records, mt.states):
            top = o.stack[0]
            lines.append(f"{r.index:5d}  pc={r.pc:<5d} sp={r.sp:<5d} {r.priv}  {str(r.cmd):<36s} "
                         f"frame=[{top.base},{top.ret_addr_loc}] depth={len(o.stack)}")
        fin = mt.final.machine
        lines.append(f"outcome: {mt.outcome.value} after {len(mt)} step(s), pc={fin.pc} sp={fin.sp}")
        if mt.error is not None:
            lines.append(f"error: {mt.error}")
        text = "\n".join(lines) + "\n"
    return text, EXIT_OK if mt.outcome is Outcome.HALTED else EXIT_FAIL


def cmd_verify(args):
    program = _load(args.file)
    report = verify_library(program)
    text = report.to_jsonl() if args.format == "records" else report.to_text()
    return text, EXIT_OK if report.ok else EXIT_FAIL


def cmd_check(args):
    program = _load(args.file)
    props = args.properties or list(PROPERTIES)
    for p in props:
        if p not in PROPERTIES:
            raise UsageError(f"unknown property {p!r}; choose from {', '.join(PROPERTIES)}")
    strategy = STRATEGIES[args.gates]
    policy = POLICIES[args.policy]
    rows, ok = [], True
    trace = run(program, strategy, args.fuel)
    for p in props:
        if p == "csr":
            found = [v.as_dict() for v in check_csr_integrity(trace, program.conv)]
        elif p == "ra":
            found = [v.as_dict() for v in check_ra_integrity(trace)]
        elif p == "ni":
            verdict = check_strong_ni(program, policy, strategy, args.seed, args.fuel)
            found = [] if verdict.ok else [verdict.as_dict()]
        else:
            if args.gates != "zero":
                rows.append({"type": "property", "property": p, "verdict": "skipped",
                             "violations": [], "note": "monitor models zero-cost gates only"})
                continue
            mt = run_monitored(program, policy=policy, fuel=args.fuel)
            found = [{"mismatch": m} for m in check_refinement(program, mt)]
        ok = ok and not found
        rows.append({"type": "property", "property": p, "verdict": "pass" if not found else "fail",
                     "violations": found})
    if args.format == "records":
        text = _jsonl([{"type": "property-report", "schema": SCHEMA_VERSION}] + rows)
    else:
        lines = []
        for r in rows:
            lines.append(f"{r['property']}: {r['verdict']}")
            lines += [f"  {json.dumps(v, sort_keys=True)}" for v in r["violations"]]
        text = "\n".join(lines) + "\n"
    return text, EXIT_OK if ok else EXIT_FAIL


def _params(pairs) -> GenParams:
    fields = {f.name: f for f in dataclasses.fields(GenParams)}
    kw = {}
    for pair in pairs:
        key, sep, val = pair.partition("=")
        if not sep or key not in fields:
            raise UsageError(f"bad size parameter {pair!r}; keys: {', '.join(fields)}")
        cur = getattr(GenParams(), key)
        try:
            if isinstance(cur, bool):
                kw[key] = val.lower() in ("1", "true", "yes")
            else:
                kw[key] = type(cur)(val)
        except ValueError:
            raise UsageError(f"bad value for {key}: {val!r}")
    return GenParams(**kw)


def fuzz_one(seed, params: GenParams, fuel: int) -> dict:
    """One campaign row: the generated library and every applicable attack."""
    program = gen_library(seed, params)
    row = {"seed": seed, "verified": verify_library(program).ok}
    mt = run_monitored(program, fuel=fuel)
    row["monitor_error"] = mt.error.reason.value if mt.error else None
    row["refinement"] = not check_refinement(program, mt)
    trace = run(program, STRATEGIES["zero"], fuel)
    row["csr"] = not check_csr_integrity(trace, program.conv)
    row["ra"] = not check_ra_integrity(trace)
    row["ni"] = check_strong_ni(program, seed=seed, fuel=fuel).ok
    attacks = {}
    for kind in MutationKind:
        try:
            bad = mutate(program, kind, seed)
        except NotApplicable:
            continue
        checks, reasons = ATTACK_TABLE[kind]
        rep = verify_library(bad)
        mbad = run_monitored(bad, fuel=fuel)
        attacks[kind.value] = {
            "verifier": bool(checks & rep.checks_failed()),
            "monitor": mbad.error is not None and mbad.error.reason.value in reasons,
        }
    row["attacks"] = attacks
    return row


def _fuzz_star(a):
    return fuzz_one(*a)


def cmd_fuzz(args):
    if args.n < 0:
        raise UsageError("N must be non-negative")
    params = _params(args.params)
    seeds = range(args.seed, args.seed + args.n)
    work = [(s, params, args.fuel) for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_fuzz_star, work, chunksize=8))
    else:
        rows = [fuzz_one(*w) for w in work]
    summary = {"programs": len(rows), "verified": 0, "monitor_errors": 0, "refinement_failures": 0,
               "csr_failures": 0, "ra_failures": 0, "ni_failures": 0}
    failing = {k: [] for k in ("unverified", "monitor", "refinement", "csr", "ra", "ni")}
    per_kind = {k.value: {"instances": 0, "verifier": 0, "monitor": 0, "missed": []} for k in MutationKind}
    for r in rows:
        s = r["seed"]
        summary["verified"] += r["verified"]
        if not r["verified"]:
            failing["unverified"].append(s)
        if r["monitor_error"]:
            summary["monitor_errors"] += 1
            failing["monitor"].append(s)
        for key, name in (("refinement", "refinement_failures"), ("csr", "csr_failures"),
                          ("ra", "ra_failures"), ("ni", "ni_failures")):
            if not r[key]:
                summary[name] += 1
                failing[key].append(s)
        for kind, res in r["attacks"].items():
            k = per_kind[kind]
            k["instances"] += 1
            k["verifier"] += res["verifier"]
            k["monitor"] += res["monitor"]
            if not (res["verifier"] and res["monitor"]):
                k["missed"].append(s)
    clean = (summary["verified"] == len(rows) and not summary["monitor_errors"]
             and not any(failing[k] for k in ("refinement", "csr", "ra", "ni"))
             and all(not k["missed"] for k in per_kind.values()))
    if args.format == "records":
        rec = [{"type": "fuzz-summary", "schema": SCHEMA_VERSION, "seed": args.seed, "n": args.n,
                "params": dataclasses.asdict(params), **summary, "failing_seeds": failing}]
        rec += [{"type": "mutation", "kind": k, **v} for k, v in per_kind.items()]
        text = _jsonl(rec)
    else:
        lines = [f"fuzz campaign: {len(rows)} program(s) from seed {args.seed}"]
        for k, v in summary.items():
            lines.append(f"  {k}: {v}")
        for k, seeds_ in failing.items():
            if seeds_:
                lines.append(f"  failing seeds ({k}): {' '.join(map(str, seeds_))}")
        lines.append("mutations (instances / verifier rejects / monitor errors):")
        for k, v in per_kind.items():
            lines.append(f"  {k:<22s} {v['instances']:5d} {v['verifier']:5d} {v['monitor']:5d}")
            if v["missed"]:
                lines.append(f"    missed seeds: {' '.join(map(str, v['missed']))}")
        text = "\n".join(lines) + "\n"
    return text, EXIT_OK if clean else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--gates", choices=sorted(STRATEGIES), default="zero")
    common.add_argument("--policy", choices=sorted(POLICIES), default="nacl-default")
    common.add_argument("--fuel", type=int, default=100000)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=("text", "records"), default="text")
    common.add_argument("--out", metavar="PATH")

    ap = argparse.ArgumentParser(prog="gatelab", description="Gated assembly lab: run, monitor, verify, fuzz.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("asm", "assemble and check well-formedness"),
                           ("run", "execute concretely"),
                           ("monitor", "execute under the overlay monitor"),
                           ("verify", "statically verify the library")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("file")
    p = sub.add_parser("check", parents=[common], help="check trace properties")
    p.add_argument("file")
    p.add_argument("properties", nargs="*", metavar="PROP", help=f"any of {', '.join(PROPERTIES)}")
    p = sub.add_parser("fuzz", parents=[common], help="generate, verify, monitor and attack N programs")
    p.add_argument("n", type=int, metavar="N")
    p.add_argument("params", nargs="*", metavar="KEY=VAL", help="generator size parameters")
    p.add_argument("--jobs", type=int, default=1)
    return ap


COMMANDS = {"asm": cmd_asm, "run": cmd_run, "monitor": cmd_monitor, "verify": cmd_verify,
            "check": cmd_check, "fuzz": cmd_fuzz}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args, extra = ap.parse_known_args(argv)
        # trailing PROP / KEY=VAL words may follow flags
        tail = {"check": "properties", "fuzz": "params"}.get(args.command)
        if extra and (tail is None or any(x.startswith("-") for x in extra)):
            ap.error(f"unrecognized arguments: {' '.join(extra)}")
        if extra:
            setattr(args, tail, getattr(args, tail) + extra)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    if args.fuel < 0:
        print("gatelab: --fuel must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    try:
        text, code = COMMANDS[args.command](args)
    except UsageError as e:
        print(f"gatelab: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Interpreter, monitor and verifier for a gated sandbox assembly language."""

from .asm import AsmError, parse_asm, pretty_print
from .core import Discipline, Privilege, Program, region_of, well_formed
from .machine import Outcome, run
from .transitions import NACL, ZERO, Direction, gate_cost
from .monitor import POLICIES, run_monitored
from .verifier import verify_library
from .properties import check_csr_integrity, check_ra_integrity, check_strong_ni
from .generate import GenParams, MutationKind, gen_library, mutate, to_nacl

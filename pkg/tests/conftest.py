import itertools

import pytest
from hypothesis import HealthCheck, settings

from arwsim import Instruction, StackStore

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def find_store(lam, want, bias=0.5, start=0, limit=200_000):
    """First seed whose site stacks start with ``want`` = {site: [instr, ...]}."""
    for seed in itertools.count(start):
        if seed - start > limit:
            raise RuntimeError("no seed found")
        st = StackStore(seed, lam, bias)
        if all(st.instruction_at(x, j + 1) == ins
               for x, seq in want.items() for j, ins in enumerate(seq)):
            return st


def find_walk_store(lam, want, start=0, limit=200_000):
    """First seed whose walk stacks start with ``want`` = {(lattice, index): [instr, ...]}."""
    for seed in itertools.count(start):
        if seed - start > limit:
            raise RuntimeError("no seed found")
        st = StackStore(seed, lam)
        if all(st.walk_step(a, j, s + 1) == ins
               for (a, j), seq in want.items() for s, ins in enumerate(seq)):
            return st


@pytest.fixture
def L():
    return Instruction.LEFT


@pytest.fixture
def R():
    return Instruction.RIGHT


@pytest.fixture
def S():
    return Instruction.SLEEP

"""Unlabeled dynamics: legal topplings, stabilization and the truncated odometer.

The stepwise API (:func:`topple`, :func:`apply_sequence`) works on
:class:`~arwsim.core.Configuration` values; :func:`stabilize` and
:func:`run_topplings` drive a compiled kernel over dense arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import IO, Iterable, Sequence

import numpy as np
from numba import njit

from .core import (ARWError, Configuration, GuardExceeded, IllegalToppling, Instruction,
                   Odometer, SiteState, apply_instruction)
from .stacks import STREAM_POLICY, StackStore, site_instruction, split_key, uniform

DEFAULT_GUARD = 10 ** 9

# kernel status codes
STABLE = 0
HALTED = 1
GUARD = 2


class Rule(IntEnum):
    ARW = 0
    SSM = 1


class Policy(IntEnum):
    LEFTMOST = 0
    RIGHTMOST = 1
    FIFO = 2
    RANDOM = 3


class IllegalSequence(ARWError):
    def __init__(self, index: int, site: int):
        super().__init__(f"toppling #{index} at site {site} is illegal")
        self.index = index
        self.site = site


# ---------------------------------------------------------------------------
# compiled kernel

@njit(cache=True, nogil=True)
def _unstable(active, toppable, rule, i):
    if not toppable[i]:
        return False
    if rule == 0:
        return active[i] >= 1
    return active[i] >= 2


@njit(cache=True, nogil=True)
def _move(active, sleeper, i, code, exits):
    """Move one particle from index ``i``; returns the destination index or -1/-2 on exit."""
    active[i] -= 1
    d = i - 1 if code == 1 else i + 1
    if d < 0:
        exits[0] += 1
        return -1
    if d >= active.shape[0]:
        exits[1] += 1
        return -2
    if sleeper[d]:
        sleeper[d] = False
        active[d] = 2
    else:
        active[d] += 1
    return d


@njit(cache=True, nogil=True)
def _topple_site(active, sleeper, odo, cursor, lo, i, k0, k1, p_sleep, p_left, rule,
                 exits, dests):
    """Topple index ``i`` once; writes up to two destinations into ``dests``."""
    odo[i] += 1
    dests[0] = -1
    dests[1] = -1
    if rule == 0:
        code = site_instruction(k0, k1, lo + i, cursor[i], p_sleep, p_left)
        cursor[i] += 1
        if code == 0:
            if active[i] == 1:
                active[i] = 0
                sleeper[i] = True
        else:
            dests[0] = _move(active, sleeper, i, code, exits)
        return
    # SSM: two independent steps; sleep draws are skipped
    for e in range(2):
        code = 0
        while code == 0:
            code = site_instruction(k0, k1, lo + i, cursor[i], p_sleep, p_left)
            cursor[i] += 1
        dests[e] = _move(active, sleeper, i, code, exits)


@njit(cache=True, nogil=True)
def _watch_hit(active, toppable, odo, rule, w, T):
    if w < 0:
        return False
    extra = 1 if _unstable(active, toppable, rule, w) else 0
    return odo[w] + extra >= T


@njit(cache=True, nogil=True)
def _halt(active, toppable, odo, rule, watch, watch_T, exits, halt_exit):
    if halt_exit and exits[0] + exits[1] > 0:
        return True
    if watch_T > 0:
        for w in watch:
            if _watch_hit(active, toppable, odo, rule, w, watch_T):
                return True
    return False


@njit(cache=True, nogil=True)
def stabilize_kernel(active, sleeper, odo, cursor, toppable, lo, k0, k1, p_sleep, p_left,
                     rule, policy, pk0, pk1, guard, watch, watch_T, exits, halt_exit):
    """Topple unstable toppable sites until none remain, a watch fires, or the guard trips.

    ``watch`` lists indices ``w``; the run halts once some ``odo[w]`` plus one
    (if ``w`` is currently unstable) reaches ``watch_T``.  Any toppling the
    run has done is legal, so by least action this certifies
    ``u(w) >= watch_T``.  With ``halt_exit`` the run also halts as soon as a
    particle leaves the array.  Returns ``(status, topplings)``.
    """
    n = active.shape[0]
    dests = np.empty(2, dtype=np.int64)
    steps = 0
    if _halt(active, toppable, odo, rule, watch, watch_T, exits, halt_exit):
        return 1, steps

    if policy == 0 or policy == 1:
        left = policy == 0
        p = 0 if left else n - 1
        while True:
            if left:
                while p < n and not _unstable(active, toppable, rule, p):
                    p += 1
                if p == n:
                    return 0, steps
            else:
                while p >= 0 and not _unstable(active, toppable, rule, p):
                    p -= 1
                if p < 0:
                    return 0, steps
            if steps >= guard:
                return 2, steps
            _topple_site(active, sleeper, odo, cursor, lo, p, k0, k1, p_sleep, p_left,
                         rule, exits, dests)
            steps += 1
            # only p and its neighbours changed
            nxt = p
            for e in range(2):
                d = dests[e]
                if d >= 0 and _unstable(active, toppable, rule, d):
                    if left and d < nxt:
                        nxt = d
                    if not left and d > nxt:
                        nxt = d
            p = nxt
            if _halt(active, toppable, odo, rule, watch, watch_T, exits, halt_exit):
                return 1, steps

    elif policy == 2:
        queue = np.empty(n, dtype=np.int64)
        inq = np.zeros(n, dtype=np.bool_)
        head = 0
        size = 0
        for i in range(n):
            if _unstable(active, toppable, rule, i):
                queue[(head + size) % n] = i
                inq[i] = True
                size += 1
        while size > 0:
            x = queue[head]
            head = (head + 1) % n
            size -= 1
            inq[x] = False
            if not _unstable(active, toppable, rule, x):
                continue
            if steps >= guard:
                return 2, steps
            _topple_site(active, sleeper, odo, cursor, lo, x, k0, k1, p_sleep, p_left,
                         rule, exits, dests)
            steps += 1
            for e in range(2):
                d = dests[e]
                if d >= 0 and not inq[d] and _unstable(active, toppable, rule, d):
                    queue[(head + size) % n] = d
                    inq[d] = True
                    size += 1
            if not inq[x] and _unstable(active, toppable, rule, x):
                queue[(head + size) % n] = x
                inq[x] = True
                size += 1
            if _halt(active, toppable, odo, rule, watch, watch_T, exits, halt_exit):
                return 1, steps
        return 0, steps

    else:
        items = np.empty(n, dtype=np.int64)
        pos = np.full(n, -1, dtype=np.int64)
        size = 0
        for i in range(n):
            if _unstable(active, toppable, rule, i):
                items[size] = i
                pos[i] = size
                size += 1
        draw = 0
        while size > 0:
            if steps >= guard:
                return 2, steps
            draw += 1
            u = uniform(pk0, pk1, draw & 0xFFFFFFFF, draw >> 32, 0, STREAM_POLICY)
            x = items[min(int(u * size), size - 1)]
            _topple_site(active, sleeper, odo, cursor, lo, x, k0, k1, p_sleep, p_left,
                         rule, exits, dests)
            steps += 1
            for e in range(3):
                y = x if e == 2 else dests[e]
                if y < 0:
                    continue
                un = _unstable(active, toppable, rule, y)
                if un and pos[y] < 0:
                    items[size] = y
                    pos[y] = size
                    size += 1
                elif not un and pos[y] >= 0:
                    last = items[size - 1]
                    items[pos[y]] = last
                    pos[last] = pos[y]
                    pos[y] = -1
                    size -= 1
            if _halt(active, toppable, odo, rule, watch, watch_T, exits, halt_exit):
                return 1, steps
        return 0, steps


# ---------------------------------------------------------------------------
# array-level driver

@dataclass
class Lattice:
    """Dense mutable state of the unlabeled process on ``[lo, lo + n)``."""

    lo: int
    active: np.ndarray
    sleeper: np.ndarray
    odometer: np.ndarray
    exits: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=np.int64))

    @classmethod
    def from_config(cls, config: Configuration) -> "Lattice":
        active, sleeper = config.to_arrays()
        return cls(config.lo, active, sleeper, np.zeros_like(active))

    @property
    def hi(self) -> int:
        return self.lo + len(self.active) - 1

    def config(self) -> Configuration:
        return Configuration.from_arrays(self.lo, self.active, self.sleeper)

    def odometer_map(self) -> Odometer:
        return Odometer.from_array(self.lo, self.odometer)

    def total(self) -> int:
        return int(self.active.sum() + self.sleeper.sum())

    def index(self, site: int) -> int:
        return site - self.lo


@dataclass
class RunResult:
    status: int
    topplings: int

    @property
    def halted(self) -> bool:
        return self.status == HALTED


def run_topplings(lat: Lattice, stacks: StackStore, toppable: np.ndarray | None = None,
                  rule: Rule = Rule.ARW, policy: Policy = Policy.LEFTMOST,
                  policy_seed: int = 0, guard: int = DEFAULT_GUARD,
                  watch: Sequence[int] = (), watch_T: int = 0,
                  raise_on_guard: bool = True, halt_exit: bool = False) -> RunResult:
    """Run the kernel on ``lat`` in place, consuming ``stacks`` from their cursors.

    ``toppable`` masks the sites that may be toppled (default: all);
    ``watch`` holds *sites* whose odometer threshold ``watch_T`` halts the run;
    ``halt_exit`` halts at the first particle leaving ``[lat.lo, lat.hi]``.
    """
    n = len(lat.active)
    if toppable is None:
        toppable = np.ones(n, dtype=np.bool_)
    if rule == Rule.SSM and lat.sleeper.any():
        raise ValueError("SSM configurations carry no sleeping particles")
    cursor = stacks.cursor_block(lat.lo, lat.hi)
    k0, k1 = stacks.key
    pk0, pk1 = split_key(policy_seed)
    w = np.array([s - lat.lo for s in watch if lat.lo <= s <= lat.hi], dtype=np.int64)
    status, steps = stabilize_kernel(lat.active, lat.sleeper, lat.odometer, cursor, toppable,
                                     lat.lo, k0, k1, stacks.p_sleep, stacks.p_left, int(rule),
                                     int(policy), pk0, pk1, guard, w, int(watch_T), lat.exits, halt_exit)
    stacks.commit_block(lat.lo, cursor)
    if status == GUARD and raise_on_guard:
        raise GuardExceeded(guard)
    return RunResult(int(status), int(steps))


def interval_mask(lo: int, hi: int, V: tuple[int, int]) -> np.ndarray:
    sites = np.arange(lo, hi + 1)
    return (sites >= V[0]) & (sites <= V[1])


def stabilize(config: Configuration, V: tuple[int, int] | None, stacks: StackStore,
              policy: Policy = Policy.LEFTMOST, guard: int = DEFAULT_GUARD,
              rule: Rule = Rule.ARW, policy_seed: int = 0,
              trace: IO[str] | None = None) -> tuple[Odometer, Configuration]:
    """Stabilize ``config`` in ``V`` (default: the whole universe).

    Returns the odometer ``u_V`` and the final configuration.  With ``trace``
    set, runs the stepwise path and writes one ``step,site,instruction,occupancy``
    line per instruction (leftmost policy).
    """
    V = (config.lo, config.hi) if V is None else V
    if not config.lo <= V[0] <= V[1] <= config.hi:
        raise ValueError(f"V={V} not inside the universe [{config.lo}, {config.hi}]")
    outside = [x for x in config if not V[0] <= x <= V[1]]
    if outside:
        raise ValueError(f"config has particles outside V at {outside[:5]}")
    if trace is not None:
        return _stabilize_traced(config, V, stacks, guard, rule, trace)
    lat = Lattice.from_config(config)
    run_topplings(lat, stacks, interval_mask(lat.lo, lat.hi, V), rule, policy, policy_seed,
                  guard)
    return lat.odometer_map(), lat.config()


# ---------------------------------------------------------------------------
# stepwise API

def is_stable(config: Configuration, site: int, rule: Rule = Rule.ARW) -> bool:
    st = config[site]
    if rule == Rule.SSM:
        return st.occupancy < 2
    return st.active == 0


@dataclass
class EngineState:
    config: Configuration
    stacks: StackStore
    rule: Rule = Rule.ARW
    odometer: dict = field(default_factory=dict)

    def odometer_map(self) -> Odometer:
        return Odometer(self.odometer)


def topple(state: EngineState, site: int, trace_cb=None) -> EngineState:
    """Topple ``site`` once, in place; returns ``state``."""
    cfg = state.config
    if is_stable(cfg, site, state.rule):
        raise IllegalToppling(site, "site is stable" if state.rule == Rule.ARW
                              else "SSM needs at least two particles")
    if state.rule == Rule.ARW:
        instr, _ = state.stacks.consume_next(site)
        cfg = apply_instruction(cfg, site, instr)
        if trace_cb:
            trace_cb(site, instr, cfg.occupancy(site))
    else:
        for _ in range(2):
            instr = Instruction.SLEEP
            while instr is Instruction.SLEEP:
                instr, _ = state.stacks.consume_next(site)
            # SSM sites hold only active particles
            st = cfg[site]
            cfg = cfg.replace({site: SiteState(st.active - 1)})
            dest = site + instr.offset
            if cfg.lo <= dest <= cfg.hi:
                cfg = cfg.replace({dest: SiteState(cfg.occupancy(dest) + 1)})
            if trace_cb:
                trace_cb(site, instr, cfg.occupancy(site))
    state.config = cfg
    state.odometer[site] = state.odometer.get(site, 0) + 1
    return state


def apply_sequence(config: Configuration, sequence: Iterable[int], stacks: StackStore,
                   rule: Rule = Rule.ARW) -> tuple[Configuration, Odometer]:
    """Topple the sites of ``sequence`` in order; raises IllegalSequence(i) on the first illegal one."""
    state = EngineState(config, stacks, rule)
    for i, site in enumerate(sequence):
        try:
            topple(state, site)
        except IllegalToppling:
            raise IllegalSequence(i, site) from None
    return state.config, state.odometer_map()


def _stabilize_traced(config, V, stacks, guard, rule, trace):
    state = EngineState(config, stacks, rule)
    counter = [0]

    def emit(site, instr, occ):
        counter[0] += 1
        trace.write(f"{counter[0]},{site},{instr.name},{occ}\n")

    done = 0
    while True:
        unstable = [x for x in state.config if V[0] <= x <= V[1]
                    and not is_stable(state.config, x, rule)]
        if not unstable:
            break
        if done >= guard:
            raise GuardExceeded(guard)
        topple(state, unstable[0], emit)
        done += 1
    return state.odometer_map(), state.config

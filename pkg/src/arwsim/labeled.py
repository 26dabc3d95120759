"""Labeled dynamics on the renormalized lattice ``K * Z``.

Particles carry labels ``(first, second)``.  A particle labeled ``(i, j)``
follows the killed lazy walk ``zeta_(i, j)`` from ``i*K`` and is relabeled
``(i +- 1, fresh)`` when it reaches ``(i +- 1) * K``.  Particles only wake,
or block the sleep of, particles sharing their first label.  At every step
the active particle with the smallest label moves.

Inside a cell ``(i*K, (i+1)*K)`` a particle's first label is ``i`` or
``i + 1``; the kernels index per-site counters by the *slot*
``first - cell(site)``, which is 0 or 1 (always 0 at lattice points).

The two ends of the universe are absorbing: a particle reaching them is
permanently inactive.  Each such arrival is recorded as one toppling at the
boundary site, so the event "no particle reached the boundary" is exactly
"zero odometer at both ends".
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO

import numpy as np
from numba import njit

from .core import ARWError, Configuration, GuardExceeded, Odometer
from .stacks import StackStore, walk_instruction

ACTIVE = 0
SLEEPY = 1
EXITED = 2

DEFAULT_GUARD = 10 ** 9


class NotOnLattice(ARWError):
    pass


class NoActiveParticle(ARWError):
    pass


# ---------------------------------------------------------------------------
# label heap (min-heap on int64 keys, parallel particle ids)

@njit(cache=True, nogil=True)
def _heap_push(hkey, hid, hsize, key, pid):
    n = hsize[0]
    hsize[0] = n + 1
    while n > 0:
        parent = (n - 1) >> 1
        if hkey[parent] <= key:
            break
        hkey[n] = hkey[parent]
        hid[n] = hid[parent]
        n = parent
    hkey[n] = key
    hid[n] = pid


@njit(cache=True, nogil=True)
def _heap_pop(hkey, hid, hsize):
    n = hsize[0] - 1
    hsize[0] = n
    if n == 0:
        return
    key = hkey[n]
    pid = hid[n]
    i = 0
    while True:
        c = 2 * i + 1
        if c >= n:
            break
        if c + 1 < n and hkey[c + 1] < hkey[c]:
            c += 1
        if hkey[c] >= key:
            break
        hkey[i] = hkey[c]
        hid[i] = hid[c]
        i = c
    hkey[i] = key
    hid[i] = pid


@njit(cache=True, nogil=True)
def _key(first, second, lat_lo):
    return ((first - lat_lo) << 32) | second


# ---------------------------------------------------------------------------
# kernel

@njit(cache=True, nogil=True)
def _cell(y, lo, K, lat_lo):
    return (y - lo) // K + lat_lo


@njit(cache=True, nogil=True)
def _mirror_check(s, lo, cnt, bcount, act_u, slp_u, base_diff, viol):
    j = s - lo
    occ_l = cnt[j, 0] + cnt[j, 1] + bcount[j]
    occ_u = act_u[j] + (1 if slp_u[j] else 0)
    if occ_u - occ_l != base_diff[j]:
        viol[1] += 1


@njit(cache=True, nogil=True)
def labeled_kernel(pos, first, second, step, state, cnt, slp, hkey, hid, hsize,
                   fresh, toppled, Lto, Lnet, Rnet, Rto, odo, bcount, bhits,
                   lo, hi, K, lat_lo, k0, k1, p_sleep, limit, halt_on_exit,
                   mirror, act_u, slp_u, odo_u, base_diff, viol):
    """Run labeled topplings until no active particle is left.

    Stops early after ``limit`` topplings (``limit < 0``: no limit) or, with
    ``halt_on_exit``, at the first boundary arrival.  Returns
    ``(status, topplings)`` with status 0 = stable, 1 = halted on exit,
    2 = limit reached.

    With ``mirror`` set, every toppling is also applied to the unlabeled
    arrays ``act_u``/``slp_u`` at the same site with the same instruction;
    ``viol[0]`` counts topplings that were illegal there and ``viol[1]``
    sites where the occupancy difference left ``base_diff``.
    """
    done = 0
    while hsize[0] > 0:
        if limit >= 0 and done >= limit:
            return 2, done
        i = hid[0]
        a = first[i]
        b = second[i]
        y = pos[i]
        step[i] += 1
        if step[i] == 1:
            toppled[a - lat_lo] += 1
        code = walk_instruction(k0, k1, a, b, step[i], p_sleep)
        odo[y - lo] += 1
        done += 1
        if mirror:
            j = y - lo
            if act_u[j] < 1:
                viol[0] += 1
            odo_u[j] += 1
            if code == 0:
                if act_u[j] == 1:
                    act_u[j] = 0
                    slp_u[j] = True
            elif act_u[j] >= 1:
                act_u[j] -= 1
                d = j - 1 if code == 1 else j + 1
                if slp_u[d]:
                    slp_u[d] = False
                    act_u[d] = 2
                else:
                    act_u[d] += 1
        slot = a - _cell(y, lo, K, lat_lo)
        if code == 0:
            if cnt[y - lo, slot] == 1:
                state[i] = SLEEPY
                slp[y - lo, slot] = i
                _heap_pop(hkey, hid, hsize)
            continue
        cnt[y - lo, slot] -= 1
        z = y - 1 if code == 1 else y + 1
        if z == (a - 1) * K or z == (a + 1) * K:
            a2 = a - 1 if z < a * K else a + 1
            if z < a * K:
                Lto[a - lat_lo] += 1
                Lnet[a - lat_lo] += 1
            else:
                Rto[a - lat_lo] += 1
                Rnet[a - lat_lo] += 1
            b2 = fresh[a2 - lat_lo]
            fresh[a2 - lat_lo] = b2 + 1
            first[i] = a2
            second[i] = b2
            step[i] = 0
            pos[i] = z
            _heap_pop(hkey, hid, hsize)
            if z == lo or z == hi:
                state[i] = EXITED
                bcount[z - lo] += 1
                odo[z - lo] += 1
                bhits[0 if z == lo else 1] += 1
                if mirror:
                    _mirror_check(y, lo, cnt, bcount, act_u, slp_u, base_diff, viol)
                    _mirror_check(z, lo, cnt, bcount, act_u, slp_u, base_diff, viol)
                if halt_on_exit:
                    return 1, done
                continue
            cnt[z - lo, 0] += 1
            _heap_push(hkey, hid, hsize, _key(a2, b2, lat_lo), i)
            s = slp[z - lo, 0]
            if s >= 0:
                state[s] = ACTIVE
                slp[z - lo, 0] = -1
                _heap_push(hkey, hid, hsize, _key(first[s], second[s], lat_lo), s)
        else:
            slot_z = a - _cell(z, lo, K, lat_lo)
            cnt[z - lo, slot_z] += 1
            pos[i] = z
            s = slp[z - lo, slot_z]
            if s >= 0:
                state[s] = ACTIVE
                slp[z - lo, slot_z] = -1
                _heap_push(hkey, hid, hsize, _key(first[s], second[s], lat_lo), s)
        if mirror:
            _mirror_check(y, lo, cnt, bcount, act_u, slp_u, base_diff, viol)
            _mirror_check(z, lo, cnt, bcount, act_u, slp_u, base_diff, viol)
    return 0, done


# ---------------------------------------------------------------------------
# state object

@dataclass
class LatticeStats:
    """Per-lattice-point counts of the ``(x, .)``-labeled particles.

    ``L_to``/``R_to``: walks that reached ``(x-1)K`` / ``(x+1)K``;
    ``L_net``/``R_net``: labels whose final position is left / right of ``xK``
    (including the ones that reached the neighbour);
    ``S_right``: sleepers in ``(xK, (x+1)K)``; ``S_left``: sleepers in ``((x-1)K, xK]``.
    """

    lat_lo: int
    M: np.ndarray
    M_toppled: np.ndarray
    L_to: np.ndarray
    L_net: np.ndarray
    R_net: np.ndarray
    R_to: np.ndarray
    S_right: np.ndarray
    S_left: np.ndarray

    @property
    def lat_hi(self) -> int:
        return self.lat_lo + len(self.M) - 1

    def _get(self, arr, x):
        if self.lat_lo <= x <= self.lat_hi:
            return int(arr[x - self.lat_lo])
        return 0

    def at(self, x: int) -> dict:
        return {name: self._get(getattr(self, name), x)
                for name in ("M", "M_toppled", "L_to", "L_net", "R_net", "R_to",
                             "S_right", "S_left")}

    def flux(self, x: int) -> tuple[int, int]:
        return flux(self, x)

    def write_csv(self, fh: IO[str]) -> None:
        """Header: x,M,L_to,L_net,R_net,R_to,S_right,S_left,F_plus,F_minus."""
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "M", "L_to", "L_net", "R_net", "R_to", "S_right", "S_left",
                    "F_plus", "F_minus"])
        for x in range(self.lat_lo, self.lat_hi + 1):
            d = self.at(x)
            fp, fm = flux(self, x)
            w.writerow([x, d["M"], d["L_to"], d["L_net"], d["R_net"], d["R_to"],
                        d["S_right"], d["S_left"], fp, fm])


def flux(stats: LatticeStats, x: int) -> tuple[int, int]:
    """Net crossings of ``xK + 1/2`` (plus) and ``xK - 1/2`` (minus)."""
    g = stats._get
    f_plus = g(stats.R_net, x) - g(stats.L_to, x + 1)
    f_minus = g(stats.L_net, x) - g(stats.R_to, x - 1)
    return f_plus, f_minus


@dataclass(frozen=True)
class LabeledParticle:
    position: int
    label: tuple[int, int]
    steps_used: int
    state: int

    @property
    def active(self) -> bool:
        return self.state == ACTIVE


class LabeledState:
    """Mutable labeled system on the universe ``[lo, hi]`` (multiples of ``K``)."""

    def __init__(self, lo: int, hi: int, K: int, stacks: StackStore, capacity: int):
        if K < 1 or lo % K or hi % K or lo >= hi:
            raise ValueError(f"universe [{lo}, {hi}] must have endpoints in {K}Z")
        self.lo, self.hi, self.K = lo, hi, K
        self.lat_lo = lo // K
        self.stacks = stacks
        n = hi - lo + 1
        nl = (hi - lo) // K + 1
        self.n_particles = 0
        self.pos = np.zeros(capacity, dtype=np.int64)
        self.first = np.zeros(capacity, dtype=np.int64)
        self.second = np.zeros(capacity, dtype=np.int64)
        self.step_idx = np.zeros(capacity, dtype=np.int64)
        self.state = np.full(capacity, EXITED, dtype=np.int8)
        self.cnt = np.zeros((n, 2), dtype=np.int64)
        self.slp = np.full((n, 2), -1, dtype=np.int64)
        self.hkey = np.zeros(capacity, dtype=np.int64)
        self.hid = np.zeros(capacity, dtype=np.int64)
        self.hsize = np.zeros(1, dtype=np.int64)
        self.fresh = np.ones(nl, dtype=np.int64)
        self.toppled = np.zeros(nl, dtype=np.int64)
        self.L_to = np.zeros(nl, dtype=np.int64)
        self.L_net = np.zeros(nl, dtype=np.int64)
        self.R_net = np.zeros(nl, dtype=np.int64)
        self.R_to = np.zeros(nl, dtype=np.int64)
        self.odo = np.zeros(n, dtype=np.int64)
        self.bcount = np.zeros(n, dtype=np.int64)
        self.bhits = np.zeros(2, dtype=np.int64)
        self.topplings = 0
        self._mirror = None

    @property
    def lat_hi(self) -> int:
        return self.hi // self.K

    # -- construction ------------------------------------------------------

    def add_particle(self, x: int) -> tuple[int, int]:
        """Add an active particle at lattice point ``x*K`` with the next fresh label there."""
        if self.n_particles == len(self.pos):
            raise ValueError("particle capacity exhausted")
        site = x * self.K
        if not self.lo <= site <= self.hi:
            raise ValueError(f"lattice point {x} outside the universe")
        i = self.n_particles
        self.n_particles += 1
        b = int(self.fresh[x - self.lat_lo])
        self.fresh[x - self.lat_lo] = b + 1
        self.pos[i], self.first[i], self.second[i], self.step_idx[i] = site, x, b, 0
        j = site - self.lo
        if site in (self.lo, self.hi):
            self.state[i] = EXITED
            self.bcount[j] += 1
            self.odo[j] += 1
            self.bhits[0 if site == self.lo else 1] += 1
            return (x, b)
        self.state[i] = ACTIVE
        self.cnt[j, 0] += 1
        _heap_push(self.hkey, self.hid, self.hsize, _key(x, b, self.lat_lo), i)
        s = self.slp[j, 0]
        if s >= 0:
            self.state[s] = ACTIVE
            self.slp[j, 0] = -1
            _heap_push(self.hkey, self.hid, self.hsize,
                       _key(int(self.first[s]), int(self.second[s]), self.lat_lo), s)
        return (x, b)

    # -- dynamics ----------------------------------------------------------

    def attach_mirror(self, active: np.ndarray, sleeper: np.ndarray, odometer: np.ndarray
                      ) -> np.ndarray:
        """Mirror every toppling into unlabeled arrays over the same universe."""
        occ_l = self.cnt.sum(axis=1) + self.bcount
        base = active + sleeper.astype(np.int64) - occ_l
        self._mirror = (active, sleeper, odometer, base, np.zeros(2, dtype=np.int64))
        return self._mirror[4]

    def run(self, limit: int = -1, halt_on_exit: bool = False) -> int:
        if self._mirror is None:
            dummy_i = np.zeros(1, dtype=np.int64)
            act_u, slp_u, odo_u, base, viol = (dummy_i, np.zeros(1, dtype=np.bool_), dummy_i,
                                               dummy_i, np.zeros(2, dtype=np.int64))
            mirror = False
        else:
            act_u, slp_u, odo_u, base, viol = self._mirror
            mirror = True
        k0, k1 = self.stacks.key
        status, done = labeled_kernel(
            self.pos, self.first, self.second, self.step_idx, self.state, self.cnt, self.slp,
            self.hkey, self.hid, self.hsize, self.fresh, self.toppled, self.L_to, self.L_net,
            self.R_net, self.R_to, self.odo, self.bcount, self.bhits, self.lo, self.hi, self.K,
            self.lat_lo, k0, k1, self.stacks.p_sleep, limit, halt_on_exit, mirror, act_u,
            slp_u, odo_u, base, viol)
        self.topplings += int(done)
        return int(status)

    def step(self) -> "LabeledState":
        if self.hsize[0] == 0:
            raise NoActiveParticle("no active particle inside the universe")
        self.run(limit=1)
        return self

    def stabilize(self, guard: int = DEFAULT_GUARD, halt_on_exit: bool = False) -> int:
        status = self.run(limit=guard, halt_on_exit=halt_on_exit)
        if status == 2:
            raise GuardExceeded(guard)
        return status

    # -- views ------------------------------------------------------------

    @property
    def mirror_violations(self) -> tuple[int, int]:
        if self._mirror is None:
            return (0, 0)
        v = self._mirror[4]
        return int(v[0]), int(v[1])

    @property
    def is_stable(self) -> bool:
        return int(self.hsize[0]) == 0

    @property
    def boundary_hit(self) -> bool:
        return bool(self.bhits.sum())

    def particles(self) -> list[LabeledParticle]:
        return [LabeledParticle(int(self.pos[i]), (int(self.first[i]), int(self.second[i])),
                                int(self.step_idx[i]), int(self.state[i]))
                for i in range(self.n_particles)]

    def renormalized_odometer(self) -> dict[int, int]:
        """``M(x)``: number of labels issued at each lattice point."""
        return {self.lat_lo + k: int(f - 1) for k, f in enumerate(self.fresh) if f > 1}

    def odometer(self) -> Odometer:
        return Odometer.from_array(self.lo, self.odo)

    def configuration(self) -> Configuration:
        """Unlabeled view: sleepers as active counts/flags; absorbed particles included."""
        occ = self.cnt.sum(axis=1) + self.bcount
        active = occ.copy()
        sleeper = np.zeros(len(occ), dtype=np.bool_)
        for i in range(self.n_particles):
            if self.state[i] == SLEEPY:
                j = self.pos[i] - self.lo
                if occ[j] == 1:
                    active[j] = 0
                    sleeper[j] = True
        return Configuration.from_arrays(self.lo, active, sleeper)

    def sleepers_of(self, x: int) -> list[tuple[int, tuple[int, int]]]:
        """Final ``(position, label)`` of the sleeping ``(x, .)`` particles, sorted."""
        return sorted((int(self.pos[i]), (int(self.first[i]), int(self.second[i])))
                      for i in range(self.n_particles)
                      if self.state[i] == SLEEPY and self.first[i] == x)

    def stats(self) -> LatticeStats:
        L_net = self.L_net.copy()
        R_net = self.R_net.copy()
        S_left = np.zeros_like(L_net)
        S_right = np.zeros_like(L_net)
        for i in range(self.n_particles):
            if self.state[i] != SLEEPY:
                continue
            k = int(self.first[i]) - self.lat_lo
            y = int(self.pos[i])
            origin = int(self.first[i]) * self.K
            if y < origin:
                L_net[k] += 1
                S_left[k] += 1
            elif y > origin:
                R_net[k] += 1
                S_right[k] += 1
            else:
                S_left[k] += 1
        return LatticeStats(self.lat_lo, self.fresh - 1, self.toppled.copy(), self.L_to.copy(),
                            L_net, R_net, self.R_to.copy(), S_right, S_left)


# ---------------------------------------------------------------------------
# operations

def init_labels(config: Configuration, K: int, stacks: StackStore,
                universe: tuple[int, int] | None = None) -> LabeledState:
    """Label the particles of ``config`` (all on ``K*Z``) as ``(i, 1..n_i)`` at ``i*K``."""
    if any(st.sleeper for st in config.states.values()):
        raise ValueError("labeled dynamics starts from active particles only")
    off = [x for x in config if x % K]
    if off:
        raise NotOnLattice(f"particles off {K}Z at {off[:5]}")
    lo, hi = universe if universe is not None else (config.lo, config.hi)
    state = LabeledState(lo, hi, K, stacks, max(config.total(), 1))
    for x, st in config.states.items():
        for _ in range(st.active):
            state.add_particle(x // K)
    return state


def labeled_step(state: LabeledState) -> LabeledState:
    return state.step()


@dataclass
class LabeledRun:
    odometer: Odometer
    M: dict
    final: LabeledState
    stats: LatticeStats
    A_r: bool


def labeled_stabilize(eta_hat: Configuration, r: int, K: int, stacks: StackStore,
                      guard: int = DEFAULT_GUARD, halt_on_exit: bool = False) -> LabeledRun:
    """Stabilize ``eta_hat`` (supported on ``K*Z``) in the universe ``[-2r, 2r]``.

    Particles of ``eta_hat`` sitting at ``+-2r`` count as boundary arrivals.
    With ``halt_on_exit`` the run stops at the first boundary arrival (the
    indicator is still exact, the other outputs are partial).
    """
    if r < 1 or (2 * r) % K:
        raise ValueError(f"K={K} must divide 2r={2 * r}")
    if eta_hat.support() and not (-2 * r <= min(eta_hat) and max(eta_hat) <= 2 * r):
        raise ValueError("eta_hat must be supported on [-2r, 2r]")
    state = init_labels(eta_hat.with_universe(-2 * r, 2 * r), K, stacks)
    if not (halt_on_exit and state.boundary_hit):
        state.stabilize(guard, halt_on_exit)
    return LabeledRun(state.odometer(), state.renormalized_odometer(), state, state.stats(),
                      not state.boundary_hit)


@dataclass
class SingleSite:
    L_to: int
    L_net: int
    R_net: int
    R_to: int
    final: list

    def counts(self) -> tuple[int, int, int, int]:
        return self.L_to, self.L_net, self.R_net, self.R_to


def _single_site_state(x: int, K: int, stacks: StackStore, capacity: int) -> LabeledState:
    return LabeledState((x - 1) * K, (x + 1) * K, K, stacks, max(capacity, 1))


def _single_site_result(state: LabeledState, x: int) -> SingleSite:
    d = state.stats().at(x)
    return SingleSite(d["L_to"], d["L_net"], d["R_net"], d["R_to"], state.sleepers_of(x))


def single_site(x: int, m: int, K: int, stacks: StackStore,
                guard: int = DEFAULT_GUARD) -> SingleSite:
    """Labeled dynamics in ``((x-1)K, (x+1)K)`` from ``m`` particles ``(x, 1..m)`` at ``xK``."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    state = _single_site_state(x, K, stacks, m)
    for _ in range(m):
        state.add_particle(x)
    state.stabilize(guard)
    return _single_site_result(state, x)


def left_count_function(x: int, K: int, stacks: StackStore, up_to: int,
                        guard: int = DEFAULT_GUARD) -> list[int]:
    """``l_x(j)`` for ``j = 0..up_to``: walks of ``(x, .)`` reaching ``(x-1)K``.

    Built incrementally: after stabilizing ``j`` particles, the particle
    ``(x, j+1)`` is added at ``xK`` and the system is stabilized again on the
    remaining stack elements.
    """
    state = _single_site_state(x, K, stacks, up_to)
    out = [0]
    for _ in range(up_to):
        state.add_particle(x)
        state.stabilize(guard)
        out.append(int(state.L_to[x - state.lat_lo]))
    return out

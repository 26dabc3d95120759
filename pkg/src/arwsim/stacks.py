"""Seed-keyed, random-access instruction stacks.

Every instruction is a pure function of ``(seed, site, index)``: the seed is
the 64-bit key of a Philox4x32-10 block function and the counter block is

    (index mod 2**32, index div 2**32, site mod 2**32, stream)

with ``stream = 0`` for the single-step stacks at sites and ``stream = 1``
for the killed lazy-walk stacks at lattice points (counter
``(step, walk index, lattice index, 1)``).  The first two output words give
a 53-bit uniform ``u`` in [0, 1); the instruction is Sleep if
``u < lam/(lam+1)``, StepLeft if ``u < (lam+q)/(lam+1)`` and StepRight
otherwise.  These choices are fixed so that runs are bit-reproducible on
any platform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import ARWError, Instruction

MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)

STREAM_SITE = 0
STREAM_WALK = 1
STREAM_POLICY = 2

DEFAULT_MAX_WALK = 10 ** 8


class RestoreMismatch(ARWError):
    """A cursor snapshot was taken from a store with a different seed."""


class WalkGuardExceeded(ARWError):
    """A walk path exceeded the configured maximum length."""


@njit(cache=True, nogil=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32-10 on one counter block; all arguments are uint64 < 2**32."""
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        n0 = ((p1 >> np.uint64(32)) ^ c1 ^ k0) & MASK32
        n1 = p1 & MASK32
        n2 = ((p0 >> np.uint64(32)) ^ c3 ^ k1) & MASK32
        n3 = p0 & MASK32
        c0, c1, c2, c3 = n0, n1, n2, n3
        k0 = (k0 + _W0) & MASK32
        k1 = (k1 + _W1) & MASK32
    return c0, c1, c2, c3


@njit(cache=True, nogil=True)
def uniform(k0, k1, a, b, site, stream):
    """53-bit uniform for counter ``(a, b, site, stream)``; ``a``/``b`` are int64 words."""
    c0, c1, _, _ = philox4x32(np.uint64(a) & MASK32, np.uint64(b) & MASK32,
                              np.uint64(site) & MASK32, np.uint64(stream),
                              k0, k1)
    hi = c0 >> np.uint64(5)
    lo = c1 >> np.uint64(6)
    return (float(hi) * 67108864.0 + float(lo)) * (1.0 / 9007199254740992.0)


@njit(cache=True, nogil=True)
def site_instruction(k0, k1, site, index, p_sleep, p_left):
    """Instruction code at ``(site, index)``; ``p_left`` is the cumulative Sleep+Left mass."""
    u = uniform(k0, k1, index & 0xFFFFFFFF, index >> 32, site, STREAM_SITE)
    if u < p_sleep:
        return 0
    if u < p_left:
        return 1
    return 2


@njit(cache=True, nogil=True)
def _site_block(k0, k1, site, start, count, p_sleep, p_left):
    out = np.empty(count, dtype=np.int8)
    for i in range(count):
        out[i] = site_instruction(k0, k1, site, start + i, p_sleep, p_left)
    return out


@njit(cache=True, nogil=True)
def walk_instruction(k0, k1, lattice_index, walk_index, step, p_sleep):
    """Step ``step`` (1-based) of walk ``(lattice_index, walk_index)``; symmetric."""
    u = uniform(k0, k1, step, walk_index, lattice_index, STREAM_WALK)
    if u < p_sleep:
        return 0
    if u < 0.5 * (1.0 + p_sleep):
        return 1
    return 2


@njit(cache=True, nogil=True)
def _walk_block(k0, k1, lattice_index, walk_index, K, p_sleep, max_len):
    out = np.empty(64, dtype=np.int8)
    pos = 0
    n = 0
    while True:
        if n >= max_len:
            return out[:n], False
        code = walk_instruction(k0, k1, lattice_index, walk_index, n + 1, p_sleep)
        if n == out.shape[0]:
            grown = np.empty(2 * n, dtype=np.int8)
            grown[:n] = out
            out = grown
        out[n] = code
        n += 1
        if code == 1:
            pos -= 1
        elif code == 2:
            pos += 1
        if pos == K or pos == -K:
            return out[:n], True


def parse_seed(seed: int | str) -> int:
    """Accept an int or a decimal / ``0x``-prefixed hex string; must fit in 64 bits."""
    if isinstance(seed, str):
        s = seed.strip().lower()
        value = int(s, 16) if s.startswith("0x") else int(s, 10)
    else:
        value = int(seed)
    if not 0 <= value < 2 ** 64:
        raise ValueError(f"seed {seed!r} does not fit in 64 bits")
    return value


def split_key(seed: int) -> tuple[np.uint64, np.uint64]:
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def sleep_probability(lam: float) -> float:
    return lam / (lam + 1.0)


@dataclass(frozen=True)
class WalkPath:
    origin: int
    steps: tuple[Instruction, ...]
    endpoint: int

    def __len__(self) -> int:
        return len(self.steps)

    def positions(self) -> list[int]:
        pos = [self.origin]
        for s in self.steps:
            pos.append(pos[-1] + s.offset)
        return pos


@dataclass(frozen=True)
class CursorSnapshot:
    seed: int
    cursors: dict


class StackStore:
    """Random-access instruction stacks with per-site consumption cursors.

    ``lam`` must be positive; ``bias`` is the probability that a non-sleep
    step goes left (``0.5`` is the symmetric walk).
    """

    def __init__(self, seed: int | str, lam: float, bias: float = 0.5,
                 max_walk: int = DEFAULT_MAX_WALK):
        if not lam > 0:
            raise ValueError("lambda must be positive")
        if not 0.0 <= bias <= 1.0:
            raise ValueError("bias must lie in [0, 1]")
        self.seed = parse_seed(seed)
        self.lam = float(lam)
        self.bias = float(bias)
        self.max_walk = int(max_walk)
        self.key = split_key(self.seed)
        self.p_sleep = sleep_probability(self.lam)
        self.p_left = (self.lam + self.bias) / (self.lam + 1.0)
        self._cursor: dict[int, int] = {}

    def __repr__(self):
        return f"StackStore(seed={self.seed:#x}, lam={self.lam!r}, bias={self.bias!r})"

    def instruction_at(self, site: int, index: int) -> Instruction:
        if index < 1:
            raise ValueError("stack indices start at 1")
        k0, k1 = self.key
        return Instruction(site_instruction(k0, k1, site, index, self.p_sleep, self.p_left))

    def instruction_block(self, site: int, start: int, count: int) -> np.ndarray:
        """Codes of ``instruction_at(site, start .. start+count-1)`` as an int8 array."""
        if start < 1:
            raise ValueError("stack indices start at 1")
        k0, k1 = self.key
        return _site_block(k0, k1, site, start, count, self.p_sleep, self.p_left)

    def cursor(self, site: int) -> int:
        return self._cursor.get(site, 1)

    def consume_next(self, site: int) -> tuple[Instruction, int]:
        index = self.cursor(site)
        self._cursor[site] = index + 1
        return self.instruction_at(site, index), index

    def walk_step(self, lattice_index: int, index: int, step: int) -> Instruction:
        k0, k1 = self.key
        return Instruction(walk_instruction(k0, k1, lattice_index, index, step, self.p_sleep))

    def walk_at(self, lattice_index: int, index: int, K: int) -> WalkPath:
        if K < 1 or index < 1:
            raise ValueError("need K >= 1 and index >= 1")
        k0, k1 = self.key
        codes, finished = _walk_block(k0, k1, lattice_index, index, K, self.p_sleep,
                                      self.max_walk)
        if not finished:
            raise WalkGuardExceeded(f"walk ({lattice_index}, {index}) longer than "
                                    f"{self.max_walk} steps")
        steps = tuple(Instruction(int(c)) for c in codes)
        end = lattice_index * K + sum(s.offset for s in steps)
        return WalkPath(lattice_index * K, steps, end)

    def snapshot_cursors(self) -> CursorSnapshot:
        return CursorSnapshot(self.seed, dict(self._cursor))

    def restore_cursors(self, snap: CursorSnapshot) -> None:
        if snap.seed != self.seed:
            raise RestoreMismatch(f"snapshot seed {snap.seed:#x} != store seed {self.seed:#x}")
        self._cursor = dict(snap.cursors)

    def reset_cursors(self) -> None:
        self._cursor = {}

    def cursor_block(self, lo: int, hi: int) -> np.ndarray:
        """Cursors of ``[lo, hi]`` as an int64 array, for the kernels."""
        out = np.ones(hi - lo + 1, dtype=np.int64)
        for x, c in self._cursor.items():
            if lo <= x <= hi:
                out[x - lo] = c
        return out

    def commit_block(self, lo: int, block: np.ndarray) -> None:
        for i in np.flatnonzero(block != 1):
            self._cursor[lo + int(i)] = int(block[i])

"""Configurations, site states, instructions and odometers.

A site holds either some number of active particles or a single sleeping
particle.  The sleeping state is stored as a flag next to the active count,
so a site with ``sleeper=True`` always has ``active == 0`` and occupancy 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Mapping

import numpy as np


class ARWError(Exception):
    """Base class for errors raised by the simulation engines."""


class IllegalToppling(ARWError):
    """A toppling was requested at a stable site."""

    def __init__(self, site: int, reason: str = "site is stable"):
        super().__init__(f"illegal toppling at {site}: {reason}")
        self.site = site


class GuardExceeded(ARWError):
    """Stabilization used more topplings than the configured guard."""

    def __init__(self, guard: int, what: str = "topplings"):
        super().__init__(f"more than {guard} {what}")
        self.guard = guard


class Instruction(IntEnum):
    """One stack instruction.  The integer codes are shared with the kernels."""

    SLEEP = 0
    LEFT = 1
    RIGHT = 2

    @property
    def offset(self) -> int:
        return (0, -1, 1)[self]


@dataclass(frozen=True)
class SiteState:
    active: int = 0
    sleeper: bool = False

    def __post_init__(self):
        if self.active < 0:
            raise ValueError("active count must be nonnegative")
        if self.sleeper and self.active:
            raise ValueError("a sleeping particle must be alone at its site")

    @property
    def occupancy(self) -> int:
        return self.active + int(self.sleeper)

    @property
    def empty(self) -> bool:
        return self.occupancy == 0


EMPTY = SiteState()
SLEEPER = SiteState(0, True)


@dataclass(frozen=True)
class Configuration:
    """Finitely supported particle configuration on the universe ``[lo, hi]``.

    Particles that leave the universe are deleted.  Empty sites are never
    stored, so two configurations compare equal iff they hold the same
    particles in the same states.
    """

    lo: int
    hi: int
    states: Mapping[int, SiteState] = field(default_factory=dict)

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"empty universe [{self.lo}, {self.hi}]")
        clean = {}
        for site, st in self.states.items():
            if isinstance(st, int):
                st = SiteState(st)
            if st.empty:
                continue
            if not self.lo <= site <= self.hi:
                raise ValueError(f"site {site} outside universe [{self.lo}, {self.hi}]")
            clean[int(site)] = st
        object.__setattr__(self, "states", dict(sorted(clean.items())))

    @classmethod
    def from_counts(cls, lo: int, hi: int, counts: Mapping[int, int]) -> "Configuration":
        """All-active configuration with ``counts[x]`` particles at ``x``."""
        return cls(lo, hi, {x: SiteState(n) for x, n in counts.items()})

    @classmethod
    def from_arrays(cls, lo: int, active: np.ndarray, sleeper: np.ndarray | None = None
                    ) -> "Configuration":
        hi = lo + len(active) - 1
        states = {}
        for i in np.flatnonzero(active if sleeper is None else (active > 0) | sleeper):
            states[lo + int(i)] = SiteState(int(active[i]),
                                            bool(sleeper[i]) if sleeper is not None else False)
        return cls(lo, hi, states)

    def to_arrays(self, lo: int | None = None, hi: int | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(active, sleeper)`` arrays over ``[lo, hi]`` (default: the universe)."""
        lo = self.lo if lo is None else lo
        hi = self.hi if hi is None else hi
        active = np.zeros(hi - lo + 1, dtype=np.int64)
        sleeper = np.zeros(hi - lo + 1, dtype=np.bool_)
        for x, st in self.states.items():
            if not lo <= x <= hi:
                raise ValueError(f"site {x} outside [{lo}, {hi}]")
            active[x - lo] = st.active
            sleeper[x - lo] = st.sleeper
        return active, sleeper

    def __getitem__(self, site: int) -> SiteState:
        return self.states.get(site, EMPTY)

    def __iter__(self) -> Iterator[int]:
        return iter(self.states)

    def occupancy(self, site: int) -> int:
        return self[site].occupancy

    def total(self) -> int:
        return sum(st.occupancy for st in self.states.values())

    def active_total(self) -> int:
        return sum(st.active for st in self.states.values())

    def support(self) -> list[int]:
        return list(self.states)

    def replace(self, updates: Mapping[int, SiteState]) -> "Configuration":
        states = dict(self.states)
        states.update(updates)
        return Configuration(self.lo, self.hi, states)

    def restrict(self, lo: int, hi: int) -> "Configuration":
        """Keep only the particles in ``[lo, hi]``; the universe is unchanged."""
        return Configuration(self.lo, self.hi,
                             {x: s for x, s in self.states.items() if lo <= x <= hi})

    def with_universe(self, lo: int, hi: int) -> "Configuration":
        return Configuration(lo, hi, self.states)

    def __le__(self, other: "Configuration") -> bool:
        return all(st.occupancy <= other.occupancy(x) for x, st in self.states.items())


def occupancy(config: Configuration, site: int) -> int:
    return config.occupancy(site)


def is_stable(config: Configuration, site: int) -> bool:
    """Stable iff the site is empty or holds a single sleeping particle."""
    return config[site].active == 0


def apply_instruction(config: Configuration, site: int, instr: Instruction) -> Configuration:
    """Apply one stack instruction at an unstable site and return the new configuration."""
    st = config[site]
    if st.active == 0:
        raise IllegalToppling(site)
    instr = Instruction(instr)
    if instr is Instruction.SLEEP:
        if st.active == 1:
            return config.replace({site: SLEEPER})
        return config
    updates = {site: SiteState(st.active - 1)}
    dest = site + instr.offset
    if config.lo <= dest <= config.hi:
        d = config[dest]
        # an arriving particle wakes a sleeper
        updates[dest] = SiteState(d.occupancy + 1)
    return config.replace(updates)


@dataclass(frozen=True)
class Odometer:
    """Number of topplings per site.  Zero entries are dropped."""

    counts: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for x, n in self.counts.items():
            if n < 0:
                raise ValueError("odometer counts are nonnegative")
            if n:
                clean[int(x)] = int(n)
        object.__setattr__(self, "counts", dict(sorted(clean.items())))

    @classmethod
    def from_array(cls, lo: int, arr: np.ndarray) -> "Odometer":
        return cls({lo + int(i): int(arr[i]) for i in np.flatnonzero(arr)})

    def __getitem__(self, site: int) -> int:
        return self.counts.get(site, 0)

    def __iter__(self) -> Iterator[int]:
        return iter(self.counts)

    def total(self) -> int:
        return sum(self.counts.values())

    def __le__(self, other: "Odometer") -> bool:
        return all(n <= other[x] for x, n in self.counts.items())

    def __ge__(self, other: "Odometer") -> bool:
        return other <= self

    def __add__(self, other: "Odometer") -> "Odometer":
        keys = set(self.counts) | set(other.counts)
        return Odometer({x: self[x] + other[x] for x in keys})

    def to_array(self, lo: int, hi: int) -> np.ndarray:
        out = np.zeros(hi - lo + 1, dtype=np.int64)
        for x, n in self.counts.items():
            out[x - lo] = n
        return out


@dataclass(frozen=True)
class ModelParams:
    """Density ``mu``, sleep rate ``lam`` and left-step probability ``bias``."""

    mu: float = 0.0
    lam: float = 1.0
    bias: float = 0.5

    def __post_init__(self):
        if not self.mu >= 0:
            raise ValueError("mu must be nonnegative")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not 0.0 <= self.bias <= 1.0:
            raise ValueError("bias must lie in [0, 1]")



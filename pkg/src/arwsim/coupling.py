"""Three-round coupling of the unlabeled and labeled processes on ``[-2r, 2r]``.

Round 1 topples the unlabeled process off ``K*Z`` until every active
particle sits on the lattice; round 2 runs the labeled dynamics from those
particles and applies every labeled toppling to the unlabeled process with
the same instruction; round 3 finishes the unlabeled stabilization on the
site stacks.

Both processes absorb particles at ``+-2r``.  For the unlabeled process the
odometer at an endpoint is defined as the number of particles absorbed
there, matching the labeled convention, so domination can be checked on the
whole of ``[-2r, 2r]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ARWError, Configuration, Odometer
from .engine import DEFAULT_GUARD, Lattice, Policy, run_topplings
from .labeled import LabeledState, init_labels
from .stacks import StackStore


class CouplingViolation(ARWError):
    """Round 2 left lockstep: an illegal mirrored toppling or an occupancy mismatch."""


@dataclass(frozen=True)
class CoupledRun:
    eta: Configuration
    eta_tilde: Configuration
    unlabeled_odometer: Odometer
    labeled_odometer: Odometer
    tilde_count: int
    final: Configuration
    labeled: LabeledState
    round_topplings: tuple[int, int, int]
    illegal_mirrored: int
    lockstep_mismatches: int

    @property
    def dominated(self) -> bool:
        """``u_V(x) >= u_{*,V}(x)`` for every site."""
        return self.labeled_odometer <= self.unlabeled_odometer

    @property
    def A_r(self) -> bool:
        return not self.labeled.boundary_hit


def _check_geometry(r: int, K: int) -> None:
    if r < 1 or K < 1 or (2 * r) % K:
        raise ValueError(f"K={K} must divide 2r={2 * r}")


def _interior_off_lattice(lo: int, hi: int, K: int) -> np.ndarray:
    sites = np.arange(lo, hi + 1)
    mask = sites % K != 0
    mask[0] = mask[-1] = False
    return mask


def _lattice(eta: Configuration, r: int) -> Lattice:
    if eta.support() and not (-2 * r <= min(eta) and max(eta) <= 2 * r):
        raise ValueError("eta must be supported on [-2r, 2r]")
    return Lattice.from_config(eta.with_universe(-2 * r, 2 * r))


def _round_one(lat: Lattice, K: int, stacks: StackStore, guard: int) -> tuple[Configuration, int]:
    res = run_topplings(lat, stacks, _interior_off_lattice(lat.lo, lat.hi, K),
                        policy=Policy.LEFTMOST, guard=guard)
    on = np.zeros_like(lat.active)
    on[::K] = lat.active[::K]
    return Configuration.from_arrays(lat.lo, on), res.topplings


def round_one(eta: Configuration, K: int, stacks: StackStore, r: int | None = None,
              guard: int = DEFAULT_GUARD) -> Configuration:
    """Topple every active particle off ``K*Z`` until it lands on the lattice or sleeps.

    The universe is ``[-2r, 2r]`` (default ``r``: smallest with ``K | 2r``
    covering ``eta``'s universe).  Returns the active configuration on ``K*Z``.
    """
    if r is None:
        half = max(abs(eta.lo), abs(eta.hi), 1)
        r = -(-half // K) * K
    _check_geometry(r, K)
    lat = _lattice(eta, r)
    tilde, _ = _round_one(lat, K, stacks, guard)
    return tilde


def coupled_stabilize(eta: Configuration, r: int, K: int, stacks: StackStore | int | str,
                      guard: int = DEFAULT_GUARD, lam: float | None = None,
                      lockstep: bool = False) -> CoupledRun:
    """Run the three-round coupling on ``[-2r, 2r]``.

    ``stacks`` may be a ``StackStore`` or a seed (then ``lam`` is required).
    With ``lockstep`` a ``CouplingViolation`` is raised if round 2 ever
    topples a site that is stable for the unlabeled process, or if the
    occupancy of any site differs from the labeled one by anything other
    than the sleepers left behind by round 1.
    """
    _check_geometry(r, K)
    if not isinstance(stacks, StackStore):
        if lam is None:
            raise ValueError("lam is required when a seed is given")
        stacks = StackStore(stacks, lam)
    lat = _lattice(eta, r)
    lo, hi = lat.lo, lat.hi

    tilde, t1 = _round_one(lat, K, stacks, guard)

    # round 2: the labeled particles replace the on-lattice actives
    labeled = init_labels(tilde, K, stacks, universe=(lo, hi))
    labeled.attach_mirror(lat.active, lat.sleeper, lat.odometer)
    labeled.stabilize(guard)
    t2 = labeled.topplings
    illegal, mismatches = labeled.mirror_violations
    if lockstep and (illegal or mismatches):
        raise CouplingViolation(f"{illegal} illegal mirrored topplings, "
                                f"{mismatches} occupancy mismatches")

    interior = np.ones(len(lat.active), dtype=np.bool_)
    interior[0] = interior[-1] = False
    t3 = run_topplings(lat, stacks, interior, policy=Policy.LEFTMOST, guard=guard).topplings

    odo = lat.odometer.copy()
    odo[0] += lat.active[0] + int(lat.sleeper[0])
    odo[-1] += lat.active[-1] + int(lat.sleeper[-1])
    return CoupledRun(eta, tilde, Odometer.from_array(lo, odo), labeled.odometer(),
                      tilde.total(), lat.config(), labeled, (t1, t2, t3), illegal, mismatches)

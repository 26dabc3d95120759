import numpy as np
import pytest

from arwsim import (Configuration, Instruction, SiteState, StackStore,
                    coupled_stabilize, round_one)

from conftest import find_store

L, R, S = Instruction.LEFT, Instruction.RIGHT, Instruction.SLEEP


def random_eta(rng, r, mu):
    counts = rng.poisson(mu, size=2 * r + 1)
    return Configuration(-r, r, {x - r: int(n) for x, n in enumerate(counts) if n})


def test_round_one_on_lattice_is_identity():
    eta = Configuration(-8, 8, {-4: 2, 0: 1, 8: 1})
    stacks = StackStore(1, 0.1)
    assert round_one(eta, 4, stacks, r=4).with_universe(-8, 8) == eta
    assert stacks.snapshot_cursors().cursors == {}


def test_round_one_forced_walk():
    stacks = find_store(0.1, {1: [R], 2: [R], 3: [R]})
    tilde = round_one(Configuration(-4, 4, {1: 1}), 4, stacks, r=2)
    assert tilde.states == {4: SiteState(1)}


def test_round_one_sleepers_excluded():
    stacks = find_store(0.5, {1: [S]})
    tilde = round_one(Configuration(-4, 4, {1: 1}), 4, stacks, r=2)
    assert tilde.total() == 0


def test_round_one_most_particles_reach_lattice():
    # each particle reaches K*Z with probability >= 3/4 when lambda is small
    rng = np.random.default_rng(0)
    frac = []
    for s in range(50):
        eta = random_eta(rng, 32, 0.5)
        frac.append(round_one(eta, 8, StackStore(s, 1e-3), r=32).total() / max(eta.total(), 1))
    assert np.mean(frac) > 0.75


def test_coupled_empty():
    run = coupled_stabilize(Configuration(-8, 8), 8, 4, 3, lam=0.1)
    assert run.unlabeled_odometer.total() == run.labeled_odometer.total() == 0
    assert run.tilde_count == 0 and run.dominated and run.A_r


def test_coupled_needs_geometry_and_lambda():
    with pytest.raises(ValueError):
        coupled_stabilize(Configuration(-8, 8), 8, 5, 3, lam=0.1)
    with pytest.raises(ValueError):
        coupled_stabilize(Configuration(-8, 8), 8, 4, 3)


def test_domination_and_lockstep():
    rng = np.random.default_rng(1)
    for t in range(100):
        K = int(rng.choice([2, 4, 8]))
        r = int(rng.choice([K, 2 * K, 4 * K]))
        lam = float(rng.choice([0.01, 0.1, 1.0]))
        eta = random_eta(rng, r, float(rng.uniform(0.2, 1.2)))
        run = coupled_stabilize(eta, r, K, StackStore(t, lam), lockstep=True)
        assert run.dominated, t
        assert (run.illegal_mirrored, run.lockstep_mismatches) == (0, 0)
        assert run.tilde_count == run.eta_tilde.total() <= eta.total()
        assert all(x % K == 0 for x in run.eta_tilde)
        # every particle either sleeps inside or was absorbed at an end
        final = run.final
        inside = sum(final.occupancy(x) for x in range(-2 * r + 1, 2 * r))
        ends = run.unlabeled_odometer[-2 * r] + run.unlabeled_odometer[2 * r]
        assert inside + ends == eta.total()


def test_coupled_seed_reproducible():
    eta = Configuration(-16, 16, {0: 3, 5: 1, -7: 2})
    a = coupled_stabilize(eta, 16, 8, "0x2a", lam=0.05)
    b = coupled_stabilize(eta, 16, 8, 42, lam=0.05)
    assert a.unlabeled_odometer == b.unlabeled_odometer
    assert a.labeled_odometer == b.labeled_odometer and a.final == b.final


def test_lockstep_detects_divergence():
    # corrupt the mirror: an extra unlabeled sleeper on the lattice changes occupancy
    from arwsim.labeled import init_labels
    stacks = StackStore(4, 0.05)
    st = init_labels(Configuration(-8, 8, {0: 2}), 4, stacks)
    n = 17
    active = np.zeros(n, dtype=np.int64)
    sleeper = np.zeros(n, dtype=np.bool_)
    active[8] = 2
    odo = np.zeros(n, dtype=np.int64)
    st.attach_mirror(active, sleeper, odo)
    active[8] = 0   # unlabeled process lost its particles
    st.stabilize()
    assert sum(st.mirror_violations) > 0

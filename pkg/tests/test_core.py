import pytest
from hypothesis import given
from hypothesis import strategies as st

from arwsim import (Configuration, IllegalToppling, Instruction, ModelParams, Odometer,
                    SLEEPER, SiteState, apply_instruction, is_stable, occupancy)

from strategies import configurations

L, R, S = Instruction.LEFT, Instruction.RIGHT, Instruction.SLEEP


def cfg(states, lo=-5, hi=5):
    return Configuration(lo, hi, states)


# -- apply_instruction examples

def test_sleep_single_particle():
    assert apply_instruction(cfg({0: 1}), 0, S) == cfg({0: SLEEPER})


def test_sleep_two_particles_is_noop():
    c = cfg({0: 2})
    assert apply_instruction(c, 0, S) == c


def test_step_wakes_sleeper():
    out = apply_instruction(cfg({0: 1, 1: SLEEPER}), 0, R)
    assert out == cfg({1: 2})
    assert out[1] == SiteState(2, False)


def test_step_out_of_universe_deletes():
    out = apply_instruction(cfg({2: 1}, -2, 2), 2, R)
    assert out == cfg({}, -2, 2)
    assert out.total() == 0


def test_illegal_on_stable_site():
    with pytest.raises(IllegalToppling):
        apply_instruction(cfg({0: SLEEPER}), 0, L)
    with pytest.raises(IllegalToppling):
        apply_instruction(cfg({}), 3, S)


# -- occupancy examples

def test_occupancy_examples():
    assert occupancy(cfg({0: SLEEPER}), 0) == 1
    assert occupancy(cfg({}), 5) == 0
    assert occupancy(cfg({0: 3}), 0) == 3


def test_is_stable():
    assert is_stable(cfg({0: SLEEPER}), 0)
    assert not is_stable(cfg({0: 1}), 0)
    assert is_stable(cfg({}), 0)


# -- types

def test_site_state_invariants():
    with pytest.raises(ValueError):
        SiteState(1, True)
    with pytest.raises(ValueError):
        SiteState(-1)
    assert SLEEPER.occupancy == 1


def test_configuration_rejects_outside_support():
    with pytest.raises(ValueError):
        Configuration(-1, 1, {2: SiteState(1)})


def test_configuration_drops_empty_sites():
    assert Configuration(0, 3, {1: SiteState(0)}) == Configuration(0, 3)


def test_arrays_roundtrip():
    c = cfg({-2: 3, 0: SLEEPER, 4: 1})
    a, s = c.to_arrays()
    assert Configuration.from_arrays(c.lo, a, s) == c


def test_instruction_offsets():
    assert (L.offset, R.offset, S.offset) == (-1, 1, 0)


def test_odometer_algebra():
    a = Odometer({0: 2, 1: 0})
    b = Odometer({0: 3, 2: 1})
    assert a.counts == {0: 2}
    assert a <= b and b >= a and not b <= a
    assert (a + b).counts == {0: 5, 2: 1}
    assert list(a.to_array(-1, 1)) == [0, 2, 0]
    with pytest.raises(ValueError):
        Odometer({0: -1})


def test_model_params_validation():
    with pytest.raises(ValueError):
        ModelParams(0.5, 0.0)
    with pytest.raises(ValueError):
        ModelParams(0.5, 1.0, 1.5)
    with pytest.raises(ValueError):
        ModelParams(-0.1, 1.0)
    assert ModelParams(0.5, 1.0).bias == 0.5


# -- properties

instrs = st.sampled_from(list(Instruction))


@given(configurations(), st.integers(-4, 4), instrs)
def test_conservation(c, x, ins):
    if is_stable(c, x):
        return
    out = apply_instruction(c, x, ins)
    exits = ins is not S and not c.lo <= x + ins.offset <= c.hi
    assert out.total() == c.total() - int(exits)


@given(configurations(), st.integers(-4, 4))
def test_sleep_idempotent_when_crowded(c, x):
    if c.occupancy(x) >= 2:
        assert apply_instruction(c, x, S) == c


@given(configurations(), st.integers(-3, 3), st.sampled_from([L, R]))
def test_wake_on_arrival(c, x, ins):
    dest = x + ins.offset
    if is_stable(c, x) or not c[dest].sleeper:
        return
    out = apply_instruction(c, x, ins)
    assert not out[dest].sleeper and out[dest].active >= 2

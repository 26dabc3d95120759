import io
import math

import numpy as np
import pytest
from scipy import stats

from arwsim import Configuration, Estimate, InitialLaw, RoundPlan, StackStore, run_rounds
from arwsim.engine import Rule, stabilize
from arwsim.experiments import (BisectionResult, Inconclusive, SSM_LAMBDA, bisect_mu_c,
                                endpoint_hits, estimate_Ar, fixation_proxy, proxy_samples,
                                round_samples, rounds_experiment, sample_seeds, write_ar,
                                write_bisection, write_fixation, write_rounds)


def wilson(k, n, z=1.959963984540054):
    p = k / n
    centre = (p + z * z / (2 * n)) / (1 + z * z / n)
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
    return centre - half, centre + half


@pytest.mark.parametrize("k,n", [(0, 10), (3, 10), (10, 10), (137, 500), (1, 1)])
def test_estimate_matches_wilson_formula(k, n):
    e = Estimate.from_counts(k, n)
    lo, hi = wilson(k, n)
    assert e.value == k / n
    assert e.ci_lo == pytest.approx(max(lo, 0.0), abs=1e-12)
    assert e.ci_hi == pytest.approx(min(hi, 1.0), abs=1e-12)
    assert e.ci_lo <= e.value <= e.ci_hi


def test_estimate_edge_cases():
    e = Estimate.from_counts(0, 0)
    assert math.isnan(e.value) and (e.ci_lo, e.ci_hi) == (0.0, 1.0)
    assert Estimate.from_counts(95, 100).separates(0.5) == 1
    assert Estimate.from_counts(5, 100).separates(0.5) == -1
    assert Estimate.from_counts(50, 100).separates(0.5) == 0


def test_round_plan():
    plan = RoundPlan(4)
    assert plan.V(1) == (0, 32) and plan.I(1) == (8, 24)
    for l in plan.rounds:
        (vlo, vhi), (ilo, ihi) = plan.V(l), plan.I(l)
        assert vlo <= ilo < ihi <= vhi
        if l > 1:
            assert plan.I(l - 1)[1] < ilo
    assert plan.support == (8, 3 * 2 ** 12)
    with pytest.raises(ValueError):
        RoundPlan(0)


def test_initial_law_means():
    rng = np.random.default_rng(0)
    for kind in ("poisson", "bernoulli"):
        c = InitialLaw(kind, 0.4).sample(rng, 0, 99_999)
        assert abs(c.total() / 100_000 - 0.4) < 0.01
    det = InitialLaw("deterministic", counts=((0, 2), (5, 1)))
    assert det.sample(rng, -1, 3, universe=(-5, 5)) == Configuration.from_counts(-5, 5, {0: 2})
    with pytest.raises(ValueError):
        InitialLaw("bernoulli", 1.5)
    with pytest.raises(ValueError):
        InitialLaw("uniform", 0.5)


def test_sample_seeds_pure():
    a = sample_seeds(7, 3)
    b = sample_seeds(7, 3)
    assert a[0] == b[0] and a[1].random() == b[1].random()
    assert len({sample_seeds(7, i)[0] for i in range(100)}) == 100


# -- round scheme

def test_rounds_empty():
    res = run_rounds(Configuration(0, 4000), RoundPlan(3), StackStore(1, 0.01))
    assert res.w == (0, 0, 0) and res.topplings == (0, 0, 0)


def test_rounds_lower_bound_exact():
    # Eq. lb23: the cumulative round counts never exceed the direct odometer at 0
    plan = RoundPlan(2)
    law = InitialLaw("poisson", 1.0)
    for idx in range(30):
        s, rng = sample_seeds(9, idx)
        eta = law.sample(rng, *plan.support)
        res = run_rounds(eta, plan, StackStore(s, 0.2))
        for l in plan.rounds:
            vlo, vhi = plan.V(l)
            u, _ = stabilize(Configuration(vlo - 1, vhi + 1, eta.restrict(vlo, vhi).states),
                             (vlo, vhi), StackStore(s, 0.2))
            assert sum(res.w[:l]) <= u[0]


def test_rounds_cap_truncates():
    plan = RoundPlan(2)
    s, rng = sample_seeds(1, 0)
    eta = InitialLaw("poisson", 1.0).sample(rng, *plan.support)
    full = run_rounds(eta, plan, StackStore(s, 0.01))
    capped = run_rounds(eta, plan, StackStore(s, 0.01), cap=1)
    assert capped.w[0] == min(full.w[0], 1)


def test_rounds_experiment_small():
    rows = rounds_experiment(1.0, 0.01, 2, 30, seed=5)
    assert [r.l for r in rows] == [1, 2]
    assert all(r.lb_failures == 0 and r.guard_failures == 0 for r in rows)
    assert rows[1].estimate.value >= 0.25 - rows[1].estimate.half_width


def test_rounds_deadline_skips():
    rows = rounds_experiment(1.0, 0.01, 1, 5, seed=5, deadline=0.0)
    assert rows[0].skipped == 5 and rows[0].estimate.samples == 0


@pytest.mark.slow
def test_round_independence_ks():
    # per-round reseeded stores give the same law of w_2 as carried-over cursors
    n = 600
    a = round_samples(1.0, 0.2, 2, n, seed=1, reseed=False)
    b = round_samples(1.0, 0.2, 2, n, seed=2, reseed=True)
    assert stats.ks_2samp(a, b).pvalue > 0.001


def test_endpoint_symmetry():
    left, right = endpoint_hits(1.0, 0.05, 1, 400, seed=4)
    assert left.ci_lo <= right.ci_hi and right.ci_lo <= left.ci_hi


# -- A_r

def test_Ar_without_particles():
    (row,) = estimate_Ar(0.0, 0.001, 4, [8], 20, seed=1)
    assert row.estimate.value == 1.0 and row.unlabeled.value == 1.0


def test_Ar_large_lambda():
    (row,) = estimate_Ar(0.5, 100.0, 4, [8], 200, seed=2)
    assert row.estimate.value >= 0.9


def test_Ar_rejects_geometry():
    with pytest.raises(ValueError):
        estimate_Ar(0.5, 1.0, 4, [6], 2, seed=1)


# -- fixation proxy

def test_fixation_no_particles():
    rows = fixation_proxy(0.0, 1.0, [16, 32], T=1, samples=10, seed=1)
    assert all(r.estimate.value == 0 for r in rows)


def test_proxy_monotone_in_M():
    u = proxy_samples(0.6, 0.1, [8, 16, 32, 64], 10 ** 6, range(40), seed=3)
    assert (np.diff(u, axis=1) >= 0).all()


def test_totally_asymmetric_separates():
    lo = fixation_proxy(0.3, 1.0, [512], T=50, samples=60, seed=4, bias=0.0)[0].estimate
    hi = fixation_proxy(0.7, 1.0, [512], T=50, samples=60, seed=4, bias=0.0)[0].estimate
    assert lo.ci_hi < hi.ci_lo and lo.value <= 0.1 and hi.value >= 0.9


def test_bisection_symmetric_and_monotone_in_lambda():
    a = bisect_mu_c(0.05, 0.5, M=256, samples=60, tol=0.05, seed=3, sensitivity=False)
    b = bisect_mu_c(0.5, 0.5, M=256, samples=60, tol=0.05, seed=3, sensitivity=False)
    assert b.hi <= 1.0 + 0.05
    assert (a.lo + a.hi) / 2 <= (b.lo + b.hi) / 2 + 0.05


def test_bisection_inconclusive_is_reported():
    res = bisect_mu_c(1.0, 0.0, M=64, T=5, samples=4, max_samples=4, tol=0.05, seed=1,
                      sensitivity=False)
    assert res.status == "inconclusive" and res.reason
    with pytest.raises(Inconclusive):
        res.raise_for_status()


def test_bisection_validates():
    with pytest.raises(ValueError):
        bisect_mu_c(1.0, tol=0.0)
    with pytest.raises(ValueError):
        bisect_mu_c(1.0, bracket=(1.0, 0.5))
    assert BisectionResult(0.4, 0.6, "ok").contains(0.5)


def test_ssm_far_from_critical():
    lo = fixation_proxy(0.2, SSM_LAMBDA, [1024], samples=40, seed=5, rule=Rule.SSM)[0]
    hi = fixation_proxy(1.2, SSM_LAMBDA, [1024], samples=40, seed=5, rule=Rule.SSM)[0]
    assert lo.estimate.value <= 0.05 and hi.estimate.value >= 0.95


# -- reproducibility

def csv_of(writer, rows):
    buf = io.StringIO()
    writer(buf, rows)
    return buf.getvalue()


def test_csv_reproducible_and_thread_independent():
    f1 = fixation_proxy(0.5, 0.1, [32, 64], samples=20, seed=8, T_report=(10,))
    f2 = fixation_proxy(0.5, 0.1, [32, 64], samples=20, seed=8, T_report=(10,), threads=3)
    assert csv_of(write_fixation, f1) == csv_of(write_fixation, f2)
    a1 = estimate_Ar(0.5, 0.05, 4, [8, 16], 20, seed=8)
    a2 = estimate_Ar(0.5, 0.05, 4, [8, 16], 20, seed=8, threads=2)
    assert csv_of(write_ar, a1) == csv_of(write_ar, a2)
    r1 = rounds_experiment(1.0, 0.05, 2, 6, seed=8)
    assert csv_of(write_rounds, r1) == csv_of(write_rounds, rounds_experiment(1.0, 0.05, 2, 6,
                                                                              seed=8))
    b1 = bisect_mu_c(1.0, 0.0, M=64, samples=20, tol=0.2, seed=8)
    assert csv_of(write_bisection, b1) == csv_of(write_bisection,
                                                 bisect_mu_c(1.0, 0.0, M=64, samples=20,
                                                             tol=0.2, seed=8))


def test_fixation_csv_header():
    text = csv_of(write_fixation, fixation_proxy(0.0, 1.0, [8], samples=2, seed=1))
    assert text.splitlines()[0] == "M,T,samples,hits,p_hat,ci_lo,ci_hi,guard_failures"

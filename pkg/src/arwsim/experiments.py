"""Monte Carlo experiments over the engines.

Every sample derives its stack seed and its initial-configuration RNG from
``(master seed, sample index)`` alone, so results do not depend on thread
scheduling.  Thresholded quantities use the watch mechanism of the kernel:
a run may stop as soon as a legal toppling sequence has toppled a site ``T``
times, which by least action certifies ``u >= T`` for the full
stabilization.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, IO, Iterable, Sequence

import numpy as np
from scipy.stats import binomtest

from .core import ARWError, Configuration, GuardExceeded
from .coupling import round_one
from .engine import DEFAULT_GUARD, Lattice, Policy, Rule, run_topplings
from .labeled import labeled_stabilize
from .stacks import StackStore

DEFAULT_T = 50
T_SENSITIVITY = (10, 50, 200)
SSM_LAMBDA = 1e-12  # SSM never sleeps; keeps sleep draws (which are skipped) negligible


class Inconclusive(ARWError):
    """The sample cap was reached without the CI separating from 1/2."""


class MonotonicityViolation(ARWError):
    pass


# ---------------------------------------------------------------------------
# plumbing

@dataclass(frozen=True)
class Estimate:
    """Proportion with a 95% Wilson score interval."""

    value: float
    ci_lo: float
    ci_hi: float
    samples: int
    hits: int

    @classmethod
    def from_counts(cls, hits: int, samples: int, level: float = 0.95) -> "Estimate":
        if samples == 0:
            return cls(math.nan, 0.0, 1.0, 0, 0)
        ci = binomtest(hits, samples).proportion_ci(confidence_level=level, method="wilson")
        p = hits / samples
        return cls(p, min(float(ci.low), p), max(float(ci.high), p), samples, hits)

    @property
    def half_width(self) -> float:
        return (self.ci_hi - self.ci_lo) / 2

    def separates(self, p: float) -> int:
        """+1 if the CI lies above ``p``, -1 if below, 0 otherwise."""
        if self.ci_lo > p:
            return 1
        if self.ci_hi < p:
            return -1
        return 0


def sample_seeds(master: int, index: int) -> tuple[int, np.random.Generator]:
    """Stack seed and initial-law generator of sample ``index``."""
    ss = np.random.SeedSequence(master, spawn_key=(index,))
    store_seed = int(ss.generate_state(1, np.uint64)[0])
    return store_seed, np.random.default_rng(ss.spawn(1)[0])


def parallel_map(fn: Callable, items: Iterable, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class InitialLaw:
    """Product law with mean ``mu`` per site, or a fixed list of counts."""

    kind: str = "poisson"
    mu: float = 0.0
    counts: tuple = ()

    def __post_init__(self):
        if self.kind not in ("poisson", "bernoulli", "deterministic"):
            raise ValueError(f"unknown initial law {self.kind!r}")
        if self.mu < 0 or (self.kind == "bernoulli" and self.mu > 1):
            raise ValueError(f"invalid density {self.mu} for {self.kind}")

    def sample(self, rng: np.random.Generator, lo: int, hi: int,
               universe: tuple[int, int] | None = None) -> Configuration:
        """All-active configuration on ``[lo, hi]`` (universe defaults to the support)."""
        ulo, uhi = universe if universe is not None else (lo, hi)
        n = hi - lo + 1
        if self.kind == "poisson":
            counts = rng.poisson(self.mu, n)
        elif self.kind == "bernoulli":
            counts = (rng.random(n) < self.mu).astype(np.int64)
        else:
            return Configuration.from_counts(ulo, uhi, dict(self.counts)).restrict(lo, hi)
        return Configuration.from_counts(
            ulo, uhi, {lo + int(i): int(counts[i]) for i in np.flatnonzero(counts)})


# ---------------------------------------------------------------------------
# round scheme

@dataclass(frozen=True)
class RoundPlan:
    l_max: int

    def __post_init__(self):
        if self.l_max < 1:
            raise ValueError("need at least one round")

    @staticmethod
    def V(l: int) -> tuple[int, int]:
        return 0, 2 ** (3 * l + 2)

    @staticmethod
    def I(l: int) -> tuple[int, int]:
        return 2 ** (3 * l), 3 * 2 ** (3 * l)

    @property
    def rounds(self) -> range:
        return range(1, self.l_max + 1)

    @property
    def support(self) -> tuple[int, int]:
        return self.I(1)[0], self.I(self.l_max)[1]


@dataclass(frozen=True)
class RoundsResult:
    w: tuple[int, ...]
    truncated: tuple[bool, ...]
    topplings: tuple[int, ...]


def _round_lattice(eta: Configuration, l: int) -> tuple[Lattice, np.ndarray]:
    """Universe ``V_l`` padded by one absorbing site on each side."""
    vlo, vhi = RoundPlan.V(l)
    ilo, ihi = RoundPlan.I(l)
    config = Configuration(vlo - 1, vhi + 1,
                           {x: s for x, s in eta.states.items() if ilo <= x <= ihi})
    lat = Lattice.from_config(config)
    toppable = np.ones(len(lat.active), dtype=np.bool_)
    toppable[0] = toppable[-1] = False
    return lat, toppable


def run_rounds(eta: Configuration, plan: RoundPlan, stacks: StackStore,
               cap: int | None = None, guard: int = DEFAULT_GUARD,
               policy: Policy = Policy.LEFTMOST) -> RoundsResult:
    """Rounds ``1..l_max``: stabilize ``eta`` restricted to ``I_l`` on ``V_l``.

    ``w_l`` is the number of topplings at 0 in round ``l``.  Stack cursors
    carry over between rounds.  With ``cap`` a round halts once ``w_l``
    reaches ``cap``; the round is then a legal but partial toppling sequence
    and ``w_l = cap`` (flagged in ``truncated``).
    """
    w, trunc, tops = [], [], []
    for l in plan.rounds:
        lat, toppable = _round_lattice(eta, l)
        res = run_topplings(lat, stacks, toppable, policy=policy, guard=guard,
                            watch=(0,) if cap else (), watch_T=cap or 0)
        # a halted round has certified u(0) >= cap; site 0 may not have toppled yet
        w.append(cap if res.halted else int(lat.odometer[1]))
        trunc.append(res.halted)
        tops.append(res.topplings)
    return RoundsResult(tuple(w), tuple(trunc), tuple(tops))


def certify_lower_bound(eta: Configuration, l: int, seed: int, lam: float, bound: int,
                        bias: float = 0.5, guard: int = DEFAULT_GUARD) -> bool:
    """Check ``u_{V_l}(0) >= bound`` by direct stabilization on fresh cursors.

    The run stops once 0 has been toppled ``bound`` times, which certifies
    the inequality by least action.
    """
    if bound <= 0:
        return True
    vlo, vhi = RoundPlan.V(l)
    lat = Lattice.from_config(Configuration(vlo - 1, vhi + 1, eta.restrict(vlo, vhi).states))
    toppable = np.ones(len(lat.active), dtype=np.bool_)
    toppable[0] = toppable[-1] = False
    res = run_topplings(lat, StackStore(seed, lam, bias), toppable, policy=Policy.LEFTMOST,
                        guard=guard, watch=(0,), watch_T=bound)
    return res.halted


@dataclass(frozen=True)
class RoundsRow:
    l: int
    estimate: Estimate
    lb_checked: int
    lb_failures: int
    truncated: int
    guard_failures: int
    skipped: int = 0


def rounds_experiment(mu: float, lam: float, l_max: int, samples: int, seed: int,
                      cap: int | None = 1, law: str = "poisson", check_lb: bool = True,
                      guard: int = DEFAULT_GUARD, threads: int = 1,
                      deadline: float | None = None) -> list[RoundsRow]:
    """Estimate ``P(w_l > 0)`` for ``l = 1..l_max`` and check ``sum w_i <= u_{V_l}(0)``.

    ``deadline`` is a ``time.monotonic()`` instant after which no new sample
    is started; samples not run are reported as ``skipped``.
    """
    plan = RoundPlan(l_max)
    lawo = InitialLaw(law, mu)
    lo, hi = plan.support

    def one(idx):
        if deadline is not None and time.monotonic() > deadline:
            return "skipped"
        s, rng = sample_seeds(seed, idx)
        eta = lawo.sample(rng, lo, hi)
        try:
            res = run_rounds(eta, plan, StackStore(s, lam), cap=cap, guard=guard)
        except GuardExceeded:
            return None
        lb = []
        if check_lb:
            for l in plan.rounds:
                lb.append(certify_lower_bound(eta, l, s, lam, sum(res.w[:l]), guard=guard))
        return res, lb

    out = parallel_map(one, range(samples), threads)
    skipped = sum(1 for o in out if o == "skipped")
    ok = [o for o in out if isinstance(o, tuple)]
    failed = len(out) - len(ok) - skipped
    rows = []
    for l in plan.rounds:
        k = l - 1
        hits = sum(1 for res, _ in ok if res.w[k] > 0)
        rows.append(RoundsRow(l, Estimate.from_counts(hits, len(ok)),
                              len(ok) if check_lb else 0,
                              sum(1 for _, lb in ok if check_lb and not lb[k]),
                              sum(1 for res, _ in ok if res.truncated[k]),
                              failed, skipped))
    return rows


def round_samples(mu: float, lam: float, l: int, samples: int, seed: int,
                  reseed: bool, law: str = "poisson", cap: int | None = None) -> np.ndarray:
    """``w_l`` per sample; ``reseed`` gives round ``l`` a store of its own."""
    plan = RoundPlan(l)
    lawo = InitialLaw(law, mu)
    out = np.zeros(samples, dtype=np.int64)
    for idx in range(samples):
        s, rng = sample_seeds(seed, idx)
        eta = lawo.sample(rng, *plan.support)
        if reseed:
            s2, _ = sample_seeds(s, l)
            lat, toppable = _round_lattice(eta, l)
            st = StackStore(s2, lam)
            run_topplings(lat, st, toppable, policy=Policy.FIFO,
                          watch=(0,) if cap else (), watch_T=cap or 0)
            out[idx] = lat.odometer[1]
        else:
            out[idx] = run_rounds(eta, plan, StackStore(s, lam), cap=cap).w[-1]
    return out


def endpoint_hits(mu: float, lam: float, l: int, samples: int, seed: int,
                  law: str = "poisson") -> tuple[Estimate, Estimate]:
    """``P(u_{V_l}(0) > 0)`` and ``P(u_{V_l}(right end) > 0)`` for particles on ``I_l``."""
    lawo = InitialLaw(law, mu)
    left = right = 0
    for idx in range(samples):
        s, rng = sample_seeds(seed, idx)
        eta = lawo.sample(rng, *RoundPlan.I(l))
        lat, toppable = _round_lattice(eta, l)
        st = StackStore(s, lam)
        vhi = RoundPlan.V(l)[1]
        run_topplings(lat, st, toppable, policy=Policy.FIFO)
        left += lat.odometer[1] > 0
        right += lat.odometer[vhi + 1] > 0
    return Estimate.from_counts(left, samples), Estimate.from_counts(right, samples)


# ---------------------------------------------------------------------------
# A_r decay

@dataclass(frozen=True)
class ArRow:
    r: int
    estimate: Estimate
    conditional: Estimate
    unlabeled: Estimate
    mean_tilde: float
    guard_failures: int


def _ar_sample(mu, lam, K, r, seed, idx, law, guard, unlabeled):
    s, rng = sample_seeds(seed, idx)
    eta = InitialLaw(law, mu).sample(rng, -r, r, universe=(-2 * r, 2 * r))
    stacks = StackStore(s, lam)
    try:
        tilde = round_one(eta, K, stacks, r=r, guard=guard)
        run = labeled_stabilize(tilde, r, K, stacks, guard=guard, halt_on_exit=True)
    except GuardExceeded:
        return None
    u_ok = None
    if unlabeled:
        # absorbing ends at +-2r: the universe is the open interval
        lat = Lattice.from_config(eta.with_universe(-2 * r + 1, 2 * r - 1)
                                  if eta.total() else Configuration(-2 * r + 1, 2 * r - 1))
        try:
            run_topplings(lat, StackStore(s, lam), policy=Policy.FIFO, guard=guard,
                          halt_exit=True)
            u_ok = not lat.exits.any()
        except GuardExceeded:
            u_ok = None
    return run.A_r, tilde.total(), eta.total(), u_ok


def estimate_Ar(mu: float, lam: float, K: int, r_list: Sequence[int], samples: int,
                seed: int, law: str = "poisson", guard: int = DEFAULT_GUARD,
                unlabeled: bool = True, threads: int = 1) -> list[ArRow]:
    """``P(A_r)`` for the labeled process fed through round one.

    The conditional estimate restricts to samples with ``|eta_tilde| >= mu*r/2``.
    """
    rows = []
    for r in r_list:
        if r < 1 or r % K:
            raise ValueError(f"r={r} must be a positive multiple of K={K}")
        res = parallel_map(lambda i: _ar_sample(mu, lam, K, r, seed, i, law, guard, unlabeled),
                           range(samples), threads)
        ok = [x for x in res if x is not None]
        hits = sum(1 for a, *_ in ok if a)
        cond = [a for a, t, _, _ in ok if t >= mu * r / 2]
        un = [u for *_, u in ok if u is not None]
        rows.append(ArRow(r, Estimate.from_counts(hits, len(ok)),
                          Estimate.from_counts(sum(cond), len(cond)),
                          Estimate.from_counts(sum(un), len(un)),
                          float(np.mean([t for _, t, _, _ in ok])) if ok else math.nan,
                          len(res) - len(ok)))
    return rows


# ---------------------------------------------------------------------------
# fixation proxy

@dataclass(frozen=True)
class FixationRow:
    M: int
    T: int
    estimate: Estimate
    guard_failures: int


def proxy_samples(mu: float, lam: float, M_list: Sequence[int], cap: int, indices: Iterable[int],
                  seed: int, bias: float = 0.5, rule: Rule = Rule.ARW, law: str = "poisson",
                  guard: int = DEFAULT_GUARD, threads: int = 1) -> np.ndarray:
    """``min(u_M(0), cap)`` per sample and ``M``; ``-1`` marks a guard failure.

    All ``M`` of one sample share the configuration (sampled on ``[-M_max,
    M_max]`` and restricted) and the stacks, so each row is nondecreasing
    in ``M``; this is checked and a violation raises.
    """
    M_list = list(M_list)
    if any(b <= a for a, b in zip(M_list, M_list[1:])):
        raise ValueError("M_list must be increasing")
    Mmax = M_list[-1]
    lawo = InitialLaw(law, mu)

    def one(idx):
        s, rng = sample_seeds(seed, idx)
        eta = lawo.sample(rng, -Mmax, Mmax)
        row = np.full(len(M_list), -1, dtype=np.int64)
        for j, M in enumerate(M_list):
            lat = Lattice.from_config(Configuration(-M, M, eta.restrict(-M, M).states))
            res = run_topplings(lat, StackStore(s, lam, bias), rule=rule, policy=Policy.FIFO,
                                guard=guard, watch=(0,), watch_T=cap, raise_on_guard=False)
            if res.status == 2:
                break
            row[j] = cap if res.halted else min(int(lat.odometer[M]), cap)
        good = row[row >= 0]
        if np.any(np.diff(good) < 0):
            raise MonotonicityViolation(f"sample {idx}: capped u_M(0) = {row.tolist()}")
        return row

    rows = parallel_map(one, indices, threads)
    return np.array(rows, dtype=np.int64).reshape(-1, len(M_list))


def fixation_proxy(mu: float, lam: float, M_list: Sequence[int], T: int = DEFAULT_T,
                   samples: int = 100, seed: int = 0, bias: float = 0.5,
                   rule: Rule = Rule.ARW, law: str = "poisson",
                   T_report: Sequence[int] = (), guard: int = DEFAULT_GUARD,
                   threads: int = 1) -> list[FixationRow]:
    """``P(u_M(0) >= T)`` for each ``M`` (and each extra threshold in ``T_report``)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    Ts = sorted(set([T, *T_report]))
    u = proxy_samples(mu, lam, M_list, max(Ts), range(samples), seed, bias, rule, law, guard,
                      threads)
    rows = []
    for j, M in enumerate(M_list):
        col = u[:, j]
        ok = col[col >= 0]
        for t in Ts:
            rows.append(FixationRow(M, t, Estimate.from_counts(int((ok >= t).sum()), len(ok)),
                                    int((col < 0).sum())))
    return rows


# ---------------------------------------------------------------------------
# bisection

@dataclass(frozen=True)
class Evaluation:
    mu: float
    estimate: Estimate
    decision: int  # +1 active, -1 fixating, 0 inconclusive
    guard_failures: int


@dataclass
class BisectionResult:
    lo: float
    hi: float
    status: str  # "ok" | "inconclusive" | "guard"
    evaluations: list = field(default_factory=list)
    sensitivity: list = field(default_factory=list)
    reason: str = ""

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, mu: float) -> bool:
        return self.lo <= mu <= self.hi

    def raise_for_status(self) -> "BisectionResult":
        if self.status == "inconclusive":
            raise Inconclusive(self.reason)
        if self.status == "guard":
            raise GuardExceeded(0, self.reason)
        return self


def _evaluate(mu, lam, bias, rule, M, T, samples, max_samples, seed, law, guard, threads):
    u = np.zeros(0, dtype=np.int64)
    n = samples
    while True:
        new = proxy_samples(mu, lam, [M], T, range(len(u), n), seed, bias, rule, law, guard,
                            threads)[:, 0]
        u = np.concatenate([u, new])
        ok = u[u >= 0]
        est = Estimate.from_counts(int((ok >= T).sum()), len(ok))
        d = est.separates(0.5)
        if d or n >= max_samples:
            return Evaluation(mu, est, d, int((u < 0).sum()))
        n = min(2 * n, max_samples)


def bisect_mu_c(lam: float, q: float = 0.5, M: int = 1024, T: int = DEFAULT_T,
                samples: int = 200, tol: float = 0.05, seed: int = 0,
                bracket: tuple[float, float] = (0.0, 1.5), max_samples: int | None = None,
                rule: Rule = Rule.ARW, law: str = "poisson", guard: int = DEFAULT_GUARD,
                sensitivity: bool = True, threads: int = 1) -> BisectionResult:
    """Bracket the density where ``P(u_M(0) >= T)`` crosses 1/2.

    Each midpoint is sampled until its Wilson CI excludes 1/2, doubling up
    to ``max_samples`` (default ``4 * samples``); if it never does, the
    result is returned with status ``"inconclusive"`` and the bracket
    reached so far.  Guard failures are excluded from the estimates and
    turn the status into ``"guard"``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    lo, hi = bracket
    if not lo < hi:
        raise ValueError("empty bracket")
    max_samples = max_samples or 4 * samples
    res = BisectionResult(lo, hi, "ok")
    while res.hi - res.lo > tol:
        mid = (res.lo + res.hi) / 2
        ev = _evaluate(mid, lam, q, rule, M, T, samples, max_samples, seed, law, guard,
                       threads)
        res.evaluations.append(ev)
        if ev.guard_failures:
            res.status = "guard"
            res.reason = f"{ev.guard_failures} samples hit the guard at mu={mid:.6g}"
        if ev.decision > 0:
            res.hi = mid
        elif ev.decision < 0:
            res.lo = mid
        else:
            res.status = "inconclusive"
            res.reason = (f"CI [{ev.estimate.ci_lo:.4f}, {ev.estimate.ci_hi:.4f}] contains 1/2 "
                          f"at mu={mid:.6g} after {ev.estimate.samples} samples")
            break
    if sensitivity:
        for mu in (res.lo, res.hi):
            u = proxy_samples(mu, lam, [M], max(T_SENSITIVITY), range(samples), seed, q, rule,
                              law, guard, threads)[:, 0]
            ok = u[u >= 0]
            for t in T_SENSITIVITY:
                res.sensitivity.append((mu, t, Estimate.from_counts(int((ok >= t).sum()),
                                                                    len(ok))))
    return res


SSM_BRACKET = (0.0, 1.0)


def ssm_mu_c(M: int = 2048, T: int = DEFAULT_T, samples: int = 200, tol: float = 0.05,
             seed: int = 0, bracket: tuple[float, float] = SSM_BRACKET, **kw) -> BisectionResult:
    """Critical density of the stochastic sandpile (symmetric walks).

    The default bracket is ``[0, 1]``: a stable configuration holds at most
    one particle per site, so a density above 1 cannot fixate.
    """
    return bisect_mu_c(SSM_LAMBDA, 0.5, M, T, samples, tol, seed, bracket=bracket,
                       rule=Rule.SSM, **kw)


# ---------------------------------------------------------------------------
# CSV output (long format, fixed float formatting)

def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.10g}"
    return str(x)


def write_rows(fh: IO[str], header: Sequence[str], rows: Iterable[Sequence]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])


AR_HEADER = ("r", "samples", "hits", "p_hat", "ci_lo", "ci_hi", "guard_failures",
             "cond_samples", "cond_p_hat", "unlabeled_p_hat", "mean_tilde")
FIX_HEADER = ("M", "T", "samples", "hits", "p_hat", "ci_lo", "ci_hi", "guard_failures")
ROUNDS_HEADER = ("l", "samples", "hits", "p_hat", "ci_lo", "ci_hi", "truncated",
                 "lb_checked", "lb_failures", "guard_failures", "skipped")
BISECT_HEADER = ("kind", "mu", "T", "samples", "hits", "p_hat", "ci_lo", "ci_hi", "decision")


def write_ar(fh: IO[str], rows: Sequence[ArRow]) -> None:
    write_rows(fh, AR_HEADER, (
        (r.r, r.estimate.samples, r.estimate.hits, r.estimate.value, r.estimate.ci_lo,
         r.estimate.ci_hi, r.guard_failures, r.conditional.samples, r.conditional.value,
         r.unlabeled.value, r.mean_tilde) for r in rows))


def write_fixation(fh: IO[str], rows: Sequence[FixationRow]) -> None:
    write_rows(fh, FIX_HEADER, (
        (r.M, r.T, r.estimate.samples, r.estimate.hits, r.estimate.value, r.estimate.ci_lo,
         r.estimate.ci_hi, r.guard_failures) for r in rows))


def write_rounds(fh: IO[str], rows: Sequence[RoundsRow]) -> None:
    write_rows(fh, ROUNDS_HEADER, (
        (r.l, r.estimate.samples, r.estimate.hits, r.estimate.value, r.estimate.ci_lo,
         r.estimate.ci_hi, r.truncated, r.lb_checked, r.lb_failures, r.guard_failures,
         r.skipped) for r in rows))


def write_bisection(fh: IO[str], res: BisectionResult) -> None:
    def rows():
        for ev in res.evaluations:
            e = ev.estimate
            yield ("eval", ev.mu, "", e.samples, e.hits, e.value, e.ci_lo, e.ci_hi, ev.decision)
        for mu, t, e in res.sensitivity:
            yield ("sensitivity", mu, t, e.samples, e.hits, e.value, e.ci_lo, e.ci_hi, "")
        yield ("bracket", res.lo, "", "", "", "", "", "", res.status)
        yield ("bracket", res.hi, "", "", "", "", "", "", res.status)
    write_rows(fh, BISECT_HEADER, rows())

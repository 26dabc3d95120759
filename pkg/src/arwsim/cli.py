"""Command-line front end.

    arwsim <experiment> [config.ini] --seed S [--out FILE] [--threads N] [--<key> VALUE ...]

The config file is flat ``key = value`` text with ``#`` comments.  Section
headers such as ``[model]`` may be used for grouping but do not namespace the
keys.  Unknown keys are errors, and command-line flags override file values.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import sys
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ARWError, GuardExceeded, ModelParams
from .coupling import coupled_stabilize
from .engine import Lattice, Policy, Rule, run_topplings
from .experiments import (DEFAULT_T, SSM_BRACKET, InitialLaw, MonotonicityViolation,
                          bisect_mu_c, estimate_Ar, fixation_proxy, rounds_experiment,
                          sample_seeds, ssm_mu_c, write_ar, write_bisection, write_fixation,
                          write_rows, write_rounds)
from .stacks import StackStore, parse_seed

EXPERIMENTS = ("stabilize", "rounds", "ar-decay", "fixation", "bisect", "ssm-bisect",
               "couple-check")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INCONCLUSIVE = 3
EXIT_GUARD = 4
EXIT_CHECK = 5


class ParseError(ARWError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(ARWError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    model: ModelParams = ModelParams(0.0, 1.0, 0.5)
    M: tuple[int, ...] = (1024,)
    r: tuple[int, ...] = (32,)
    K: int = 16
    samples: int = 100
    seed: int = 0
    out: str = ""
    T: int = DEFAULT_T
    T_report: tuple[int, ...] = ()
    tol: float = 0.05
    mu_lo: float = 0.0
    mu_hi: float = 1.5
    max_samples: int = 0
    l_max: int = 3
    cap: int = 1
    law: str = "poisson"
    rule: str = "arw"
    policy: str = "fifo"
    guard: int = 10 ** 9
    threads: int = 1

    def to_text(self) -> str:
        """Config-file text that parses back to an equal ``RunConfig``."""
        vals = _flatten(self)
        return "".join(f"{k} = {_emit(v)}\n" for k, v in vals.items())


# key -> (converter, RunConfig attribute or model attribute)
def _int(s):
    return int(s.strip(), 0)


def _float(s):
    return float(s.strip())


def _ints(s):
    items = [x for x in s.replace(",", " ").split() if x]
    if not items:
        raise ValueError("empty list")
    return tuple(int(x, 0) for x in items)


def _str(s):
    return s.strip().lower()


KEYS = {
    "experiment": _str, "mu": _float, "lambda": _float, "bias": _float,
    "M": _ints, "r": _ints, "K": _int, "samples": _int, "seed": parse_seed,
    "out": lambda s: s.strip(), "T": _int, "T_report": _ints, "tol": _float,
    "mu_lo": _float, "mu_hi": _float, "max_samples": _int, "l_max": _int, "cap": _int,
    "law": _str, "rule": _str, "policy": _str, "guard": _int, "threads": _int,
}
_MODEL_KEYS = {"mu": "mu", "lambda": "lam", "bias": "bias"}
_CANON = {k.lower(): k for k in KEYS}


def _flatten(cfg: RunConfig) -> dict:
    out = {}
    for k in KEYS:
        if k in _MODEL_KEYS:
            out[k] = getattr(cfg.model, _MODEL_KEYS[k])
        elif k == "T_report" and not cfg.T_report:
            continue
        else:
            out[k] = getattr(cfg, k)
    return out


def _emit(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _read_pairs(text: str) -> dict[str, tuple[str, int]]:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",), delimiters=("=",),
                                   strict=True, default_section="\x00defaults")
    cp.optionxform = str
    lines = text.splitlines()
    # a file without a header is one implicit section
    body = text if any(l.strip().startswith("[") for l in lines if l.strip()) else "[run]\n" + text
    shift = 0 if body is text else 1
    try:
        cp.read_string(body)
    except configparser.MissingSectionHeaderError as e:
        raise ParseError(e.lineno - shift, "key before the first section header") from None
    except configparser.DuplicateOptionError as e:
        raise ParseError(e.lineno - shift, f"duplicate key {e.option!r}") from None
    except configparser.DuplicateSectionError as e:
        raise ParseError((e.lineno or 1) - shift, f"duplicate section {e.section!r}") from None
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else 0
        raise ParseError(lineno - shift, "expected 'key = value'") from None
    pairs: dict[str, tuple[str, int]] = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            lineno = next((i + 1 for i, l in enumerate(lines)
                           if l.split("=")[0].strip() == key), 0)
            canon = _CANON.get(key.lower())
            if canon is None:
                raise ParseError(lineno, f"unknown key {key!r}")
            if canon in pairs:
                raise ParseError(lineno, f"duplicate key {key!r}")
            pairs[canon] = (value, lineno)
    return pairs


def build_config(values: dict[str, str]) -> RunConfig:
    """Convert and validate raw ``key -> text`` pairs."""
    conv = {}
    for key, raw in values.items():
        canon = _CANON.get(key.lower())
        if canon is None:
            raise ValidationError(key, "unknown key")
        try:
            conv[canon] = KEYS[canon](raw)
        except (ValueError, TypeError) as e:
            raise ValidationError(canon, f"cannot parse {raw!r}: {e}") from None
    if "experiment" not in conv:
        raise ValidationError("experiment", "missing")
    if conv["experiment"] not in EXPERIMENTS:
        raise ValidationError("experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    base = RunConfig(conv["experiment"])
    if base.experiment == "ssm-bisect":
        conv.setdefault("mu_hi", SSM_BRACKET[1])
    mkw = {attr: conv.pop(k) for k, attr in _MODEL_KEYS.items() if k in conv}
    if "lam" in mkw and not mkw["lam"] > 0:
        raise ValidationError("lambda", "must be > 0")
    if "mu" in mkw and not mkw["mu"] >= 0:
        raise ValidationError("mu", "must be >= 0")
    if "bias" in mkw and not 0 <= mkw["bias"] <= 1:
        raise ValidationError("bias", "must lie in [0, 1]")
    model = dataclasses.replace(base.model, **mkw)
    cfg = dataclasses.replace(base, model=model, **conv)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    def need(ok, fld, reason):
        if not ok:
            raise ValidationError(fld, reason)

    need(cfg.K >= 1, "K", "must be >= 1")
    need(all(m >= 1 for m in cfg.M), "M", "must be >= 1")
    need(all(b > a for a, b in zip(cfg.M, cfg.M[1:])), "M", "must be increasing")
    need(all(r >= 1 for r in cfg.r), "r", "must be >= 1")
    for r in cfg.r:
        need((2 * r) % cfg.K == 0, "K", f"K={cfg.K} must divide 2r={2 * r}")
        if cfg.experiment == "ar-decay":
            need(r % cfg.K == 0, "r", f"r={r} must be a multiple of K={cfg.K}")
    need(cfg.samples >= 1, "samples", "must be >= 1")
    need(cfg.T >= 1, "T", "must be >= 1")
    need(all(t >= 1 for t in cfg.T_report), "T_report", "must be >= 1")
    need(cfg.tol > 0, "tol", "must be > 0")
    need(cfg.mu_lo < cfg.mu_hi, "mu_hi", "must exceed mu_lo")
    need(cfg.max_samples >= 0, "max_samples", "must be >= 0")
    need(cfg.l_max >= 1, "l_max", "must be >= 1")
    need(cfg.cap >= 0, "cap", "must be >= 0")
    need(cfg.law in ("poisson", "bernoulli"), "law", "must be poisson or bernoulli")
    need(cfg.law != "bernoulli" or cfg.model.mu <= 1, "mu", "bernoulli needs mu <= 1")
    need(cfg.rule in ("arw", "ssm"), "rule", "must be arw or ssm")
    need(cfg.policy in ("leftmost", "rightmost", "fifo", "random"), "policy",
         "must be leftmost, rightmost, fifo or random")
    need(cfg.guard >= 1, "guard", "must be >= 1")
    need(cfg.threads >= 1, "threads", "must be >= 1")


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse config text; ``overrides`` (raw strings) take precedence over the file."""
    raw = {k: v for k, (v, _) in _read_pairs(text).items()}
    raw.update(overrides or {})
    return build_config(raw)


# ---------------------------------------------------------------------------
# execution

@dataclass
class Outcome:
    code: int
    summary: str
    csv: str
    reason: str = ""

    @property
    def status(self) -> str:
        return {EXIT_OK: "ok", EXIT_INCONCLUSIVE: "inconclusive", EXIT_GUARD: "guard",
                EXIT_CHECK: "failed"}.get(self.code, "error")


def _ci(e) -> str:
    return f"p_hat={e.value:.4f} ci=[{e.ci_lo:.4f},{e.ci_hi:.4f}] n={e.samples}"


def _run_stabilize(cfg: RunConfig) -> Outcome:
    M = cfg.M[-1]
    s, rng = sample_seeds(cfg.seed, 0)
    eta = InitialLaw(cfg.law, cfg.model.mu).sample(rng, -M, M)
    lat = Lattice.from_config(eta)
    rule = Rule.SSM if cfg.rule == "ssm" else Rule.ARW
    res = run_topplings(lat, StackStore(s, cfg.model.lam, cfg.model.bias), rule=rule,
                        policy=Policy[cfg.policy.upper()], guard=cfg.guard,
                        raise_on_guard=False)
    buf = io.StringIO()
    sites = np.flatnonzero((lat.active > 0) | lat.sleeper | (lat.odometer > 0))
    write_rows(buf, ("site", "active", "sleeper", "odometer"),
               ((lat.lo + int(i), int(lat.active[i]), int(lat.sleeper[i]),
                 int(lat.odometer[i])) for i in sites))
    summary = (f"stabilize M={M} particles={eta.total()} topplings={res.topplings} "
               f"sleepers={int(lat.sleeper.sum())} exited={int(lat.exits.sum())} "
               f"u(0)={int(lat.odometer[M])}")
    if res.status == 2:
        return Outcome(EXIT_GUARD, summary, buf.getvalue(), f"guard {cfg.guard} exceeded")
    return Outcome(EXIT_OK, summary, buf.getvalue())


def _run_rounds(cfg: RunConfig) -> Outcome:
    rows = rounds_experiment(cfg.model.mu, cfg.model.lam, cfg.l_max, cfg.samples, cfg.seed,
                             cap=cfg.cap or None, law=cfg.law, guard=cfg.guard,
                             threads=cfg.threads)
    buf = io.StringIO()
    write_rounds(buf, rows)
    summary = "rounds " + " ".join(f"l={r.l}:{_ci(r.estimate)}" for r in rows)
    guard = max(r.guard_failures for r in rows)
    lb = sum(r.lb_failures for r in rows)
    if lb:
        return Outcome(EXIT_CHECK, summary, buf.getvalue(), f"{lb} lower-bound failures")
    if guard:
        return Outcome(EXIT_GUARD, summary, buf.getvalue(), f"{guard} samples hit the guard")
    return Outcome(EXIT_OK, summary, buf.getvalue())


def _run_ar(cfg: RunConfig) -> Outcome:
    rows = estimate_Ar(cfg.model.mu, cfg.model.lam, cfg.K, cfg.r, cfg.samples, cfg.seed,
                       law=cfg.law, guard=cfg.guard, threads=cfg.threads)
    buf = io.StringIO()
    write_ar(buf, rows)
    summary = "ar-decay " + " ".join(f"r={r.r}:{_ci(r.estimate)}" for r in rows)
    guard = sum(r.guard_failures for r in rows)
    if guard:
        return Outcome(EXIT_GUARD, summary, buf.getvalue(), f"{guard} samples hit the guard")
    return Outcome(EXIT_OK, summary, buf.getvalue())


def _run_fixation(cfg: RunConfig) -> Outcome:
    rule = Rule.SSM if cfg.rule == "ssm" else Rule.ARW
    try:
        rows = fixation_proxy(cfg.model.mu, cfg.model.lam, cfg.M, cfg.T, cfg.samples,
                              cfg.seed, cfg.model.bias, rule, cfg.law, cfg.T_report,
                              cfg.guard, cfg.threads)
    except MonotonicityViolation as e:
        return Outcome(EXIT_CHECK, "fixation", "", str(e))
    buf = io.StringIO()
    write_fixation(buf, rows)
    summary = "fixation " + " ".join(f"M={r.M},T={r.T}:{_ci(r.estimate)}" for r in rows
                                     if r.T == cfg.T)
    guard = max(r.guard_failures for r in rows)
    if guard:
        return Outcome(EXIT_GUARD, summary, buf.getvalue(), f"{guard} samples hit the guard")
    return Outcome(EXIT_OK, summary, buf.getvalue())


def _run_bisect(cfg: RunConfig) -> Outcome:
    kw = dict(M=cfg.M[-1], T=cfg.T, samples=cfg.samples, tol=cfg.tol, seed=cfg.seed,
              bracket=(cfg.mu_lo, cfg.mu_hi), max_samples=cfg.max_samples or None,
              law=cfg.law, guard=cfg.guard, threads=cfg.threads)
    if cfg.experiment == "ssm-bisect":
        res = ssm_mu_c(**kw)
    else:
        rule = Rule.SSM if cfg.rule == "ssm" else Rule.ARW
        res = bisect_mu_c(cfg.model.lam, cfg.model.bias, rule=rule, **kw)
    buf = io.StringIO()
    write_bisection(buf, res)
    summary = (f"{cfg.experiment} mu_c in [{res.lo:.6g}, {res.hi:.6g}] "
               f"width={res.width:.6g} evaluations={len(res.evaluations)}")
    code = {"ok": EXIT_OK, "inconclusive": EXIT_INCONCLUSIVE, "guard": EXIT_GUARD}[res.status]
    return Outcome(code, summary, buf.getvalue(), res.reason)


def _run_couple(cfg: RunConfig) -> Outcome:
    r = cfg.r[-1]
    law = InitialLaw(cfg.law, cfg.model.mu)
    rows = []
    bad = guard = 0
    for idx in range(cfg.samples):
        s, rng = sample_seeds(cfg.seed, idx)
        eta = law.sample(rng, -r, r)
        try:
            run = coupled_stabilize(eta, r, cfg.K, StackStore(s, cfg.model.lam), guard=cfg.guard)
        except GuardExceeded:
            guard += 1
            continue
        ok = run.dominated and not run.illegal_mirrored and not run.lockstep_mismatches
        bad += not ok
        rows.append((idx, eta.total(), run.tilde_count, int(run.dominated),
                     run.illegal_mirrored, run.lockstep_mismatches, int(run.A_r),
                     *run.round_topplings))
    buf = io.StringIO()
    write_rows(buf, ("sample", "particles", "tilde_count", "dominated", "illegal_mirrored",
                     "lockstep_mismatches", "A_r", "round1", "round2", "round3"), rows)
    summary = f"couple-check r={r} K={cfg.K} runs={len(rows)} failures={bad}"
    if bad:
        return Outcome(EXIT_CHECK, summary, buf.getvalue(), f"{bad} runs broke domination")
    if guard:
        return Outcome(EXIT_GUARD, summary, buf.getvalue(), f"{guard} runs hit the guard")
    return Outcome(EXIT_OK, summary, buf.getvalue())


_RUNNERS = {"stabilize": _run_stabilize, "rounds": _run_rounds, "ar-decay": _run_ar,
            "fixation": _run_fixation, "bisect": _run_bisect, "ssm-bisect": _run_bisect,
            "couple-check": _run_couple}


def run(cfg: RunConfig) -> Outcome:
    return _RUNNERS[cfg.experiment](cfg)


# ---------------------------------------------------------------------------
# argument parsing

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arwsim", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name)
        sp.add_argument("config", nargs="?", help="flat key = value config file")
        sp.add_argument("--seed", required=True, help="master seed (decimal or 0x-hex)")
        sp.add_argument("--out", help="CSV output path (default: <experiment>.csv)")
        sp.add_argument("--threads", help="worker threads")
        for key in KEYS:
            if key in ("experiment", "seed", "out", "threads"):
                continue
            sp.add_argument(f"--{key}", dest=f"set_{key}", metavar="VALUE")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    overrides = {"experiment": args.experiment, "seed": args.seed}
    if args.out is not None:
        overrides["out"] = args.out
    if args.threads is not None:
        overrides["threads"] = args.threads
    for key in KEYS:
        v = getattr(args, f"set_{key}", None)
        if v is not None:
            overrides[key] = v
    try:
        text = ""
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        cfg = parse_config(text, overrides)
    except (ParseError, ValidationError, OSError) as e:
        print(f"status=error reason={e}", file=sys.stderr)
        return EXIT_USAGE
    out = cfg.out or f"{cfg.experiment}.csv"
    try:
        outcome = run(cfg)
    except ARWError as e:
        print(f"status=error reason={cfg.experiment}: {e}")
        return EXIT_CHECK
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(outcome.csv)
    print(outcome.summary)
    if outcome.code != EXIT_OK:
        print(f"status={outcome.status} reason={outcome.reason}")
    return outcome.code


if __name__ == "__main__":
    sys.exit(main())

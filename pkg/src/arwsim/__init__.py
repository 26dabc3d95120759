"""Activated random walk on Z with Diaconis-Fulton instruction stacks."""
from .core import (ARWError, Configuration, EMPTY, GuardExceeded, IllegalToppling, Instruction,
                   ModelParams, Odometer, SLEEPER, SiteState, apply_instruction, is_stable,
                   occupancy)
from .coupling import CoupledRun, CouplingViolation, coupled_stabilize, round_one
from .engine import (EngineState, IllegalSequence, Lattice, Policy, Rule, apply_sequence,
                     run_topplings, stabilize, topple)
from .experiments import (Estimate, InitialLaw, Inconclusive, RoundPlan, bisect_mu_c,
                          estimate_Ar, fixation_proxy, run_rounds, ssm_mu_c)
from .labeled import (LabeledState, LatticeStats, NoActiveParticle, NotOnLattice, flux,
                      init_labels, labeled_stabilize, labeled_step, left_count_function,
                      single_site)
from .stacks import CursorSnapshot, RestoreMismatch, StackStore, WalkPath, parse_seed

__version__ = "0.1.0"

"""Monte Carlo lab for randomly biased walks on Galton-Watson trees.

Simulates the range of the walk after many excursions (directly or through
its multi-type branching structure), samples the limit objects describing
its volume and genealogy in critical generations, and compares the two.
"""

from .environment import (
    EnvFamily, EnvTree, NonDiffusiveError, RegimeReport, VertexBudgetExceeded,
    c0_for_family, check_assumptions, kappa, make_family, psi, psi_prime,
)
from .farm import FarmResult, run_farm
from .genealogy import GenealogyEstimate, PairSample, c_ratio_estimate, coalescence_estimates, lca_depth, sample_pair
from .range_gw import simulate_range
from .walk import EdgeLocalTimeLedger, ledger_violations, observables, run_excursions

__version__ = "0.1.0"

__all__ = [
    "EnvFamily", "EnvTree", "NonDiffusiveError", "RegimeReport", "VertexBudgetExceeded",
    "c0_for_family", "check_assumptions", "kappa", "make_family", "psi", "psi_prime",
    "FarmResult", "run_farm", "GenealogyEstimate", "PairSample", "c_ratio_estimate",
    "coalescence_estimates", "lca_depth", "sample_pair", "simulate_range",
    "EdgeLocalTimeLedger", "ledger_violations", "observables", "run_excursions",
]

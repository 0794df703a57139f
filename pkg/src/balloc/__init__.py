"""Sampling-free DP accounting for matrix mechanisms under balls-in-bins batching."""

from .mechanism import (
    GramSummary,
    MixtureMeans,
    Schedule,
    StrategyMatrix,
    build_identity,
    cyclic_truncate,
    gram,
    gram_summary,
    inv_sqrt_toeplitz_coefficients,
    invert_banded_toeplitz,
    mixture_means,
    read_matrix,
    sqrt_toeplitz_coefficients,
    write_matrix,
)
from .renyi import (
    RenyiCurve,
    renyi_account,
    renyi_add_bound,
    renyi_curve,
    renyi_remove_bruteforce,
    renyi_remove_dp,
    renyi_to_delta,
)
from .pld import (
    ADD,
    REMOVE,
    DiscretePLD,
    MixGaussPair,
    compose,
    compose_power,
    delta_at,
    discretize,
    dump_csv,
    hockey_stick,
)
from .condcomp import (
    AllocationPlan,
    StepDominatingPair,
    VariationalFamily,
    allocate,
    cond_comp_account,
    cond_comp_pld,
    hazard_from_tail,
    reverse_hazard_weights,
    step_dominating_pair,
    step_hazards,
    tail_bound_add,
    tail_bound_remove,
)
from .mc import MCEstimate, TernaryLoss, mc_delta, mc_exceedance
from .calibrate import (
    PrivacyPoint,
    UnachievableTargetError,
    calibrate_sigma,
    calibrate_sigma_mc,
    profile,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"

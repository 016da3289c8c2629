"""Wald tests of blip-effect hypotheses in sequential causal inference."""

from .blip_model import (
    DesignMatrix,
    IndicatorBasis,
    LinearBasis,
    SnmmSpec,
    TransitionTable,
    build_design_matrix,
    check_assignment_condition,
    empirical_transitions,
)
from .errors import *  # noqa: F401,F403
from .estimator import (
    BlipEstimate,
    Hypothesis,
    WaldResult,
    bootstrap,
    bootstrap_marginal_cov,
    chi2_survival,
    fit_blip,
    gls,
    noncentral_power,
    restricted_gls,
    wald,
)
from .oracle_dgp import (
    DgpSpec,
    build_standard_params,
    default_spec,
    exact_blip_decomposition_check,
    exact_point_effects,
    generate_dataset,
)
from .point_effects import VarianceMode, estimate_all_point_effects, estimate_point_effects
from .seqdata import OutcomeFamily, SequentialDataset, Stratum, parse_dataset, read_dataset, serialize_dataset

__version__ = "0.1.0"

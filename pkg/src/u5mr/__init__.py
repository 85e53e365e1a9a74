"""Under-five mortality estimation from full and summary birth histories.

The package fits a discrete-time survival model to full birth histories
(FBH) jointly with summary birth histories (SBH, children ever born and
children died) by augmenting each summary record with latent birth and
death years inside a Markov chain Monte Carlo run. Classical comparators
are included: design-based direct estimates with a cluster jackknife, the
Brass indirect method with Trussell coefficients, and inverse-variance
fusion of the two, plus holdout accuracy metrics and a ground-truth
simulator.
"""

__version__ = "0.1.0"

from .core import (
    AgeGridConfig,
    Child,
    CovariateProfile,
    FullBirthHistory,
    SummaryBirthHistory,
    summarize,
    under_five_mortality,
)
from .calendars import SurveyCalendar
from .simulate import SimulationConfig, SimulationTruth, simulate_cohort
from .augment import DaEngine, DaSettings, run_da_sweep
from .posterior import (
    HivFactors,
    TabulationSettings,
    build_design,
    build_rw2_precision,
    gradient,
    malawi_fertility_spec,
    malawi_hazard_spec,
    neg_log_posterior,
    pc_prior_logdensity,
    simulation_fertility_spec,
    simulation_hazard_spec,
)
from .hmc import (
    ChainOutput,
    HmcConfig,
    fertility_posterior_draws,
    q5_posterior_draws,
    run_mcmc,
)
from .brass import (
    IndirectEstimate,
    indirect_estimates,
    load_life_table_ratios,
    load_trussell_coefficients,
    select_life_table,
)
from .direct import (
    DirectEstimate,
    FusedEstimate,
    direct_estimate,
    fuse,
    hiv_adjust,
    make_periods,
)
from .evaluate import (
    PopulationCounts,
    aggregate_q5,
    pare,
    split_clusters,
    weighted_mse,
)
from .dataio import (
    SchemaError,
    emit_fbh,
    emit_sbh,
    read_fbh,
    read_hiv_factors,
    read_sbh,
)

__all__ = [
    "AgeGridConfig", "Child", "CovariateProfile", "FullBirthHistory",
    "SummaryBirthHistory", "summarize", "under_five_mortality",
    "SurveyCalendar", "SimulationConfig",
    "SimulationTruth", "simulate_cohort", "DaEngine", "DaSettings",
    "run_da_sweep",
    "HivFactors", "TabulationSettings", "build_design",
    "build_rw2_precision", "gradient", "neg_log_posterior",
    "malawi_fertility_spec", "malawi_hazard_spec", "pc_prior_logdensity",
    "simulation_fertility_spec",
    "simulation_hazard_spec", "ChainOutput", "HmcConfig",
    "fertility_posterior_draws", "q5_posterior_draws", "run_mcmc",
    "IndirectEstimate", "indirect_estimates", "load_life_table_ratios",
    "load_trussell_coefficients", "select_life_table", "DirectEstimate",
    "FusedEstimate", "direct_estimate", "fuse", "hiv_adjust",
    "make_periods", "PopulationCounts", "aggregate_q5", "pare",
    "split_clusters", "weighted_mse", "SchemaError", "emit_fbh",
    "emit_sbh", "read_fbh", "read_hiv_factors", "read_sbh",
    "__version__",
]

"""Bayesian dynamic borrowing and synthetic control arms for binary endpoints."""

__version__ = "0.1.0"

from bdbscm.data import (
    HistoricalStudy,
    HistoricalSummary,
    ParseError,
    ValidationError,
    builtin_dataset,
    parse_historical,
    serialize_historical,
    summarize,
)
from bdbscm.exact import (
    TwoByTwo,
    analytical_power_two_prop,
    clopper_pearson,
    fisher_exact_two_sided,
    hypergeom_pmf,
)
from bdbscm.mixture import (
    BetaMixture,
    BetaMixtureEM,
    ess_moment,
    fit_mixture,
    mixture_mean,
    mixture_quantile,
    prob_greater,
    robustify,
    select_mixture,
    update,
)
from bdbscm.hierarchical import (
    HierModelConfig,
    MAPPrior,
    MapDiagnostics,
    PosteriorDraws,
    SamplerConfig,
    fit_hierarchical,
    log_posterior_density,
    predictive_draws,
)
from bdbscm.synthetic import (
    RateModel,
    RateModelError,
    SyntheticArm,
    SyntheticControl,
    arms_to_csv,
    fit_rate_distribution,
    generate_arm,
    pooled_model,
    replicate_arm,
    synth_summary,
)
from bdbscm.oc import (
    ComparisonReport,
    DesignConfig,
    OCResult,
    calibrate_effect,
    compare_designs,
    run_bdb_oc,
    run_scm_oc,
    total_information,
    tune_threshold,
)

__all__ = [name for name in dir() if not name.startswith("_")]

"""Multiscale dyadic bounds and Monte Carlo rates for empirical Wasserstein distances."""

__version__ = "0.1.0"

from .measures import (  # noqa: E402
    DiscreteMeasure,
    MeasureError,
    ReferenceMeasure,
    empirical,
    exp_moment,
    moment,
    poissonized_sample_size,
    read_point_cloud,
    write_point_cloud,
)
from .dyadic import (  # noqa: E402
    DpValue,
    TransportPlan,
    build_coupling,
    dp_compact,
    dp_noncompact,
    kappa,
    flattened_bound,
    ridic_bound,
)
from .ot_oracle import CostSpec, w1d_exact, w1d_reference, wexact_assignment, wexact_discrete  # noqa: E402
from .samplers import ProcessSpec, sample_ar1, sample_iid, sample_markov, simulate_mkv  # noqa: E402
from .analysis import (  # noqa: E402
    EnvelopeParams,
    binomial_bounds,
    envelope,
    f_fn,
    fit_rate,
    g_fn,
    mc_mean_distance,
    mc_mkv,
    mc_tail,
    poisson_bounds,
)

__all__ = [
    "__version__",
    "DiscreteMeasure", "MeasureError", "ReferenceMeasure", "empirical", "exp_moment", "moment",
    "poissonized_sample_size", "read_point_cloud", "write_point_cloud",
    "DpValue", "TransportPlan", "build_coupling", "dp_compact", "dp_noncompact", "kappa",
    "flattened_bound", "ridic_bound",
    "CostSpec", "w1d_exact", "w1d_reference", "wexact_assignment", "wexact_discrete",
    "ProcessSpec", "sample_ar1", "sample_iid", "sample_markov", "simulate_mkv",
    "EnvelopeParams", "binomial_bounds", "envelope", "f_fn", "fit_rate", "g_fn",
    "mc_mean_distance", "mc_mkv", "mc_tail", "poisson_bounds",
]

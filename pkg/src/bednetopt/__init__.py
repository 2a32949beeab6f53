"""Spatiotemporal bed-net allocation: disease dynamics, inference, and policy search."""

from .dynamics import (
    DynamicsParams,
    PanelData,
    ScenarioSpec,
    get_scenario,
    propagator,
    simulate_panel,
    step_latent,
    step_measure,
)
from .errors import ConfigError, DataError, NumericalError
from .gibbs import (
    PosteriorDraws,
    PriorSpec,
    gibbs_fit,
    posterior_summary,
    thin_draws,
)
from .graph import (
    BandedCholesky,
    CarPrecision,
    ZoneGraph,
    build_car_precision,
    build_grid_graph,
    load_graph,
)
from .policy import (
    Allocation,
    PolicyParams,
    RiskFactors,
    allocate,
    baseline_even,
    baseline_highest_rate,
    global_utility,
    local_utility,
    priority_scores,
)
from .rollout import (
    LossEstimate,
    RolloutConfig,
    build_risk_factors,
    estimate_loss,
    estimate_loss_fixed_policy,
    improvement,
)
from .search import (
    SearchSpace,
    Surrogate,
    expected_improvement,
    fit_surrogate,
    lhs_design,
    optimize_policy,
    posterior_of_alpha,
    ridge_loss,
)
from .study import StudySettings, run_study

__version__ = "0.1.0"

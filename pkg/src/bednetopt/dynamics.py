"""Latent spatiotemporal disease dynamics and generative simulation scenarios.

The latent field eta evolves on the logit scale as a Gaussian AR(1) process:
the propagator matrix (own-lag and neighbor-lag terms, both modulated by the
allocation) carries the field forward, an allocation/covariate offset shifts
it, and a CAR-structured innovation adds spatially correlated noise.
Observed logit prevalence is the latent field plus iid measurement noise.

Latent states and observation vectors are plain length-n numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, logit

from .errors import ConfigError, DataError, NumericalError
from .graph import BandedCholesky, ZoneGraph, build_grid_graph

__all__ = [
    "DynamicsParams",
    "PanelData",
    "ScenarioSpec",
    "propagator",
    "latent_mean",
    "step_latent",
    "step_measure",
    "simulate_panel",
    "get_scenario",
]


@dataclass(frozen=True)
class DynamicsParams:
    """Coefficients of the latent process and measurement model.

    The own-lag multiplier applied to eta_{t-1} is (1 + c1) + b1 * a; the
    neighbor-lag multiplier is (c2 + b2 * a) / m. Zero variances are allowed
    so that noise-free stepping can reuse the same parameter object; the
    sampler only ever produces strictly positive variances.
    """

    c0: float
    b0: float
    c1: float
    b1: float
    c2: float
    b2: float
    beta1: np.ndarray
    beta2: np.ndarray
    sigma_e2: float
    sigma_s2: float
    rho: float

    def __post_init__(self) -> None:
        b1v = np.atleast_1d(np.asarray(self.beta1, dtype=float))
        b2v = np.atleast_1d(np.asarray(self.beta2, dtype=float))
        if b1v.shape != b2v.shape:
            raise ValueError("beta1 and beta2 must have the same length")
        b1v.setflags(write=False)
        b2v.setflags(write=False)
        object.__setattr__(self, "beta1", b1v)
        object.__setattr__(self, "beta2", b2v)
        if self.sigma_e2 < 0 or self.sigma_s2 < 0:
            raise ValueError("variances must be nonnegative")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")

    @property
    def n_covariates(self) -> int:
        return self.beta1.shape[0]

    @property
    def own_lag(self) -> float:
        return 1.0 + self.c1

    def as_dict(self) -> dict[str, float]:
        out = {
            "c0": self.c0,
            "b0": self.b0,
            "c1": self.c1,
            "b1": self.b1,
            "c2": self.c2,
            "b2": self.b2,
        }
        for k in range(self.n_covariates):
            out[f"beta1_{k + 1}"] = float(self.beta1[k])
        for k in range(self.n_covariates):
            out[f"beta2_{k + 1}"] = float(self.beta2[k])
        out.update(
            sigma_e2=self.sigma_e2, sigma_s2=self.sigma_s2, rho=self.rho
        )
        return out


@dataclass(frozen=True, eq=False)
class PanelData:
    """Observed panel: covariates, logit prevalence, and allocation history.

    logit_prevalence has columns t = 0..T; allocations has columns t = 1..T.
    """

    graph: ZoneGraph
    covariates: np.ndarray
    logit_prevalence: np.ndarray
    allocations: np.ndarray

    def __post_init__(self) -> None:
        n = self.graph.n_zones
        x = np.asarray(self.covariates, dtype=float)
        y = np.asarray(self.logit_prevalence, dtype=float)
        a = np.asarray(self.allocations, dtype=float)
        if x.ndim != 2 or x.shape[0] != n:
            raise DataError("covariates must be an (n_zones, p) matrix")
        if y.ndim != 2 or y.shape[0] != n:
            raise DataError("logit_prevalence must be an (n_zones, T+1) matrix")
        if a.ndim != 2 or a.shape[0] != n:
            raise DataError("allocations must be an (n_zones, T) matrix")
        if y.shape[1] != a.shape[1] + 1:
            raise DataError(
                "logit_prevalence must have exactly one more column than allocations"
            )
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise DataError("covariates and logit_prevalence must be finite")
        if a.size and (a.min() < 0.0 or a.max() > 1.0):
            raise DataError("allocation entries must lie in [0, 1]")
        for name, arr in (("covariates", x), ("logit_prevalence", y), ("allocations", a)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_zones(self) -> int:
        return self.graph.n_zones

    @property
    def n_transitions(self) -> int:
        return self.allocations.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]


def propagator(graph: ZoneGraph, params: DynamicsParams, a: np.ndarray) -> sp.csr_matrix:
    """Allocation-dependent linear map carrying the latent field one year forward.

    Diagonal entries are (1 + c1) + b1*a_i; entry (i, j) for neighbor j is
    (c2 + b2*a_i) / m_i.
    """
    a = _check_allocation(graph, a)
    own = (1.0 + params.c1) + params.b1 * a
    nbr = (params.c2 + params.b2 * a) / graph.degrees
    return (sp.diags(own) + sp.diags(nbr) @ graph.adjacency).tocsr()


def latent_mean(
    graph: ZoneGraph,
    params: DynamicsParams,
    eta_prev: np.ndarray,
    a: np.ndarray,
    X: np.ndarray,
    d0: float = 0.0,
) -> np.ndarray:
    """Conditional mean of eta_t given eta_{t-1}: propagator action plus offset.

    d0 adds a quadratic allocation effect used only by misspecified generators.
    """
    own = (1.0 + params.c1) + params.b1 * a
    nbr = (params.c2 + params.b2 * a) / graph.degrees
    out = own * eta_prev + nbr * (graph.adjacency @ eta_prev)
    out = out + params.c0 + params.b0 * a
    if d0 != 0.0:
        out = out + d0 * a * a
    if params.n_covariates:
        out = out + X @ params.beta1 + (X @ params.beta2) * a
    return out


def step_latent(
    graph: ZoneGraph,
    params: DynamicsParams,
    eta_prev: np.ndarray,
    a: np.ndarray,
    X: np.ndarray,
    noise: np.ndarray | str = "sample",
    rng: np.random.Generator | None = None,
    innovation_chol: BandedCholesky | None = None,
) -> np.ndarray:
    """Advance the latent field one year.

    noise is either an explicit length-n vector or "sample", in which case the
    innovation is drawn from MVN(0, sigma_s2 * (M - rho*G)^{-1}) using rng.
    """
    a = _check_allocation(graph, a)
    eta_prev = np.asarray(eta_prev, dtype=float)
    if eta_prev.shape != (graph.n_zones,):
        raise DataError("eta_prev has wrong length")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape != (graph.n_zones, params.n_covariates):
        raise DataError("covariate matrix shape does not match params")
    mean = latent_mean(graph, params, eta_prev, a, X)
    if isinstance(noise, str):
        if noise != "sample":
            raise ValueError(f"noise must be a vector or 'sample', got {noise!r}")
        if params.sigma_s2 == 0.0:
            return mean
        if rng is None:
            raise ValueError("rng is required when noise='sample'")
        chol = innovation_chol or BandedCholesky(
            graph.car_matrix(params.rho), perm=graph.rcm_order
        )
        eps = np.sqrt(params.sigma_s2) * chol.sample(rng)
        return mean + eps
    eps = np.asarray(noise, dtype=float)
    if eps.shape != mean.shape:
        raise DataError("noise vector has wrong length")
    return mean + eps


def step_measure(
    eta: np.ndarray,
    sigma_e2: float,
    noise: np.ndarray | str = "sample",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Observed logit prevalence: latent field plus iid Normal(0, sigma_e2)."""
    if sigma_e2 < 0:
        raise ValueError("sigma_e2 must be nonnegative")
    eta = np.asarray(eta, dtype=float)
    if isinstance(noise, str):
        if noise != "sample":
            raise ValueError(f"noise must be a vector or 'sample', got {noise!r}")
        if sigma_e2 == 0.0:
            return eta.copy()
        if rng is None:
            raise ValueError("rng is required when noise='sample'")
        return eta + np.sqrt(sigma_e2) * rng.standard_normal(eta.shape)
    return eta + np.asarray(noise, dtype=float)


@dataclass(frozen=True)
class ScenarioSpec:
    """Full description of a generative simulation scenario.

    The stock scenarios reproduce the 10x10-grid setting: one unit-variance
    Gaussian-process covariate with correlation exp(-d/2) over grid centroids,
    baseline field from a CAR prior, allocations drifting upward over time,
    and five annual transitions. ``quadratic_misspec`` adds d0 * a^2 to the
    latent mean, a term the fitted model deliberately excludes.
    """

    name: str
    params: DynamicsParams
    d0: float = 0.0
    rows: int = 10
    cols: int = 10
    n_years: int = 5
    eta0_sigma: float = 0.5
    eta0_rho: float = 0.9
    alloc_slope: float = 0.1
    alloc_sd: float = 0.05
    covariate_range: float = 2.0
    graph: ZoneGraph | None = None
    X: np.ndarray | None = None

    @staticmethod
    def correct(**overrides) -> "ScenarioSpec":
        return ScenarioSpec(
            name="correct_spec", params=_SIX_PARAMS_CORRECT, **overrides
        )

    @staticmethod
    def quadratic_misspec(**overrides) -> "ScenarioSpec":
        return ScenarioSpec(
            name="quadratic_misspec",
            params=replace(_SIX_PARAMS_CORRECT, b0=-0.8),
            d0=0.2,
            **overrides,
        )

    def resolve_graph(self) -> ZoneGraph:
        return self.graph if self.graph is not None else build_grid_graph(self.rows, self.cols)


_SIX_PARAMS_CORRECT = DynamicsParams(
    c0=0.2,
    b0=-0.7,
    c1=-0.1,
    b1=-0.1,
    c2=0.1,
    b2=-0.1,
    beta1=np.array([0.12]),
    beta2=np.array([-0.1]),
    sigma_e2=0.01**2,
    sigma_s2=0.1**2,
    rho=0.9,
)

_SCENARIOS = {
    "correct": ScenarioSpec.correct,
    "correct_spec": ScenarioSpec.correct,
    "quadratic_misspec": ScenarioSpec.quadratic_misspec,
    "misspec": ScenarioSpec.quadratic_misspec,
}


def get_scenario(name: str, **overrides) -> ScenarioSpec:
    try:
        factory = _SCENARIOS[name]
    except KeyError:
        raise ConfigError(
            f"unknown scenario {name!r}; expected one of {sorted(_SCENARIOS)}"
        ) from None
    return factory(**overrides)


def sample_covariates(
    graph: ZoneGraph,
    n_covariates: int,
    rng: np.random.Generator,
    corr_range: float = 2.0,
) -> np.ndarray:
    """Zero-mean unit-variance GP covariates with correlation exp(-d / range)."""
    if graph.coords is None:
        raise DataError(
            "scenario simulation needs zone coordinates (or a supplied covariate "
            "matrix) to build the spatial covariate field"
        )
    d = np.linalg.norm(graph.coords[:, None, :] - graph.coords[None, :, :], axis=-1)
    cov = np.exp(-d / corr_range) + 1e-10 * np.eye(graph.n_zones)
    chol = np.linalg.cholesky(cov)
    return chol @ rng.standard_normal((graph.n_zones, n_covariates))


def _truncated_normal(
    rng: np.random.Generator,
    mean: np.ndarray,
    sd: float,
    low: float = 0.0,
    high: float = 1.0,
) -> np.ndarray:
    """Rejection sampler: redraw out-of-range entries until all lie inside."""
    mean = np.asarray(mean, dtype=float)
    out = rng.normal(mean, sd)
    bad = (out < low) | (out > high)
    for _ in range(1000):
        if not bad.any():
            return out
        out[bad] = rng.normal(mean[bad], sd)
        bad = (out < low) | (out > high)
    raise NumericalError("truncated-normal rejection sampling did not terminate")


def simulate_panel(
    scenario: ScenarioSpec,
    seed: int,
    return_latent: bool = False,
) -> PanelData | tuple[PanelData, np.ndarray]:
    """Draw one synthetic panel from the scenario's generative model.

    With return_latent=True also returns the (n, T+1) latent trajectory, which
    evaluation rollouts under the true generator start from.
    """
    rng = np.random.default_rng(seed)
    graph = scenario.resolve_graph()
    n = graph.n_zones
    p = scenario.params
    T = scenario.n_years

    if scenario.X is not None:
        X = np.asarray(scenario.X, dtype=float)
        if X.shape[0] != n:
            raise DataError("supplied covariate matrix has wrong number of rows")
    else:
        X = sample_covariates(
            graph, p.n_covariates, rng, corr_range=scenario.covariate_range
        )

    eta0_chol = BandedCholesky(graph.car_matrix(scenario.eta0_rho), perm=graph.rcm_order)
    innov_chol = (
        eta0_chol
        if scenario.eta0_rho == p.rho
        else BandedCholesky(graph.car_matrix(p.rho), perm=graph.rcm_order)
    )

    eta = np.empty((n, T + 1))
    Y = np.empty((n, T + 1))
    A = np.empty((n, T))

    eta[:, 0] = scenario.eta0_sigma * eta0_chol.sample(rng)
    Y[:, 0] = step_measure(eta[:, 0], p.sigma_e2, rng=rng)
    for t in range(1, T + 1):
        A[:, t - 1] = _truncated_normal(
            rng, np.full(n, scenario.alloc_slope * t), scenario.alloc_sd
        )
        mean = latent_mean(graph, p, eta[:, t - 1], A[:, t - 1], X, d0=scenario.d0)
        eps = (
            np.sqrt(p.sigma_s2) * innov_chol.sample(rng)
            if p.sigma_s2 > 0
            else np.zeros(n)
        )
        eta[:, t] = mean + eps
        Y[:, t] = step_measure(eta[:, t], p.sigma_e2, rng=rng)

    panel = PanelData(
        graph=graph, covariates=X, logit_prevalence=Y, allocations=A
    )
    if return_latent:
        return panel, eta
    return panel


def prevalence(logit_rate: np.ndarray) -> np.ndarray:
    """Map logit-scale rates to (0, 1) prevalences."""
    return expit(logit_rate)


def logit_rate(prev: np.ndarray) -> np.ndarray:
    """Inverse of ``prevalence``; rejects rates outside (0, 1)."""
    prev = np.asarray(prev, dtype=float)
    if np.any(prev <= 0.0) or np.any(prev >= 1.0):
        raise DataError("prevalence values must lie strictly inside (0, 1)")
    return logit(prev)


def _check_allocation(graph: ZoneGraph, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (graph.n_zones,):
        raise DataError("allocation has wrong length")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("allocation entries must lie in [0, 1]")
    return a

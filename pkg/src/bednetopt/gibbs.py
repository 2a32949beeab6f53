"""Blocked Gibbs sampler for the spatiotemporal disease model.

Per sweep: (i) the regression block (c0, b0, 1+c1, b1, c2, b2, beta1, beta2)
drawn jointly from its conjugate Gaussian conditional, since the latent
process is linear in these coefficients; (ii) conjugate inverse-gamma draws
of the measurement and innovation variances; (iii) an adaptive random-walk
Metropolis step for rho on the logit scale using the GMRF log-determinant;
(iv) one Gaussian block draw per latent time slice.

The initial latent slice carries a proper N(0, eta0_variance * I) prior,
weak enough to be dominated by the data but keeping the joint prior proper.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.special

from .dynamics import DynamicsParams, PanelData
from .errors import DataError, NumericalError
from .graph import BandedCholesky

__all__ = [
    "PriorSpec",
    "PosteriorDraws",
    "ParamSummary",
    "gibbs_fit",
    "log_joint",
    "posterior_summary",
    "thin_draws",
]


@dataclass(frozen=True)
class PriorSpec:
    """Weakly informative conjugate priors for the dynamics model."""

    coef_variance: float = 100.0
    var_shape: float = 0.1
    var_rate: float = 0.1
    rho_prior: str = "uniform(0,1)"
    eta0_variance: float = 100.0

    def __post_init__(self) -> None:
        if min(self.coef_variance, self.var_shape, self.var_rate,
               self.eta0_variance) <= 0:
            raise ValueError("prior hyperparameters must be positive")
        if self.rho_prior != "uniform(0,1)":
            raise ValueError("only the uniform(0,1) rho prior is supported")


@dataclass
class PosteriorDraws:
    """Retained MCMC draws: (DynamicsParams, latent field) pairs."""

    draws: list[tuple[DynamicsParams, np.ndarray]]
    burn_in: int
    acceptance_rate_rho: float

    @property
    def n_kept(self) -> int:
        return len(self.draws)

    def param_matrix(self) -> tuple[np.ndarray, list[str]]:
        """Stack scalar parameters into an (n_kept, k) matrix with column names."""
        names = list(self.draws[0][0].as_dict().keys())
        mat = np.array([[d.as_dict()[k] for k in names] for d, _ in self.draws])
        return mat, names


@dataclass(frozen=True)
class ParamSummary:
    name: str
    mean: float
    lower: float
    upper: float
    excludes_zero: bool


@dataclass
class _GibbsState:
    gamma: np.ndarray       # [c0, b0, 1+c1, b1, c2, b2, beta1..., beta2...]
    sigma_e2: float
    sigma_s2: float
    rho: float
    eta: np.ndarray         # (n, T+1)
    logdet_rho: float
    rho_step: float = 0.5
    accepted: int = 0
    proposed: int = 0

    def params(self, p: int) -> DynamicsParams:
        g = self.gamma
        return DynamicsParams(
            c0=float(g[0]), b0=float(g[1]), c1=float(g[2]) - 1.0, b1=float(g[3]),
            c2=float(g[4]), b2=float(g[5]),
            beta1=g[6:6 + p].copy(), beta2=g[6 + p:6 + 2 * p].copy(),
            sigma_e2=self.sigma_e2, sigma_s2=self.sigma_s2, rho=self.rho,
        )


def _design_matrices(data: PanelData, eta: np.ndarray) -> list[np.ndarray]:
    """Per-transition design matrix for the regression block.

    Columns: 1, A_t, eta_{t-1}, A_t*eta_{t-1}, nbar_{t-1}, A_t*nbar_{t-1},
    X_1..X_p, X_1*A_t..X_p*A_t, evaluated at the current latent field.
    """
    g = data.graph
    n, T, p = data.n_zones, data.n_transitions, data.n_covariates
    nbar = (g.adjacency @ eta) / g.degrees[:, None]
    mats = []
    for t in range(1, T + 1):
        a = data.allocations[:, t - 1]
        cols = [
            np.ones(n), a, eta[:, t - 1], a * eta[:, t - 1],
            nbar[:, t - 1], a * nbar[:, t - 1],
        ]
        for k in range(p):
            cols.append(data.covariates[:, k])
        for k in range(p):
            cols.append(data.covariates[:, k] * a)
        mats.append(np.column_stack(cols))
    return mats


def _regression_normal_equations(
    data: PanelData,
    eta: np.ndarray,
    sigma_s2: float,
    rho: float,
    prior: PriorSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Precision matrix and linear term of the regression block conditional."""
    q0 = data.graph.car_matrix(rho)
    mats = _design_matrices(data, eta)
    d = mats[0].shape[1]
    prec = np.eye(d) / prior.coef_variance
    rhs = np.zeros(d)
    for t, u in enumerate(mats, start=1):
        qu = q0 @ u
        prec += (u.T @ qu) / sigma_s2
        rhs += (qu.T @ eta[:, t]) / sigma_s2
    return prec, rhs


def _sample_mvn_from_precision(
    prec: np.ndarray, rhs: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw from N(prec^{-1} rhs, prec^{-1}) via a dense Cholesky of prec."""
    try:
        low, _ = scipy.linalg.cho_factor(prec, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError("conditional precision not positive definite") from exc
    mean = scipy.linalg.cho_solve((low, True), rhs)
    z = rng.standard_normal(rhs.shape[0])
    return mean + scipy.linalg.solve_triangular(low.T, z, lower=False)


def _sweep(
    state: _GibbsState,
    data: PanelData,
    prior: PriorSpec,
    rng: np.random.Generator,
    adapt: bool,
    sweep_index: int,
) -> None:
    """One full Gibbs sweep, updating the state in place."""
    g = data.graph
    n, T, p = data.n_zones, data.n_transitions, data.n_covariates
    y = data.logit_prevalence
    q0 = g.car_matrix(state.rho)

    # regression block
    mats = _design_matrices(data, state.eta)
    d = mats[0].shape[1]
    prec = np.eye(d) / prior.coef_variance
    rhs = np.zeros(d)
    for t, u in enumerate(mats, start=1):
        qu = q0 @ u
        prec += (u.T @ qu) / state.sigma_s2
        rhs += (qu.T @ state.eta[:, t]) / state.sigma_s2
    state.gamma = _sample_mvn_from_precision(prec, rhs, rng)

    # innovation and measurement variances
    resid = np.column_stack(
        [state.eta[:, t] - mats[t - 1] @ state.gamma for t in range(1, T + 1)]
    )
    q0_resid = q0 @ resid
    quad_s = float(np.sum(resid * q0_resid))
    state.sigma_s2 = _sample_inverse_gamma(
        prior.var_shape + 0.5 * n * T, prior.var_rate + 0.5 * quad_s, rng
    )
    meas = y - state.eta
    state.sigma_e2 = _sample_inverse_gamma(
        prior.var_shape + 0.5 * n * (T + 1),
        prior.var_rate + 0.5 * float(np.sum(meas * meas)),
        rng,
    )

    # rho: adaptive random-walk Metropolis on the logit scale
    s_m = float(np.sum(resid * (g.degrees[:, None] * resid)))
    s_g = float(np.sum(resid * (g.adjacency @ resid)))

    def log_target(rho: float, logdet: float) -> float:
        return (
            0.5 * T * logdet
            - 0.5 * (s_m - rho * s_g) / state.sigma_s2
            + np.log(rho) + np.log1p(-rho)  # logit-scale jacobian
        )

    cur_logit = np.log(state.rho) - np.log1p(-state.rho)
    prop_logit = cur_logit + state.rho_step * rng.standard_normal()
    rho_prop = 1.0 / (1.0 + np.exp(-prop_logit))
    rho_prop = min(max(rho_prop, 1e-12), 1.0 - 1e-12)
    logdet_prop = BandedCholesky(g.car_matrix(rho_prop), perm=g.rcm_order).log_det
    log_ratio = log_target(rho_prop, logdet_prop) - log_target(
        state.rho, state.logdet_rho
    )
    accept_prob = min(1.0, float(np.exp(min(log_ratio, 0.0))))
    if rng.random() < accept_prob:
        state.rho = float(rho_prop)
        state.logdet_rho = logdet_prop
        q0 = g.car_matrix(state.rho)
        if not adapt:
            state.accepted += 1
    if not adapt:
        state.proposed += 1
    if adapt:
        state.rho_step = float(
            np.exp(
                np.log(state.rho_step)
                + (accept_prob - 0.44) / (1.0 + sweep_index) ** 0.6
            )
        )

    # latent field, one time slice at a time
    qs = q0.toarray() / state.sigma_s2
    gd = g.adjacency.toarray()
    gamma = state.gamma
    beta1, beta2 = gamma[6:6 + p], gamma[6 + p:6 + 2 * p]
    a_all = data.allocations
    w_mats = []
    offsets = []
    for t in range(1, T + 1):
        a = a_all[:, t - 1]
        own = gamma[2] + gamma[3] * a
        nbr = (gamma[4] + gamma[5] * a) / g.degrees
        w_mats.append(np.diag(own) + nbr[:, None] * gd)
        off = gamma[0] + gamma[1] * a
        if p:
            off = off + data.covariates @ beta1 + (data.covariates @ beta2) * a
        offsets.append(off)

    qs_w = [qs @ w for w in w_mats]
    eye_e = np.eye(n) / state.sigma_e2
    for t in range(T + 1):
        if t == 0:
            p_mat = np.eye(n) / prior.eta0_variance + w_mats[0].T @ qs_w[0] + eye_e
            b = y[:, 0] / state.sigma_e2 + qs_w[0].T @ (state.eta[:, 1] - offsets[0])
        elif t < T:
            p_mat = qs + w_mats[t].T @ qs_w[t] + eye_e
            b = (
                qs @ (w_mats[t - 1] @ state.eta[:, t - 1] + offsets[t - 1])
                + qs_w[t].T @ (state.eta[:, t + 1] - offsets[t])
                + y[:, t] / state.sigma_e2
            )
        else:
            p_mat = qs + eye_e
            b = (
                qs @ (w_mats[T - 1] @ state.eta[:, T - 1] + offsets[T - 1])
                + y[:, T] / state.sigma_e2
            )
        state.eta[:, t] = _sample_mvn_from_precision(p_mat, b, rng)

    if not (
        np.all(np.isfinite(state.eta))
        and np.all(np.isfinite(state.gamma))
        and np.isfinite(state.sigma_e2)
        and np.isfinite(state.sigma_s2)
    ):
        raise NumericalError(f"non-finite state at iteration {sweep_index}")


def _sample_inverse_gamma(
    shape: float, rate: float, rng: np.random.Generator
) -> float:
    return float(rate / rng.gamma(shape))


def log_joint(
    data: PanelData,
    prior: PriorSpec,
    params: DynamicsParams,
    eta: np.ndarray,
) -> float:
    """Unnormalized joint log density of (params, eta, Y).

    Burn-in diagnostic: the sampler should drive this up from its cold start.
    """
    from .dynamics import latent_mean

    g = data.graph
    n, T = data.n_zones, data.n_transitions
    y = data.logit_prevalence
    q0 = g.car_matrix(params.rho)
    logdet = BandedCholesky(q0, perm=g.rcm_order).log_det
    resid = y - eta
    val = -0.5 * n * (T + 1) * np.log(2 * np.pi * params.sigma_e2)
    val -= 0.5 * float(np.sum(resid * resid)) / params.sigma_e2
    for t in range(1, T + 1):
        r = eta[:, t] - latent_mean(
            g, params, eta[:, t - 1], data.allocations[:, t - 1], data.covariates
        )
        val += 0.5 * (logdet - n * np.log(2 * np.pi * params.sigma_s2))
        val -= 0.5 * float(r @ (q0 @ r)) / params.sigma_s2
    val -= 0.5 * n * np.log(2 * np.pi * prior.eta0_variance)
    val -= 0.5 * float(eta[:, 0] @ eta[:, 0]) / prior.eta0_variance
    gamma = np.concatenate(
        [
            [params.c0, params.b0, 1.0 + params.c1, params.b1, params.c2,
             params.b2],
            params.beta1,
            params.beta2,
        ]
    )
    val -= 0.5 * float(gamma @ gamma) / prior.coef_variance
    val -= gamma.shape[0] * 0.5 * np.log(2 * np.pi * prior.coef_variance)
    for s2 in (params.sigma_e2, params.sigma_s2):
        val += (
            prior.var_shape * np.log(prior.var_rate)
            - scipy.special.gammaln(prior.var_shape)
            - (prior.var_shape + 1.0) * np.log(s2)
            - prior.var_rate / s2
        )
    return float(val)


def _initial_state(data: PanelData, rng: np.random.Generator) -> _GibbsState:
    y = data.logit_prevalence
    d = 6 + 2 * data.n_covariates
    v0 = float(np.var(np.diff(y, axis=1))) if data.n_transitions else 1.0
    v0 = max(v0, 1e-8)
    rho0 = 0.9
    return _GibbsState(
        gamma=np.zeros(d),
        sigma_e2=v0,
        sigma_s2=v0,
        rho=rho0,
        eta=y.copy(),
        logdet_rho=BandedCholesky(
            data.graph.car_matrix(rho0), perm=data.graph.rcm_order
        ).log_det,
    )


def gibbs_fit(
    data: PanelData,
    prior: PriorSpec,
    n_iter: int,
    burn_in: int,
    seed: int,
) -> PosteriorDraws:
    """Run the Gibbs sampler and keep every post-burn-in draw."""
    if data.n_transitions < 1:
        raise DataError(
            "panel has no transitions (a single time column cannot identify "
            "the dynamics)"
        )
    if not n_iter > burn_in >= 0:
        raise ValueError("need n_iter > burn_in >= 0")
    rng = np.random.default_rng(seed)
    state = _initial_state(data, rng)
    p = data.n_covariates
    draws: list[tuple[DynamicsParams, np.ndarray]] = []
    for it in range(n_iter):
        _sweep(state, data, prior, rng, adapt=it < burn_in, sweep_index=it)
        if it >= burn_in:
            draws.append((state.params(p), state.eta.copy()))
    rate = state.accepted / state.proposed if state.proposed else 0.0
    return PosteriorDraws(draws=draws, burn_in=burn_in, acceptance_rate_rho=rate)


_DERIVED_ROWS = {"one_plus_c1": lambda d: 1.0 + d["c1"]}


def posterior_summary(draws: PosteriorDraws) -> list[ParamSummary]:
    """Monte Carlo mean and equal-tailed 95% interval per scalar parameter."""
    if draws.n_kept == 0:
        raise DataError("no posterior draws to summarize")
    if draws.n_kept < 2:
        raise DataError("posterior summary needs at least 2 draws")
    mat, names = draws.param_matrix()
    rows = []
    columns = {name: mat[:, j] for j, name in enumerate(names)}
    columns["one_plus_c1"] = 1.0 + columns["c1"]
    order = names[:3] + ["one_plus_c1"] + names[3:]
    for name in order:
        col = columns[name]
        lo, hi = np.percentile(col, [2.5, 97.5])
        rows.append(
            ParamSummary(
                name=name,
                mean=float(col.mean()),
                lower=float(lo),
                upper=float(hi),
                excludes_zero=bool(lo > 0.0 or hi < 0.0),
            )
        )
    return rows


def thin_draws(draws: PosteriorDraws, k: int, seed: int = 0) -> PosteriorDraws:
    """Uniform subsample of k draws without replacement (seeded)."""
    if not 1 <= k <= draws.n_kept:
        raise ValueError(f"k must lie in [1, {draws.n_kept}], got {k}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(draws.n_kept, size=k, replace=False))
    return PosteriorDraws(
        draws=[draws.draws[i] for i in idx],
        burn_in=draws.burn_in,
        acceptance_rate_rho=draws.acceptance_rate_rho,
    )

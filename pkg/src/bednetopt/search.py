"""Policy-parameter search: Latin hypercube start, GP surrogate, EI refinement.

The search minimizes the ridge-stabilized rollout loss over the box
alpha_k in [-5, 5], alpha0 in [0, 1]. Losses are noisy Monte Carlo estimates,
so the surrogate is an anisotropic Matern-5/2 Gaussian process with a fitted
nugget (lower-bounded at 1e-8); hyperparameters maximize the marginal
likelihood with multistart L-BFGS. Each sequential step proposes the expected
improvement maximizer from 1000 uniform candidates plus local polish of the
ten best.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import ndtr

from .errors import NumericalError
from .gibbs import PosteriorDraws
from .policy import PolicyParams
from .rollout import LossEstimate, RolloutConfig, estimate_loss

__all__ = [
    "SearchSpace",
    "Surrogate",
    "TraceEntry",
    "lhs_design",
    "ridge_loss",
    "fit_surrogate",
    "expected_improvement",
    "minimize_objective",
    "optimize_policy",
    "posterior_of_alpha",
]

RIDGE_WEIGHT = 1e-4
NUGGET_FLOOR = 1e-8


@dataclass(frozen=True)
class SearchSpace:
    """Box bounds and evaluation budget for the policy-parameter search."""

    q: int
    n_initial: int = 100
    n_sequential: int = 50
    alpha_low: float = -5.0
    alpha_high: float = 5.0
    alpha0_low: float = 0.0
    alpha0_high: float = 1.0

    def __post_init__(self) -> None:
        if self.q < 1:
            raise ValueError("need at least one risk factor")
        if self.n_initial < self.q + 2:
            raise ValueError("n_initial must be at least q + 2")
        if self.n_sequential < 0:
            raise ValueError("n_sequential must be nonnegative")
        if not (self.alpha_low < self.alpha_high
                and self.alpha0_low < self.alpha0_high):
            raise ValueError("bounds must be non-degenerate")

    @property
    def dim(self) -> int:
        return self.q + 1

    def bounds(self) -> np.ndarray:
        """(dim, 2) bounds; row 0 is alpha0, rows 1..q are the factor weights."""
        out = np.empty((self.dim, 2))
        out[0] = (self.alpha0_low, self.alpha0_high)
        out[1:] = (self.alpha_low, self.alpha_high)
        return out

    def policy(self, x: np.ndarray, utility_kind: str) -> PolicyParams:
        return PolicyParams(
            alpha0=float(x[0]), alpha=np.asarray(x[1:], dtype=float),
            utility_kind=utility_kind,
        )


def lhs_design(space: SearchSpace, seed: int, n_restarts: int = 20) -> np.ndarray:
    """Latin hypercube over the search box: one point per stratum per column,
    jittered uniformly, best of ``n_restarts`` designs by maximin distance."""
    rng = np.random.default_rng(seed)
    n, d = space.n_initial, space.dim
    best, best_score = None, -np.inf
    for _ in range(max(1, n_restarts)):
        u = np.empty((n, d))
        for j in range(d):
            u[:, j] = (rng.permutation(n) + rng.uniform(size=n)) / n
        if n > 1:
            diff = u[:, None, :] - u[None, :, :]
            dist2 = (diff * diff).sum(-1)
            np.fill_diagonal(dist2, np.inf)
            score = dist2.min()
        else:
            score = 0.0
        if score > best_score:
            best, best_score = u, score
    b = space.bounds()
    return b[:, 0] + best * (b[:, 1] - b[:, 0])


def ridge_loss(alpha: np.ndarray, raw: LossEstimate | float) -> float:
    """Rollout loss plus the small quadratic stabilizer over all q+1 weights."""
    x = np.asarray(alpha, dtype=float)
    mean = raw.mean if isinstance(raw, LossEstimate) else float(raw)
    return mean + RIDGE_WEIGHT * float(x @ x)


def _matern52(r: np.ndarray) -> np.ndarray:
    s = np.sqrt(5.0) * r
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


@dataclass
class Surrogate:
    """Fitted Matern-5/2 GP on scaled inputs and standardized outputs."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_low: np.ndarray
    x_range: np.ndarray
    y_mean: float
    y_scale: float
    log_ell: np.ndarray
    log_sf2: float
    log_sn2: float
    chol: np.ndarray
    alpha_vec: np.ndarray

    @property
    def nugget(self) -> float:
        """Fitted noise variance in original loss units."""
        return float(np.exp(self.log_sn2) * self.y_scale**2)

    def _scaled(self, x: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(x) - self.x_low) / self.x_range

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and standard deviation of the latent loss surface."""
        z = self._scaled(x)
        zt = self._scaled(self.x_train)
        ell = np.exp(self.log_ell)
        d2 = (
            ((z[:, None, :] - zt[None, :, :]) / ell) ** 2
        ).sum(-1)
        kstar = np.exp(self.log_sf2) * _matern52(np.sqrt(d2))
        mean = kstar @ self.alpha_vec
        v = scipy.linalg.solve_triangular(self.chol, kstar.T, lower=True)
        var = np.exp(self.log_sf2) - (v * v).sum(axis=0)
        if var.min() < -1e-6:
            raise NumericalError(f"negative predictive variance {var.min():.3e}")
        var = np.clip(var, 0.0, None)
        return (
            self.y_mean + self.y_scale * mean,
            self.y_scale * np.sqrt(var),
        )


def _merge_duplicates(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uniq, inverse = np.unique(x, axis=0, return_inverse=True)
    if uniq.shape[0] == x.shape[0]:
        return x, y
    sums = np.zeros(uniq.shape[0])
    counts = np.zeros(uniq.shape[0])
    np.add.at(sums, inverse, y)
    np.add.at(counts, inverse, 1.0)
    return uniq, sums / counts


def _nll_and_grad(theta, d2_dims, y):
    m = y.shape[0]
    d = d2_dims.shape[0]
    log_ell, log_sf2, log_sn2 = theta[:d], theta[d], theta[d + 1]
    ell2 = np.exp(2.0 * log_ell)
    r2 = np.tensordot(1.0 / ell2, d2_dims, axes=1)
    r = np.sqrt(np.maximum(r2, 0.0))
    s = np.sqrt(5.0) * r
    exp_term = np.exp(-s)
    base = (1.0 + s + s * s / 3.0) * exp_term
    sf2, sn2 = np.exp(log_sf2), np.exp(log_sn2)
    k = sf2 * base + sn2 * np.eye(m)
    try:
        low = scipy.linalg.cholesky(k, lower=True)
    except scipy.linalg.LinAlgError:
        return np.inf, np.zeros_like(theta)
    alpha = scipy.linalg.cho_solve((low, True), y)
    nll = (
        0.5 * float(y @ alpha)
        + float(np.sum(np.log(np.diag(low))))
        + 0.5 * m * np.log(2.0 * np.pi)
    )
    kinv = scipy.linalg.cho_solve((low, True), np.eye(m))
    a_mat = kinv - np.outer(alpha, alpha)
    grad = np.empty_like(theta)
    dbase = (5.0 / 3.0) * (1.0 + s) * exp_term  # -dk/dr2 * 2 ... via chain below
    for j in range(d):
        dk = sf2 * dbase * (d2_dims[j] / ell2[j])
        grad[j] = 0.5 * float(np.sum(a_mat * dk))
    grad[d] = 0.5 * float(np.sum(a_mat * (sf2 * base)))
    grad[d + 1] = 0.5 * float(np.sum(np.diag(a_mat)) * sn2)
    return nll, grad


def fit_surrogate(
    x: np.ndarray,
    y: np.ndarray,
    seed: int = 0,
    n_restarts: int = 3,
) -> Surrogate:
    """Maximum-marginal-likelihood GP fit with multistart L-BFGS."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y must have matching rows")
    d = x.shape[1]
    if x.shape[0] < d + 2:
        raise ValueError("need at least dim + 2 observations to fit the surrogate")
    x, y = _merge_duplicates(x, y)
    m = x.shape[0]

    x_low = x.min(axis=0)
    x_range = np.where(x.max(axis=0) - x_low > 1e-12, x.max(axis=0) - x_low, 1.0)
    z = (x - x_low) / x_range
    y_mean = float(y.mean())
    y_scale = float(y.std())
    y_scale = y_scale if y_scale > 1e-12 else 1.0
    ys = (y - y_mean) / y_scale

    d2_dims = np.stack(
        [(z[:, None, j] - z[None, :, j]) ** 2 for j in range(d)]
    )

    lo = np.concatenate([np.full(d, np.log(0.05)), [np.log(1e-4)], [np.log(NUGGET_FLOOR)]])
    hi = np.concatenate([np.full(d, np.log(20.0)), [np.log(1e2)], [np.log(2.0)]])
    rng = np.random.default_rng(seed)
    starts = [np.concatenate([np.full(d, np.log(0.5)), [0.0], [np.log(1e-2)]])]
    for _ in range(max(0, n_restarts - 1)):
        starts.append(lo + rng.uniform(size=d + 2) * (hi - lo))

    best_theta, best_nll = None, np.inf
    for s0 in starts:
        res = scipy.optimize.minimize(
            _nll_and_grad, s0, args=(d2_dims, ys), jac=True,
            method="L-BFGS-B", bounds=list(zip(lo, hi)),
        )
        if res.fun < best_nll:
            best_theta, best_nll = res.x, res.fun
    if best_theta is None or not np.isfinite(best_nll):
        raise NumericalError("surrogate hyperparameter optimization failed")

    log_ell = best_theta[:d]
    log_sf2 = float(best_theta[d])
    log_sn2 = float(best_theta[d + 1])
    ell = np.exp(log_ell)
    r2 = np.tensordot(1.0 / np.exp(2 * log_ell), d2_dims, axes=1)
    base = _matern52(np.sqrt(np.maximum(r2, 0.0)))
    sn2 = np.exp(log_sn2)
    for _ in range(8):
        k = np.exp(log_sf2) * base + sn2 * np.eye(m)
        try:
            low = scipy.linalg.cholesky(k, lower=True)
            break
        except scipy.linalg.LinAlgError:
            sn2 *= 10.0
    else:
        raise NumericalError("kernel matrix not positive definite after "
                             "nugget escalation")
    alpha_vec = scipy.linalg.cho_solve((low, True), ys)
    return Surrogate(
        x_train=x, y_train=y, x_low=x_low, x_range=x_range,
        y_mean=y_mean, y_scale=y_scale,
        log_ell=log_ell, log_sf2=log_sf2, log_sn2=float(np.log(sn2)),
        chol=low, alpha_vec=alpha_vec,
    )


def expected_improvement(
    s: Surrogate, x: np.ndarray, f_min: float
) -> np.ndarray | float:
    """EI for minimization; zero-variance points fall back to the plain gap."""
    scalar = np.asarray(x).ndim == 1
    mu, sd = s.predict(x)
    gap = f_min - mu
    out = np.maximum(gap, 0.0)
    pos = sd > 0
    z = np.where(pos, gap / np.where(pos, sd, 1.0), 0.0)
    phi = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    out = np.where(pos, gap * ndtr(z) + sd * phi, out)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class TraceEntry:
    """One evaluated point: ridge-stabilized loss and its raw MC error."""

    index: int
    point: np.ndarray
    loss: float
    loss_se: float
    is_initial: bool


def minimize_objective(
    loss_fn,
    space: SearchSpace,
    seed: int,
    n_candidates: int = 1000,
    n_polish: int = 10,
) -> tuple[np.ndarray, list[TraceEntry]]:
    """Core search loop over an arbitrary (possibly noisy) objective.

    loss_fn(x, eval_index) returns (loss_mean, loss_se); the ridge penalty is
    added here. Returns the argmin over every evaluated point plus the trace.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
    b = space.bounds()
    x_all = lhs_design(space, seed)
    trace: list[TraceEntry] = []
    losses = []
    for i, x in enumerate(x_all):
        raw, se = loss_fn(x, i)
        lh = ridge_loss(x, raw)
        losses.append(lh)
        trace.append(TraceEntry(i, x.copy(), lh, se, True))
    losses = list(losses)
    xs = [row.copy() for row in x_all]

    for step in range(space.n_sequential):
        surrogate = fit_surrogate(
            np.array(xs), np.array(losses), seed=seed + 7919 * (step + 1)
        )
        f_min = float(np.min(losses))
        cands = b[:, 0] + rng.uniform(size=(n_candidates, space.dim)) * (
            b[:, 1] - b[:, 0]
        )
        ei = expected_improvement(surrogate, cands, f_min)
        order = np.argsort(-ei)[:n_polish]
        best_x = cands[order[0]]
        best_ei = float(ei[order[0]])
        for idx in order:
            res = scipy.optimize.minimize(
                lambda zz: -expected_improvement(surrogate, zz, f_min),
                cands[idx],
                method="L-BFGS-B",
                bounds=[tuple(row) for row in b],
                options={"maxiter": 60},
            )
            if np.isfinite(res.fun) and -res.fun > best_ei:
                best_ei = float(-res.fun)
                best_x = np.clip(res.x, b[:, 0], b[:, 1])
        eval_index = len(xs)
        raw, se = loss_fn(best_x, eval_index)
        lh = ridge_loss(best_x, raw)
        xs.append(best_x.copy())
        losses.append(lh)
        trace.append(TraceEntry(eval_index, best_x.copy(), lh, se, False))

    best = int(np.argmin(losses))
    return xs[best].copy(), trace


def optimize_policy(
    draws: PosteriorDraws,
    data,
    cfg: RolloutConfig,
    space: SearchSpace,
    seed: int,
    utility_kind: str = "linear",
) -> tuple[PolicyParams, list[TraceEntry]]:
    """Search the policy box for the ridge-loss minimizer under rollouts."""
    eval_seeds = np.random.SeedSequence((seed, 11)).generate_state(
        space.n_initial + space.n_sequential + 1
    )

    def loss_fn(x: np.ndarray, index: int) -> tuple[float, float]:
        policy = space.policy(x, utility_kind)
        est = estimate_loss(
            policy, draws, data, replace(cfg, seed=int(eval_seeds[index]))
        )
        return est.mean, est.std_error

    x_best, trace = minimize_objective(loss_fn, space, seed)
    return space.policy(x_best, utility_kind), trace


def posterior_of_alpha(
    draws_thinned: PosteriorDraws,
    data,
    cfg: RolloutConfig,
    space: SearchSpace,
    seed: int,
    utility_kind: str = "linear",
) -> tuple[np.ndarray, np.ndarray]:
    """Optimal policy parameters per posterior draw, with coordinate quantiles.

    Returns (samples, quantiles): samples is (n_draws, q+1) with alpha0 first;
    quantiles holds the 5/25/50/75/95th percentiles per coordinate, (5, q+1).
    """
    rows = []
    child_seeds = np.random.SeedSequence((seed, 23)).generate_state(
        draws_thinned.n_kept
    )
    for i, draw in enumerate(draws_thinned.draws):
        single = PosteriorDraws(
            draws=[draw], burn_in=draws_thinned.burn_in,
            acceptance_rate_rho=draws_thinned.acceptance_rate_rho,
        )
        policy, _ = optimize_policy(
            single, data, cfg, space, int(child_seeds[i]), utility_kind
        )
        rows.append(np.concatenate([[policy.alpha0], policy.alpha]))
    samples = np.array(rows)
    quantiles = np.percentile(samples, [5, 25, 50, 75, 95], axis=0)
    return samples, quantiles

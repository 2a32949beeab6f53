"""Priority scores, local/global utilities, and the budget-constrained allocator.

The policy map scores each zone through a logistic priority, turns scores into
a concave quadratic program (linear or quadratic local utility minus a spatial
smoothness penalty), and maximizes it over the box [0,1]^n intersected with a
population-weighted budget half-space.

The QP is solved by accelerated projected gradient with a fixed 1/L step and
an exact projection onto the box-budget set (safeguarded Newton on the scalar
budget multiplier). Everything is vectorized over columns so thousands of
rollout-year allocations solve in one call. The degenerate linear case
(alpha0 = 0) reduces to a fractional-knapsack greedy fill, solved exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DataError, NumericalError
from .graph import ZoneGraph

__all__ = [
    "RiskFactors",
    "PolicyParams",
    "Allocation",
    "SolverReport",
    "UTILITY_KINDS",
    "priority_scores",
    "local_utility",
    "global_utility",
    "allocate",
    "allocate_batch",
    "baseline_highest_rate",
    "baseline_even",
]

UTILITY_KINDS = ("linear", "quadratic")


@dataclass(frozen=True)
class RiskFactors:
    """Per-zone risk factor matrix (n, q) for one decision epoch."""

    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] < 1:
            raise DataError("risk factors must form an (n, q) matrix with q >= 1")
        if not np.all(np.isfinite(v)):
            raise DataError("risk factors must be finite")
        if len(self.names) != v.shape[1]:
            raise DataError("factor names must match the number of columns")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_factors(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PolicyParams:
    """Priority-score weights, spatial penalty weight, and utility kind."""

    alpha0: float
    alpha: np.ndarray
    utility_kind: str

    def __post_init__(self) -> None:
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be nonnegative")
        if self.utility_kind not in UTILITY_KINDS:
            raise ValueError(
                f"utility_kind must be one of {UTILITY_KINDS}, got {self.utility_kind!r}"
            )
        a = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)

    @property
    def n_factors(self) -> int:
        return self.alpha.shape[0]


@dataclass(frozen=True)
class SolverReport:
    iterations: int
    kkt_residual: float
    objective: float
    converged: bool


@dataclass(frozen=True)
class Allocation:
    """Per-zone coverage vector in [0, 1] (budget feasibility set by producer)."""

    a: np.ndarray
    solver: SolverReport | None = None

    def __post_init__(self) -> None:
        a = np.asarray(self.a, dtype=float)
        if a.ndim != 1:
            raise DataError("allocation must be a vector")
        if a.size and (a.min() < 0.0 or a.max() > 1.0):
            raise DataError("allocation entries must lie in [0, 1]")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)


def priority_scores(
    factors: RiskFactors | np.ndarray, alpha: np.ndarray
) -> np.ndarray:
    """Logistic transform of the weighted factor sum, elementwise per zone."""
    values = factors.values if isinstance(factors, RiskFactors) else np.asarray(factors)
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if values.ndim != 2 or values.shape[1] != alpha.shape[0]:
        raise DataError(
            f"factor matrix has {values.shape[1] if values.ndim == 2 else '?'} columns "
            f"but alpha has {alpha.shape[0]} entries"
        )
    return np.clip(expit(values @ alpha), 1e-12, 1.0 - 1e-12)


def local_utility(a, p, kind: str):
    """Benefit a single zone with priority p draws from coverage a."""
    a_arr = np.asarray(a, dtype=float)
    if np.any(a_arr < -1e-12) or np.any(a_arr > 1.0 + 1e-12):
        raise ValueError("coverage must lie in [0, 1]")
    if kind == "linear":
        out = a_arr * p
    elif kind == "quadratic":
        out = np.asarray(p) * a_arr * (2.0 - a_arr)
    else:
        raise ValueError(f"unknown utility kind {kind!r}")
    return float(out) if out.ndim == 0 else out


def global_utility(
    a: Allocation | np.ndarray,
    scores: np.ndarray,
    alpha0: float,
    graph: ZoneGraph,
    kind: str,
) -> float:
    """Total local utility minus alpha0 times the neighbor-difference penalty.

    Each undirected neighbor pair is counted once.
    """
    if alpha0 < 0:
        raise ValueError("alpha0 must be nonnegative")
    av = a.a if isinstance(a, Allocation) else np.asarray(a, dtype=float)
    if av.shape[0] != graph.n_zones or np.asarray(scores).shape[0] != graph.n_zones:
        raise DataError("allocation/scores length must match the graph")
    e = graph.edges
    penalty = float(np.sum((av[e[:, 0]] - av[e[:, 1]]) ** 2))
    return float(np.sum(local_utility(av, scores, kind))) - alpha0 * penalty


# ---------------------------------------------------------------------------
# box-budget projection and the accelerated projected-gradient QP
# ---------------------------------------------------------------------------


def _project_box_budget(x, w, budget_total, hi, lam=None):
    """Project columns of x onto {0 <= a <= hi, w @ a <= budget_total}.

    Returns (a, lam) where lam holds per-column budget multipliers, reusable
    as a warm start. g(lam) = w @ clip(x - lam*w, 0, hi) is nonincreasing and
    piecewise linear; a safeguarded Newton finds its root per column.
    """
    a = np.clip(x, 0.0, hi)
    load = w @ a
    tol = 1e-13 * max(1.0, budget_total)
    need = load > budget_total + tol
    if not np.any(need):
        return a, np.zeros(x.shape[1])

    wc = w[:, None]
    lo = np.zeros(x.shape[1])
    up = np.max(np.maximum(x, 0.0) / wc, axis=0) + 1.0
    if lam is None:
        lam = 0.5 * up
    else:
        lam = np.clip(lam, lo, up)
        lam = np.where(lam <= 0, 0.5 * up, lam)
    for _ in range(80):
        y = x - lam * wc
        cand = np.clip(y, 0.0, hi)
        g = w @ cand - budget_total
        active = np.abs(g) > tol
        if not np.any(active & need):
            break
        pos = g > 0
        lo = np.where(pos, np.maximum(lo, lam), lo)
        up = np.where(~pos, np.minimum(up, lam), up)
        inside = (y > 0.0) & (y < hi)
        denom = (w * w) @ inside
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = lam + g / denom
        mid = 0.5 * (lo + up)
        ok = (denom > 0) & (newton > lo) & (newton < up) & np.isfinite(newton)
        lam = np.where(active, np.where(ok, newton, mid), lam)
    else:
        # fall back to the feasible end of the bracket
        lam = np.where(np.abs(g) > tol, up, lam)
        cand = np.clip(x - lam * wc, 0.0, hi)
    lam = np.where(need, lam, 0.0)
    a = np.where(need, cand, a)
    return a, lam


def _qp_objective(a, hd, alpha0, graph, q):
    """f(a) = q'a - a'(diag(hd) + alpha0*(M - G))a, per column."""
    ha = hd * a + alpha0 * (graph.degrees[:, None] * a - graph.adjacency @ a)
    return np.sum(q * a, axis=0) - np.sum(a * ha, axis=0)


def _qp_solve(
    hd,
    alpha0: float,
    graph: ZoneGraph,
    q,
    w,
    budget_total: float,
    hi,
    x0=None,
    lam0=None,
    tol: float = 1e-10,
    max_iter: int = 100_000,
):
    """Maximize q'a - a' H a over the box-budget set, columnwise.

    H = diag(hd) + alpha0 * (M - G) is PSD (hd >= 0, alpha0 >= 0), so this is
    a concave QP. Accelerated projected gradient with per-column adaptive
    restart; fixed step 1/L from the spectral bound of 2H.
    """
    n = graph.n_zones
    q = np.asarray(q, dtype=float)
    hd = np.broadcast_to(np.asarray(hd, dtype=float), q.shape)
    m = graph.degrees.astype(float)
    G = graph.adjacency
    lam_max_pen = float(np.max(m[graph.edges].sum(axis=1))) if alpha0 > 0 else 0.0
    lip = 2.0 * (float(hd.max()) + alpha0 * lam_max_pen)
    step = 1.0 / max(lip, 1e-12)

    def grad(z):
        return 2.0 * (hd * z + alpha0 * (m[:, None] * z - G @ z)) - q

    x, lam = _project_box_budget(
        x0 if x0 is not None else np.zeros_like(q), w, budget_total, hi, lam0
    )
    y = x
    t = np.ones(q.shape[1])
    it = 0
    for it in range(1, max_iter + 1):
        x_new, lam = _project_box_budget(y - step * grad(y), w, budget_total, hi, lam)
        diff = np.abs(x_new - x).max()
        # adaptive restart: drop momentum on columns moving uphill
        bad = np.sum((y - x_new) * (x_new - x), axis=0) > 0
        t = np.where(bad, 1.0, t)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        if diff < tol:
            break
    proj_x, _ = _project_box_budget(x - step * grad(x), w, budget_total, hi, lam)
    kkt = float(np.abs(x - proj_x).max())
    return x, lam, it, kkt


def _greedy_fill(p, w, budget_total, hi):
    """Exact LP solution for the linear utility with no spatial penalty.

    Fills zones in decreasing score-per-capita order (stable, so ties go to
    the lower zone index), with a fractional fill at the budget boundary.
    """
    n, R = p.shape
    density = p / w[:, None]
    density = np.where(hi > 0, density, -np.inf)  # pinned zones last
    order = np.argsort(-density, axis=0, kind="stable")
    hi_ord = np.take_along_axis(np.broadcast_to(hi, p.shape), order, 0)
    w_ord = np.take_along_axis(np.broadcast_to(w[:, None], p.shape), order, 0)
    caps = hi_ord * w_ord
    cum = np.cumsum(caps, axis=0)
    a_ord = np.where(cum <= budget_total * (1 + 1e-15), hi_ord, 0.0)
    over = cum > budget_total * (1 + 1e-15)
    if np.any(over):
        j = np.argmax(over, axis=0)
        cols = np.arange(R)
        prev = np.where(j > 0, cum[np.maximum(j - 1, 0), cols], 0.0)
        rem = np.maximum(budget_total - prev, 0.0)
        frac = np.minimum(rem / w_ord[j, cols], hi_ord[j, cols])
        has = over.any(axis=0)
        a_ord[j[has], cols[has]] = frac[has]
    a = np.empty_like(a_ord)
    np.put_along_axis(a, order, a_ord, 0)
    return a


def allocate_batch(
    scores: np.ndarray,
    params: PolicyParams,
    graph: ZoneGraph,
    budget: float,
    hi: np.ndarray | None = None,
    warm: tuple | None = None,
    tol: float = 1e-8,
    max_iter: int = 20_000,
):
    """Solve the allocation problem for many score columns at once.

    scores is (n, R); returns (allocations (n, R), warm_state). Used by the
    rollout engine, where consecutive years warm-start each other.
    """
    scores = np.asarray(scores, dtype=float)
    n, R = scores.shape
    w = graph.populations
    budget_total = budget * float(w.sum())
    if hi is None:
        hi = np.ones((n, 1))
    if budget <= 0.0:
        return np.zeros((n, R)), None
    if params.utility_kind == "linear" and params.alpha0 == 0.0:
        return _greedy_fill(scores, w, budget_total, hi), None
    if params.utility_kind == "linear":
        hd, q = np.zeros_like(scores), scores
    else:
        hd, q = scores, 2.0 * scores
    x0, lam0 = warm if warm is not None else (None, None)
    a, lam, _, _ = _qp_solve(
        hd, params.alpha0, graph, q, w, budget_total, hi,
        x0=x0, lam0=lam0, tol=tol, max_iter=max_iter,
    )
    return np.clip(a, 0.0, np.broadcast_to(hi, a.shape)), (a, lam)


def allocate(
    scores: np.ndarray,
    params: PolicyParams,
    graph: ZoneGraph,
    budget: float,
    zero_floor: float | None = None,
    prevalence: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> Allocation:
    """Budget-constrained maximizer of the global utility for one epoch.

    zero_floor pins coverage to exactly zero in zones whose current prevalence
    (which must then be supplied) falls below the threshold.
    """
    scores = np.asarray(scores, dtype=float)
    n = graph.n_zones
    if scores.shape != (n,):
        raise DataError("scores length must match the graph")
    if np.any(scores <= 0.0) or np.any(scores > 1.0):
        raise ValueError("scores must lie in (0, 1)")
    if not 0.0 <= budget <= 1.0:
        raise ValueError("budget must lie in [0, 1]")
    hi = np.ones(n)
    if zero_floor is not None:
        if prevalence is None:
            raise DataError("zero_floor requires the current prevalence vector")
        hi[np.asarray(prevalence, dtype=float) < zero_floor] = 0.0
    w = graph.populations
    budget_total = budget * float(w.sum())

    if budget == 0.0:
        a = np.zeros(n)
        report = SolverReport(0, 0.0, 0.0, True)
    elif params.utility_kind == "linear" and params.alpha0 == 0.0:
        a = _greedy_fill(scores[:, None], w, budget_total, hi[:, None])[:, 0]
        report = SolverReport(
            0, 0.0, global_utility(a, scores, 0.0, graph, "linear"), True
        )
    else:
        col = scores[:, None]
        if params.utility_kind == "linear":
            hd, q = np.zeros_like(col), col
        else:
            hd, q = col, 2.0 * col
        sol, _, iters, kkt = _qp_solve(
            hd, params.alpha0, graph, q, w, budget_total, hi[:, None],
            tol=tol, max_iter=max_iter,
        )
        a = np.clip(sol[:, 0], 0.0, hi)
        obj = global_utility(a, scores, params.alpha0, graph, params.utility_kind)
        converged = iters < max_iter
        scale = max(1.0, float(np.abs(q).max()))
        if not converged and kkt > 1e-6 * scale:
            raise NumericalError(
                f"allocation QP did not converge: {iters} iterations, "
                f"KKT residual {kkt:.3e}, budget load "
                f"{float(w @ a) / budget_total:.6f}"
            )
        report = SolverReport(iters, kkt, obj, converged)

    load = float(w @ a) / float(w.sum())
    if load > budget + 1e-9:
        raise NumericalError(f"budget violated: load {load} > {budget}")
    return Allocation(a=a, solver=report)


def baseline_highest_rate(
    current_rates: np.ndarray, graph: ZoneGraph, budget: float
) -> Allocation:
    """Full coverage to the floor(n*C) zones with the highest current rates.

    Ties at the boundary go to the lower zone index.
    """
    if not 0.0 <= budget <= 1.0:
        raise ValueError("budget must lie in [0, 1]")
    rates = np.asarray(current_rates, dtype=float)
    n = graph.n_zones
    if rates.shape != (n,):
        raise DataError("rates length must match the graph")
    k = int(np.floor(n * budget))
    a = np.zeros(n)
    if k > 0:
        order = np.argsort(-rates, kind="stable")
        a[order[:k]] = 1.0
    return Allocation(a=a)


def baseline_even(graph: ZoneGraph, budget: float) -> Allocation:
    """The same coverage C in every zone."""
    if not 0.0 <= budget <= 1.0:
        raise ValueError("budget must lie in [0, 1]")
    return Allocation(a=np.full(graph.n_zones, float(budget)))

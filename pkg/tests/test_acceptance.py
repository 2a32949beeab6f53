"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The two simulation studies and the parameter-recovery experiment run the real
pipeline at desk scale and dominate the runtime (roughly an hour on two
cores). Run the cheap criteria alone with:

    pytest tests/test_acceptance.py -k "not study and not recovery"
"""

import functools
import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from bednetopt.cli import main
from bednetopt.dynamics import DynamicsParams, PanelData, get_scenario, simulate_panel
from bednetopt.gibbs import PosteriorDraws, PriorSpec, gibbs_fit, posterior_summary
from bednetopt.graph import ZoneGraph, build_car_precision, build_grid_graph
from bednetopt.policy import (
    PolicyParams,
    allocate,
    global_utility,
    local_utility,
)
from bednetopt.rollout import LossEstimate, RolloutConfig, estimate_loss, improvement
from bednetopt.search import (
    SearchSpace,
    expected_improvement,
    fit_surrogate,
    minimize_objective,
)
from bednetopt.study import StudySettings, run_study, study_tables

JOBS = 2


def _report(number: int, name: str):
    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"ACCEPTANCE {number:2d} [{name}]: FAIL")
                raise
            print(f"ACCEPTANCE {number:2d} [{name}]: PASS")

        return inner

    return wrap


# ---------------------------------------------------------------------------
# criterion 9: improvement arithmetic
# ---------------------------------------------------------------------------


@_report(9, "improvement arithmetic")
def test_criterion_9_improvement_arithmetic():
    hr = LossEstimate(0.140, 0.0005, 1000)
    ev = LossEstimate(0.149, 0.0005, 1000)
    assert improvement(hr, LossEstimate(0.135, 0.0005, 1000)) == pytest.approx(
        0.036, abs=5e-4
    )
    assert improvement(ev, LossEstimate(0.136, 0.0005, 1000)) == pytest.approx(
        0.087, abs=5e-4
    )


# ---------------------------------------------------------------------------
# criterion 8: deterministic rollout checks
# ---------------------------------------------------------------------------


def _deterministic_loss(budget: float) -> float:
    graph = build_grid_graph(1, 2)
    params = DynamicsParams(
        c0=0.2, b0=-0.7, c1=-0.1, b1=-0.1, c2=0.1, b2=-0.1,
        beta1=np.array([0.12]), beta2=np.array([-0.1]),
        sigma_e2=0.0, sigma_s2=0.0, rho=0.9,
    )
    draws = PosteriorDraws(
        draws=[(params, np.zeros((2, 2)))], burn_in=0, acceptance_rate_rho=0.5
    )
    data = PanelData(
        graph=graph, covariates=np.zeros((2, 1)),
        logit_prevalence=np.zeros((2, 2)), allocations=np.zeros((2, 1)),
    )
    cfg = RolloutConfig(horizon=1, n_rollouts=1, budget=budget,
                        risk_factors=("logit_rate",), seed=0)
    policy = PolicyParams(alpha0=0.0, alpha=np.ones(1), utility_kind="linear")
    return estimate_loss(policy, draws, data, cfg).mean


@_report(8, "deterministic rollout checks")
def test_criterion_8_deterministic_rollouts():
    assert _deterministic_loss(1.0) == pytest.approx(0.37754, abs=1e-5)
    assert _deterministic_loss(0.0) == pytest.approx(0.54983, abs=1e-5)


# ---------------------------------------------------------------------------
# criterion 5: utility axioms
# ---------------------------------------------------------------------------


@_report(5, "utility axioms")
def test_criterion_5_utility_axioms():
    rng = np.random.default_rng(55)
    n = 10_000
    a = rng.uniform(0.0, 1.0, n)
    p = rng.uniform(1e-6, 1.0 - 1e-6, n)
    h = 1e-4
    for kind in ("linear", "quadratic"):
        # axiom 1: no resources, no utility
        assert np.all(local_utility(np.zeros(n), p, kind) == 0.0)
        # axiom 2: increasing in a on [0, 1)
        a_lo = np.minimum(a, 1.0 - h)
        assert np.all(
            local_utility(a_lo + h, p, kind) > local_utility(a_lo, p, kind)
        )
        # axiom 3: increasing in p
        p_hi = np.minimum(p + rng.uniform(0.01, 0.2, n), 1.0 - 1e-9)
        gap = local_utility(a, p_hi, kind) - local_utility(a, p, kind)
        assert np.all(gap >= 0.0) and np.all(gap[a > 0] > 0.0)
    # axiom 4 (quadratic): non-increasing marginal utility
    a4 = np.minimum(a, 1.0 - 2 * h)
    second = (
        local_utility(a4 + 2 * h, p, "quadratic")
        - 2 * local_utility(a4 + h, p, "quadratic")
        + local_utility(a4, p, "quadratic")
    )
    assert np.all(second <= 1e-12)


# ---------------------------------------------------------------------------
# criterion 6: GMRF correctness
# ---------------------------------------------------------------------------


@_report(6, "GMRF correctness")
def test_criterion_6_gmrf():
    for rho in (0.1, 0.5, 0.9, 0.999):
        for graph in (build_grid_graph(10, 10), build_grid_graph(1, 2)):
            build_car_precision(graph, rho=rho, sigma_s2=0.25)  # Cholesky ok
    graph = build_grid_graph(8, 8)
    n = graph.n_zones
    prec = build_car_precision(graph, rho=0.9, sigma_s2=0.01)
    rng = np.random.default_rng(66)
    reps = 4000
    z = prec.sample(rng, size=reps)
    quad = np.einsum("ir,ir->r", z, prec.matrix @ z)
    se = np.sqrt(2.0 * n / reps)
    assert abs(quad.mean() - n) < 3 * se


# ---------------------------------------------------------------------------
# criterion 4: allocation-solver oracle equivalence
# ---------------------------------------------------------------------------


def _brute_force(scores, alpha0, graph, kind, budget, step=0.05):
    levels = np.round(np.arange(0.0, 1.0 + step / 2, step), 10)
    w = graph.populations
    cap = budget * w.sum()
    best = -np.inf
    for combo in itertools.product(levels, repeat=graph.n_zones):
        a = np.array(combo)
        if w @ a <= cap + 1e-9:
            best = max(best, global_utility(a, scores, alpha0, graph, kind))
    return best


def _water_filling(p, w, cap):
    if w @ np.ones_like(p) <= cap:
        return np.ones_like(p)
    lo, hi = 0.0, 2.0 * p.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if w @ np.clip(1.0 - mid / (2.0 * p), 0.0, 1.0) > cap:
            lo = mid
        else:
            hi = mid
    return np.clip(1.0 - hi / (2.0 * p), 0.0, 1.0)


@_report(4, "allocation-solver oracle equivalence")
def test_criterion_4_allocator_oracles():
    rng = np.random.default_rng(44)
    graphs = {2: build_grid_graph(1, 2), 3: build_grid_graph(1, 3)}
    for kind in ("linear", "quadratic"):
        for _ in range(50):
            n = int(rng.integers(2, 4))
            g = graphs[n]
            if rng.random() < 0.5:
                g = ZoneGraph(g.zone_ids, rng.uniform(0.5, 2.0, n),
                              g.neighbor_lists)
            scores = rng.uniform(0.05, 0.95, n)
            alpha0 = float(rng.uniform(0.0, 1.0))
            budget = float(rng.uniform(0.15, 0.9))
            params = PolicyParams(alpha0=alpha0, alpha=np.ones(1),
                                  utility_kind=kind)
            out = allocate(scores, params, g, budget=budget)
            obj = global_utility(out.a, scores, alpha0, g, kind)
            assert obj >= _brute_force(scores, alpha0, g, kind, budget) - 1e-6
    # quadratic / alpha0 = 0: KKT water-filling closed form to 1e-8
    g = build_grid_graph(2, 3)
    params = PolicyParams(alpha0=0.0, alpha=np.ones(1), utility_kind="quadratic")
    for _ in range(25):
        scores = rng.uniform(0.05, 0.95, 6)
        budget = float(rng.uniform(0.2, 0.9))
        out = allocate(scores, params, g, budget=budget)
        ref = _water_filling(scores, g.populations, budget * g.populations.sum())
        np.testing.assert_allclose(out.a, ref, atol=1e-8)


# ---------------------------------------------------------------------------
# criterion 7: Bayesian-optimization sanity
# ---------------------------------------------------------------------------


@_report(7, "Bayesian-optimization sanity")
def test_criterion_7_bo_sanity():
    center = np.array([0.6, 2.0, -3.0, 1.5])

    def bowl(x, index):
        return float(np.mean((x - center) ** 2)), 0.0

    space = SearchSpace(q=3, n_initial=40, n_sequential=30)
    wins = 0
    for seed in range(10):
        x_best, trace = minimize_objective(bowl, space, seed=seed)
        assert sum(not t.is_initial for t in trace) <= 30
        if float(np.mean((x_best - center) ** 2)) < 0.05:
            wins += 1
    assert wins >= 9, f"bowl minimum found in only {wins}/10 seeds"

    rng = np.random.default_rng(77)
    x = rng.uniform(-2, 2, (30, 3))
    y = (x**2).sum(axis=1) + 0.05 * rng.standard_normal(30)
    surrogate = fit_surrogate(x, y, seed=0)
    probes = rng.uniform(-3, 3, (10_000, 3))
    ei = expected_improvement(surrogate, probes, float(y.min()))
    assert np.all(ei >= 0.0)


# ---------------------------------------------------------------------------
# criterion 10: CLI determinism
# ---------------------------------------------------------------------------


def _tree_bytes(root: Path) -> dict:
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@_report(10, "CLI determinism")
def test_criterion_10_cli_determinism(tmp_path):
    cfg_doc = {
        "seed": 31,
        "study": {"rows": 4, "cols": 4, "replicates": 2, "n_iter": 60,
                  "burn_in": 20, "n_initial": 6, "n_sequential": 2,
                  "eval_rollouts": 16, "budgets": [0.5]},
        "model": {"n_iter": 60, "burn_in": 20},
        "search": {"n_initial": 6, "n_sequential": 2},
        "rollout": {"horizon": 2, "n_rollouts": 8, "n_policy_draws": 10},
    }
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(cfg_doc))

    outputs = []
    for run in ("r1", "r2"):
        base = tmp_path / run
        data = base / "data"
        assert main(["simulate", "--config", str(cfg), "--out", str(data)]) == 0
        doc = dict(cfg_doc)
        doc["data"] = {
            "zones": str(data / "zones.csv"),
            "adjacency": str(data / "adjacency.csv"),
            "observations": str(data / "observations.csv"),
        }
        full = base / "full.json"
        full.write_text(json.dumps(doc))
        assert main(["fit", "--config", str(full), "--out", str(base / "fit")]) == 0
        assert main([
            "optimize", "--config", str(full), "--posterior", str(base / "fit"),
            "--out", str(base / "opt"),
        ]) == 0
        assert main([
            "recommend", "--config", str(full), "--policy",
            str(base / "opt" / "policy.json"), "--out", str(base / "rec"),
        ]) == 0
        assert main([
            "recommend", "--config", str(full), "--policy", "highest_rate",
            "--out", str(base / "rec_hr"),
        ]) == 0
        assert main([
            "study", "--config", str(cfg), "--out", str(base / "study"),
            "--jobs", str(JOBS),
        ]) == 0
        trees = {}
        for sub in ("data", "fit", "opt", "rec", "rec_hr", "study"):
            trees[sub] = _tree_bytes(base / sub)
        outputs.append(trees)
    assert outputs[0].keys() == outputs[1].keys()
    for sub in outputs[0]:
        assert outputs[0][sub] == outputs[1][sub], f"{sub} outputs differ"


# ---------------------------------------------------------------------------
# criterion 3: parameter recovery
# ---------------------------------------------------------------------------

TRUE_VALUES = {
    "c0": 0.2, "b0": -0.7, "one_plus_c1": 0.9, "b1": -0.1, "c2": 0.1,
    "b2": -0.1, "beta1_1": 0.12, "beta2_1": -0.1, "rho": 0.9,
}


@_report(3, "parameter recovery")
def test_criterion_3_parameter_recovery():
    n_panels = 10
    covered = 0
    total = 0
    own_lag_close = 0
    for rep in range(n_panels):
        panel = simulate_panel(get_scenario("correct"), seed=3000 + rep)
        draws = gibbs_fit(panel, PriorSpec(), n_iter=5000, burn_in=2000,
                          seed=rep)
        rows = {r.name: r for r in posterior_summary(draws)}
        for name, truth in TRUE_VALUES.items():
            total += 1
            if rows[name].lower <= truth <= rows[name].upper:
                covered += 1
        if abs(rows["one_plus_c1"].mean - 0.9) <= 0.05:
            own_lag_close += 1
    coverage = covered / total
    print(f"  coverage {covered}/{total} = {coverage:.2%}; "
          f"own-lag within 0.05 in {own_lag_close}/{n_panels}")
    assert coverage >= 0.80
    assert own_lag_close >= 0.9 * n_panels


# ---------------------------------------------------------------------------
# criteria 1 and 2: the simulation studies
# ---------------------------------------------------------------------------


def _medians(imp_rows):
    out = {}
    for pol in ("linear", "quadratic"):
        for base in ("highest_rate", "even"):
            vals = [r[4] for r in imp_rows if r[1] == pol and r[2] == base]
            out[(pol, base)] = float(np.median(vals))
    return out


@_report(1, "simulation-study replication (correct spec)")
def test_criterion_1_study_correct_spec():
    t0 = time.perf_counter()
    settings = StudySettings(scenario="correct", replicates=20)
    results = run_study(settings, master_seed=61, jobs=JOBS)
    elapsed = time.perf_counter() - t0
    _, imp_rows = study_tables(results)
    med = _medians(imp_rows)
    print(f"  medians: {med}; wall {elapsed:.0f}s")
    assert med[("linear", "even")] > 0.0
    assert med[("quadratic", "even")] > 0.0
    assert med[("linear", "highest_rate")] >= -0.01
    assert med[("quadratic", "highest_rate")] >= -0.01
    assert elapsed < 7200.0


@_report(2, "misspecification robustness")
def test_criterion_2_study_misspec():
    settings = StudySettings(scenario="quadratic_misspec", replicates=20)
    results = run_study(settings, master_seed=62, jobs=JOBS)
    loss_rows, imp_rows = study_tables(results)
    med = _medians(imp_rows)
    quad_not_worse = sum(1 for r in loss_rows if r[3] <= r[2])
    print(f"  medians: {med}; quad<=linear in {quad_not_worse}/{len(loss_rows)}")
    assert med[("quadratic", "even")] > 0.0
    assert med[("quadratic", "even")] >= med[("linear", "even")]
    assert quad_not_worse >= 0.6 * len(loss_rows)

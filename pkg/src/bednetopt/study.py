"""Simulation-study runner: replicate panels, fitted policies, baselines.

For each replicate: draw a panel from the chosen generative scenario, fit the
Bayesian dynamics model, search for the optimal linear- and quadratic-utility
policies against the posterior, then score all four policies (the two fitted
ones plus Highest_rate and Even) by Monte Carlo rollouts under the *true*
generator. Evaluation shares one RNG stream per (replicate, budget) across
policies, so the improvement ratios are paired comparisons.

Replicates are independent given their spawned seeds and may run in worker
processes; outputs are written in replicate order so reruns are byte-identical
regardless of scheduling.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dynamics import ScenarioSpec, get_scenario, simulate_panel
from .gibbs import PriorSpec, gibbs_fit, thin_draws
from .rollout import (
    RolloutConfig,
    RolloutEngine,
    make_baseline_decider,
    make_policy_decider,
)
from .search import SearchSpace, optimize_policy

__all__ = ["StudySettings", "run_replicate", "run_study"]

POLICY_NAMES = ("linear", "quadratic", "highest_rate", "even")


@dataclass(frozen=True)
class StudySettings:
    """Knobs of the replicated simulation study.

    Desk-scale defaults finish in well under two hours on a small machine;
    the full-scale analysis uses replicates=100, n_iter=5000, burn_in=2000,
    n_initial=100, eval_rollouts=1000, budgets=(0.2, 0.5, 0.8).
    """

    scenario: str = "correct"
    replicates: int = 20
    rows: int = 10
    cols: int = 10
    n_iter: int = 2000
    burn_in: int = 500
    n_policy_draws: int = 200
    n_rollouts: int = 200
    horizon: int = 5
    n_initial: int = 40
    n_sequential: int = 20
    eval_rollouts: int = 400
    budgets: tuple[float, ...] = (0.5,)
    risk_factors: tuple[str, ...] = (
        "covariate:1",
        "logit_rate",
        "neighbor_logit_rate",
    )
    prior: PriorSpec = PriorSpec()

    def __post_init__(self) -> None:
        object.__setattr__(self, "budgets", tuple(self.budgets))
        object.__setattr__(self, "risk_factors", tuple(self.risk_factors))

    def scenario_spec(self) -> ScenarioSpec:
        return get_scenario(self.scenario, rows=self.rows, cols=self.cols)


def _evaluate_policy(
    name: str,
    policies: dict,
    scenario: ScenarioSpec,
    panel,
    eta_true: np.ndarray,
    cfg: RolloutConfig,
):
    """Loss under the true generative model (including any quadratic term)."""
    true_draws = [(scenario.params, eta_true)]
    engine = RolloutEngine(
        panel.graph, panel.covariates, true_draws, cfg, d0=scenario.d0
    )
    if name in ("linear", "quadratic"):
        decide = make_policy_decider(policies[name], cfg, panel.graph, panel.covariates)
    else:
        decide = make_baseline_decider(name, cfg, panel.graph)
    return engine.run(decide)


def run_replicate(settings: StudySettings, rep: int, master_seed: int) -> dict:
    """One full study replicate; returns all losses and improvement ratios."""
    seeds = np.random.SeedSequence((master_seed, rep)).generate_state(8)
    scenario = settings.scenario_spec()
    panel, eta_true = simulate_panel(
        scenario, seed=int(seeds[0]), return_latent=True
    )
    posterior = gibbs_fit(
        panel, settings.prior, settings.n_iter, settings.burn_in, int(seeds[1])
    )
    thinned = thin_draws(
        posterior, min(settings.n_policy_draws, posterior.n_kept), int(seeds[2])
    )
    space = SearchSpace(
        q=len(settings.risk_factors),
        n_initial=settings.n_initial,
        n_sequential=settings.n_sequential,
    )
    out = {"replicate": rep, "stanzas": []}
    for ci, budget in enumerate(settings.budgets):
        roll_cfg = RolloutConfig(
            horizon=settings.horizon,
            n_rollouts=settings.n_rollouts,
            budget=budget,
            risk_factors=settings.risk_factors,
            seed=0,
        )
        policies = {}
        for kind, s in (("linear", seeds[3]), ("quadratic", seeds[4])):
            policies[kind], _ = optimize_policy(
                thinned, panel, roll_cfg, space,
                int(np.random.SeedSequence((int(s), ci)).generate_state(1)[0]),
                utility_kind=kind,
            )
        eval_cfg = replace(
            roll_cfg,
            n_rollouts=settings.eval_rollouts,
            seed=int(np.random.SeedSequence((int(seeds[5]), ci)).generate_state(1)[0]),
        )
        losses = {
            name: _evaluate_policy(name, policies, scenario, panel, eta_true, eval_cfg)
            for name in POLICY_NAMES
        }
        stanza = {
            "budget": budget,
            "losses": {k: v.mean for k, v in losses.items()},
            "loss_se": {k: v.std_error for k, v in losses.items()},
            "policies": {
                k: {
                    "alpha0": policies[k].alpha0,
                    "alpha": [float(v) for v in policies[k].alpha],
                }
                for k in ("linear", "quadratic")
            },
            "improvements": {},
        }
        for pol in ("linear", "quadratic"):
            for base in ("highest_rate", "even"):
                stanza["improvements"][f"{pol}_vs_{base}"] = (
                    losses[base].mean - losses[pol].mean
                ) / losses[base].mean
        out["stanzas"].append(stanza)
    return out


def _worker(payload):
    settings, rep, master_seed = payload
    return run_replicate(settings, rep, master_seed)


def run_study(
    settings: StudySettings,
    master_seed: int,
    jobs: int = 1,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """All replicates, optionally in parallel; results in replicate order.

    When out_dir is given, each replicate's JSON is flushed as soon as it
    finishes, so partial results survive interrupted runs.
    """

    def flush(res: dict) -> None:
        if out_dir is not None:
            from .io import write_json

            write_json(
                Path(out_dir) / "replicates" / f"rep_{res['replicate']:03d}.json",
                res,
            )

    tasks = [(settings, rep, master_seed) for rep in range(settings.replicates)]
    results = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for res in pool.map(_worker, tasks):
                flush(res)
                results.append(res)
    else:
        for task in tasks:
            res = _worker(task)
            flush(res)
            results.append(res)
    return results


def study_tables(results: list[dict]) -> tuple[list[list], list[list]]:
    """Flatten study results into loss rows and long-format improvement rows."""
    loss_rows = []
    improvement_rows = []
    for res in results:
        for stanza in res["stanzas"]:
            loss_rows.append(
                [
                    res["replicate"],
                    stanza["budget"],
                    stanza["losses"]["linear"],
                    stanza["losses"]["quadratic"],
                    stanza["losses"]["highest_rate"],
                    stanza["losses"]["even"],
                ]
            )
            for pol in ("linear", "quadratic"):
                for base in ("highest_rate", "even"):
                    improvement_rows.append(
                        [
                            res["replicate"],
                            pol,
                            base,
                            stanza["budget"],
                            stanza["improvements"][f"{pol}_vs_{base}"],
                        ]
                    )
    return loss_rows, improvement_rows

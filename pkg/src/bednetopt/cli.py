"""Batch command-line front-end.

Subcommands: simulate, fit, optimize, recommend, study. A single JSON config
document drives the pipeline; command-line flags override file values. Exit
codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import sys
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import io
from .dynamics import get_scenario, simulate_panel
from .errors import ConfigError, DataError, NumericalError
from .gibbs import PriorSpec, gibbs_fit, posterior_summary, thin_draws
from .policy import (
    allocate,
    baseline_even,
    baseline_highest_rate,
    global_utility,
    priority_scores,
)
from .rollout import BASELINES, RolloutConfig, build_risk_factors
from .search import SearchSpace, optimize_policy, posterior_of_alpha
from .study import StudySettings, run_study, study_tables

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {"zones": None, "adjacency": None, "observations": None},
    "model": {
        "coef_variance": 100.0,
        "var_shape": 0.1,
        "var_rate": 0.1,
        "eta0_variance": 100.0,
        "n_iter": 5000,
        "burn_in": 2000,
    },
    "policy": {
        "utility_kind": "linear",
        "factors": ["covariate:1", "logit_rate", "neighbor_logit_rate"],
        "budget": 0.5,
        "zero_floor": None,
    },
    "search": {"n_initial": 100, "n_sequential": 50},
    "rollout": {"horizon": 5, "n_rollouts": 200, "n_policy_draws": 200},
    "study": {
        "scenario": "correct",
        "replicates": 20,
        "rows": 10,
        "cols": 10,
        "n_iter": 2000,
        "burn_in": 500,
        "n_initial": 40,
        "n_sequential": 20,
        "eval_rollouts": 400,
        "budgets": [0.5],
    },
}


def _merge_config(user: dict) -> dict:
    """Overlay a user config on the defaults, rejecting unknown keys."""
    merged = copy.deepcopy(DEFAULT_CONFIG)

    def merge(dst, src, path):
        for key, val in src.items():
            if key not in dst:
                raise ConfigError(f"unknown config key {'.'.join(path + [key])!r}")
            if isinstance(dst[key], dict):
                if not isinstance(val, dict):
                    raise ConfigError(
                        f"config section {'.'.join(path + [key])!r} must be an object"
                    )
                merge(dst[key], val, path + [key])
            else:
                dst[key] = val

    if not isinstance(user, dict):
        raise ConfigError("config document must be a JSON object")
    merge(merged, user, [])
    return merged


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        doc = io.read_json(path)
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    return _merge_config(doc)


def _require_data_paths(cfg: dict) -> tuple[str, str, str]:
    data = cfg["data"]
    missing = [k for k in ("zones", "adjacency", "observations") if not data[k]]
    if missing:
        raise ConfigError(
            f"config data section is missing file paths: {', '.join(missing)}"
        )
    return data["zones"], data["adjacency"], data["observations"]


def _prior_from(cfg: dict) -> PriorSpec:
    m = cfg["model"]
    try:
        return PriorSpec(
            coef_variance=float(m["coef_variance"]),
            var_shape=float(m["var_shape"]),
            var_rate=float(m["var_rate"]),
            eta0_variance=float(m["eta0_variance"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model section: {exc}") from None


def _rollout_cfg(cfg: dict, seed: int = 0) -> RolloutConfig:
    try:
        return RolloutConfig(
            horizon=int(cfg["rollout"]["horizon"]),
            n_rollouts=int(cfg["rollout"]["n_rollouts"]),
            budget=float(cfg["policy"]["budget"]),
            risk_factors=tuple(cfg["policy"]["factors"]),
            seed=seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad rollout/policy section: {exc}") from None


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    study = cfg["study"]
    scenario_name = args.scenario or study["scenario"]
    scenario = get_scenario(
        scenario_name, rows=int(study["rows"]), cols=int(study["cols"])
    )
    out = Path(args.out)
    reps = args.replicates
    for rep in range(reps):
        rep_seed = int(np.random.SeedSequence((seed, rep)).generate_state(1)[0])
        panel = simulate_panel(scenario, seed=rep_seed)
        target = out if reps == 1 else out / f"rep_{rep:03d}"
        io.save_panel(target, panel)
    print(f"wrote {reps} panel(s) under {out}")
    return 0


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    zones, adjacency, observations = _require_data_paths(cfg)
    panel = io.load_panel(zones, adjacency, observations)
    prior = _prior_from(cfg)
    n_iter = int(cfg["model"]["n_iter"])
    burn_in = int(cfg["model"]["burn_in"])
    draws = gibbs_fit(panel, prior, n_iter, burn_in, seed)
    out = Path(args.out)
    io.save_posterior(
        out, draws, panel.graph, seed, n_iter, full_latent=args.save_latent
    )
    io.save_summary(out / "summary.csv", posterior_summary(draws))
    print(
        f"kept {draws.n_kept} draws (burn-in {burn_in}), "
        f"rho acceptance {draws.acceptance_rate_rho:.3f}; wrote {out}"
    )
    return 0


def cmd_optimize(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    zones, adjacency, observations = _require_data_paths(cfg)
    panel = io.load_panel(zones, adjacency, observations)
    posterior = io.load_posterior(args.posterior, panel.graph)
    k = min(int(cfg["rollout"]["n_policy_draws"]), posterior.n_kept)
    thinned = thin_draws(posterior, k, seed=seed)
    roll = _rollout_cfg(cfg)
    try:
        space = SearchSpace(
            q=len(roll.risk_factors),
            n_initial=int(cfg["search"]["n_initial"]),
            n_sequential=int(cfg["search"]["n_sequential"]),
        )
    except ValueError as exc:
        raise ConfigError(f"bad search section: {exc}") from None
    kind = cfg["policy"]["utility_kind"]
    out = Path(args.out)
    if args.per_draw:
        per = thin_draws(posterior, min(args.per_draw, posterior.n_kept), seed=seed + 1)
        samples, quantiles = posterior_of_alpha(
            per, panel, roll, space, seed, utility_kind=kind
        )
        io.save_alpha_samples(out, samples, quantiles)
    policy, trace = optimize_policy(
        thinned, panel, roll, space, seed, utility_kind=kind
    )
    out.mkdir(parents=True, exist_ok=True)
    io.save_policy(out / "policy.json", policy, roll.budget)
    io.save_trace(out / "trace.csv", trace, q=space.q)
    best = min(t.loss for t in trace)
    print(f"best ridge loss {best:.6f} after {len(trace)} evaluations; wrote {out}")
    return 0


def cmd_recommend(args) -> int:
    cfg = load_config(args.config)
    zones, adjacency, observations = _require_data_paths(cfg)
    panel = io.load_panel(zones, adjacency, observations)
    graph = panel.graph
    year = args.year if args.year is not None else panel.n_transitions
    if not 0 <= year <= panel.n_transitions:
        raise ConfigError(
            f"--year must lie in [0, {panel.n_transitions}] for this panel"
        )
    eta = panel.logit_prevalence[:, year]
    eta_prev = panel.logit_prevalence[:, max(year - 1, 0)]
    prev = expit(eta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.policy in BASELINES:
        budget = float(cfg["policy"]["budget"])
        if args.policy == "highest_rate":
            allocation = baseline_highest_rate(prev, graph, budget)
        else:
            allocation = baseline_even(graph, budget)
        utility = None
        kind = None
    else:
        policy, budget = io.load_policy(args.policy)
        factors = build_risk_factors(
            tuple(cfg["policy"]["factors"]), panel.covariates, eta, eta_prev, graph
        )
        if policy.n_factors != factors.n_factors:
            raise ConfigError(
                f"policy has {policy.n_factors} weights but config lists "
                f"{factors.n_factors} factors"
            )
        scores = priority_scores(factors, policy.alpha)
        zero_floor = cfg["policy"]["zero_floor"]
        allocation = allocate(
            scores, policy, graph, budget,
            zero_floor=None if zero_floor is None else float(zero_floor),
            prevalence=prev,
        )
        kind = policy.utility_kind
        utility = global_utility(allocation, scores, policy.alpha0, graph, kind)

    io.save_allocation(out / "allocation.csv", graph, allocation)
    w = graph.populations
    load = float(w @ allocation.a) / float(w.sum())
    policy_name = args.policy if args.policy in BASELINES else Path(args.policy).name
    report = {
        "policy": policy_name,
        "utility_kind": kind,
        "budget": budget,
        "budget_load": load,
        "budget_binding": bool(load >= budget - 1e-6),
        "global_utility": utility,
        "zones_full": int(np.sum(allocation.a >= 1.0 - 1e-9)),
        "zones_zero": int(np.sum(allocation.a <= 1e-9)),
        "solver": None
        if allocation.solver is None
        else {
            "iterations": allocation.solver.iterations,
            "kkt_residual": allocation.solver.kkt_residual,
            "converged": allocation.solver.converged,
        },
    }
    io.write_json(out / "recommendation_report.json", report)
    print(f"allocation written to {out} (budget load {load:.4f} <= {budget})")
    return 0


def cmd_study(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    s = cfg["study"]
    try:
        settings = StudySettings(
            scenario=args.scenario or s["scenario"],
            replicates=args.replicates or int(s["replicates"]),
            rows=int(s["rows"]),
            cols=int(s["cols"]),
            n_iter=int(s["n_iter"]),
            burn_in=int(s["burn_in"]),
            n_policy_draws=int(cfg["rollout"]["n_policy_draws"]),
            n_rollouts=int(cfg["rollout"]["n_rollouts"]),
            horizon=int(cfg["rollout"]["horizon"]),
            n_initial=int(s["n_initial"]),
            n_sequential=int(s["n_sequential"]),
            eval_rollouts=int(s["eval_rollouts"]),
            budgets=tuple(float(c) for c in s["budgets"]),
            risk_factors=tuple(cfg["policy"]["factors"]),
            prior=_prior_from(cfg),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad study section: {exc}") from None
    out = Path(args.out)
    results = run_study(settings, seed, jobs=args.jobs, out_dir=out)
    loss_rows, improvement_rows = study_tables(results)
    io.write_csv(
        out / "losses.csv",
        ["replicate", "C", "loss_linear", "loss_quadratic",
         "loss_highest_rate", "loss_even"],
        loss_rows,
    )
    io.write_csv(
        out / "improvements.csv",
        ["replicate", "policy", "baseline", "C", "improvement"],
        improvement_rows,
    )
    med = {}
    for pol in ("linear", "quadratic"):
        for base in ("highest_rate", "even"):
            vals = [
                r[4] for r in improvement_rows if r[1] == pol and r[2] == base
            ]
            med[f"{pol}_vs_{base}"] = float(np.median(vals))
    print("median improvements: " + ", ".join(
        f"{k}={v:+.4f}" for k, v in sorted(med.items())
    ))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bednetopt",
        description="Spatiotemporal bed-net allocation: simulate, fit, "
        "optimize, recommend, study.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="write synthetic panels")
    common(p)
    p.add_argument("--scenario", default=None,
                   help="correct | quadratic_misspec")
    p.add_argument("--replicates", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the Gibbs sampler on a panel")
    common(p)
    p.add_argument("--save-latent", action="store_true",
                   help="also dump the full latent trajectories")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("optimize", help="search for the optimal policy")
    common(p)
    p.add_argument("--posterior", required=True,
                   help="directory written by the fit command")
    p.add_argument("--per-draw", type=int, default=0,
                   help="also optimize per posterior draw (this many draws)")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("recommend", help="emit next-year allocation")
    common(p)
    p.add_argument("--policy", required=True,
                   help="policy.json path, or highest_rate / even")
    p.add_argument("--year", type=int, default=None,
                   help="observed year index to act from (default: latest)")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("study", help="replicated simulation study")
    common(p)
    p.add_argument("--scenario", default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_study)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

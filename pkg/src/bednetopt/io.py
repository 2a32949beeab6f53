"""File formats: zones/adjacency/observations CSVs plus posterior, policy,
allocation, and search-trace artifacts.

All writers emit deterministic bytes for identical inputs: fixed column
orders, repr-based float formatting, no timestamps. Loaders are the inverse
of the writers; covariate columns are standardized (mean 0, sd 1) on load.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dynamics import DynamicsParams, PanelData, logit_rate
from .errors import DataError
from .gibbs import ParamSummary, PosteriorDraws
from .graph import ZoneGraph, load_graph
from .policy import Allocation, PolicyParams
from .search import TraceEntry

__all__ = [
    "write_csv",
    "read_csv",
    "write_json",
    "read_json",
    "save_zones",
    "save_adjacency",
    "save_observations",
    "save_panel",
    "load_panel",
    "load_zone_files",
    "save_posterior",
    "load_posterior",
    "save_summary",
    "save_policy",
    "load_policy",
    "save_allocation",
    "save_trace",
    "save_alpha_samples",
]


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: list[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
    except FileNotFoundError:
        raise DataError(f"missing input file: {path}") from None
    if header is None:
        raise DataError(f"empty file: {path}")
    return header, rows


def write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"missing input file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {path}: {exc}") from None


# ---------------------------------------------------------------------------
# zones / adjacency / observations
# ---------------------------------------------------------------------------


def save_zones(path, graph: ZoneGraph, covariates: np.ndarray) -> None:
    x = np.asarray(covariates, dtype=float)
    header = ["zone_id", "population"] + [f"x{k + 1}" for k in range(x.shape[1])]
    rows = [
        [zid, graph.populations[i]] + list(x[i])
        for i, zid in enumerate(graph.zone_ids)
    ]
    write_csv(path, header, rows)


def save_adjacency(path, graph: ZoneGraph) -> None:
    rows = [
        [graph.zone_ids[i], graph.zone_ids[j]] for i, j in graph.edges
    ]
    write_csv(path, ["zone_a", "zone_b"], rows)


def save_observations(path, panel: PanelData) -> None:
    """Long-format panel: prevalence in (0,1); year 0 has no coverage."""
    y = expit(panel.logit_prevalence)
    rows = []
    for i, zid in enumerate(panel.graph.zone_ids):
        for t in range(y.shape[1]):
            cov = "" if t == 0 else _fmt(panel.allocations[i, t - 1])
            rows.append([zid, t, _fmt(y[i, t]), cov])
    write_csv(path, ["zone_id", "year", "prevalence", "coverage"], rows)


def save_panel(out_dir, panel: PanelData) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {
        "zones": out / "zones.csv",
        "adjacency": out / "adjacency.csv",
        "observations": out / "observations.csv",
    }
    save_zones(paths["zones"], panel.graph, panel.covariates)
    save_adjacency(paths["adjacency"], panel.graph)
    save_observations(paths["observations"], panel)
    return paths


def load_zone_files(zones_path, adjacency_path) -> tuple[ZoneGraph, np.ndarray]:
    """Graph plus standardized covariate matrix from the two CSVs."""
    header, rows = read_csv(zones_path)
    if header[:2] != ["zone_id", "population"]:
        raise DataError(
            f"zones file must start with zone_id,population columns: {zones_path}"
        )
    cov_names = header[2:]
    try:
        zones = [(r[0], float(r[1])) for r in rows]
        x = np.array([[float(v) for v in r[2:]] for r in rows], dtype=float)
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed zones file {zones_path}: {exc}") from None
    x = x.reshape(len(rows), len(cov_names))

    eheader, erows = read_csv(adjacency_path)
    if eheader != ["zone_a", "zone_b"]:
        raise DataError(f"adjacency file needs zone_a,zone_b header: {adjacency_path}")
    edges = [(r[0], r[1]) for r in erows]
    graph = load_graph(zones, edges)
    if x.size:
        sd = x.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        x = (x - x.mean(axis=0)) / sd
    return graph, x


def load_panel(zones_path, adjacency_path, observations_path) -> PanelData:
    graph, x = load_zone_files(zones_path, adjacency_path)
    header, rows = read_csv(observations_path)
    if header != ["zone_id", "year", "prevalence", "coverage"]:
        raise DataError(
            f"observations file needs zone_id,year,prevalence,coverage header: "
            f"{observations_path}"
        )
    index = {z: i for i, z in enumerate(graph.zone_ids)}
    years = sorted({int(r[1]) for r in rows})
    if years != list(range(len(years))):
        raise DataError("observation years must be contiguous starting at 0")
    n, T = graph.n_zones, len(years) - 1
    y = np.full((n, T + 1), np.nan)
    a = np.full((n, T), np.nan)
    for r in rows:
        zid, t = r[0], int(r[1])
        if zid not in index:
            raise DataError(f"observations reference unknown zone {zid!r}")
        i = index[zid]
        y[i, t] = float(r[2])
        if t > 0:
            if r[3] == "":
                raise DataError(f"missing coverage for zone {zid!r} year {t}")
            a[i, t - 1] = float(r[3])
    if np.isnan(y).any() or np.isnan(a).any():
        raise DataError("observations do not cover every zone-year")
    return PanelData(
        graph=graph, covariates=x, logit_prevalence=logit_rate(y), allocations=a
    )


# ---------------------------------------------------------------------------
# posterior draws
# ---------------------------------------------------------------------------


def save_posterior(
    out_dir,
    draws: PosteriorDraws,
    graph: ZoneGraph,
    seed: int,
    n_iter: int,
    full_latent: bool = False,
) -> dict[str, Path]:
    """Params CSV, metadata JSON, and the latent slices rollouts start from."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mat, names = draws.param_matrix()
    write_csv(
        out / "posterior.csv",
        names,
        (list(row) for row in mat),
    )
    n_years = draws.draws[0][1].shape[1] - 1
    write_json(
        out / "posterior_meta.json",
        {
            "seed": seed,
            "n_iter": n_iter,
            "burn_in": draws.burn_in,
            "n_kept": draws.n_kept,
            "acceptance_rate_rho": draws.acceptance_rate_rho,
            "n_zones": graph.n_zones,
            "n_years": n_years,
        },
    )
    rows = []
    for d, (_, eta) in enumerate(draws.draws):
        for i, zid in enumerate(graph.zone_ids):
            rows.append([d, zid, eta[i, -2], eta[i, -1]])
    write_csv(
        out / "posterior_latent.csv",
        ["draw", "zone_id", "eta_prev", "eta_last"],
        rows,
    )
    paths = {
        "posterior": out / "posterior.csv",
        "meta": out / "posterior_meta.json",
        "latent": out / "posterior_latent.csv",
    }
    if full_latent:
        frows = []
        for d, (_, eta) in enumerate(draws.draws):
            for t in range(eta.shape[1]):
                for i, zid in enumerate(graph.zone_ids):
                    frows.append([d, t, zid, eta[i, t]])
        write_csv(
            out / "posterior_latent_full.csv",
            ["draw", "year", "zone_id", "eta"],
            frows,
        )
        paths["latent_full"] = out / "posterior_latent_full.csv"
    return paths


def load_posterior(in_dir, graph: ZoneGraph) -> PosteriorDraws:
    in_dir = Path(in_dir)
    meta = read_json(in_dir / "posterior_meta.json")
    header, rows = read_csv(in_dir / "posterior.csv")
    p = sum(1 for h in header if h.startswith("beta1_"))
    index = {z: i for i, z in enumerate(graph.zone_ids)}
    lheader, lrows = read_csv(in_dir / "posterior_latent.csv")
    if lheader != ["draw", "zone_id", "eta_prev", "eta_last"]:
        raise DataError("unexpected posterior_latent.csv header")
    n = graph.n_zones
    latents = np.zeros((len(rows), n, 2))
    for r in lrows:
        d, zid = int(r[0]), r[1]
        if zid not in index:
            raise DataError(f"latent file references unknown zone {zid!r}")
        latents[d, index[zid], 0] = float(r[2])
        latents[d, index[zid], 1] = float(r[3])
    col = {h: j for j, h in enumerate(header)}
    draws = []
    for d, r in enumerate(rows):
        vals = [float(v) for v in r]
        params = DynamicsParams(
            c0=vals[col["c0"]], b0=vals[col["b0"]], c1=vals[col["c1"]],
            b1=vals[col["b1"]], c2=vals[col["c2"]], b2=vals[col["b2"]],
            beta1=np.array([vals[col[f"beta1_{k + 1}"]] for k in range(p)]),
            beta2=np.array([vals[col[f"beta2_{k + 1}"]] for k in range(p)]),
            sigma_e2=vals[col["sigma_e2"]], sigma_s2=vals[col["sigma_s2"]],
            rho=vals[col["rho"]],
        )
        draws.append((params, latents[d]))
    return PosteriorDraws(
        draws=draws,
        burn_in=int(meta["burn_in"]),
        acceptance_rate_rho=float(meta["acceptance_rate_rho"]),
    )


def save_summary(path, rows: list[ParamSummary]) -> None:
    write_csv(
        path,
        ["parameter", "mean", "lower_2.5", "upper_97.5", "excludes_zero"],
        ([r.name, r.mean, r.lower, r.upper, int(r.excludes_zero)] for r in rows),
    )


# ---------------------------------------------------------------------------
# policies, allocations, traces
# ---------------------------------------------------------------------------


def save_policy(path, policy: PolicyParams, budget: float) -> None:
    write_json(
        path,
        {
            "alpha0": policy.alpha0,
            "alpha": [float(v) for v in policy.alpha],
            "utility_kind": policy.utility_kind,
            "budget": budget,
        },
    )


def load_policy(path) -> tuple[PolicyParams, float]:
    doc = read_json(path)
    try:
        policy = PolicyParams(
            alpha0=float(doc["alpha0"]),
            alpha=np.asarray(doc["alpha"], dtype=float),
            utility_kind=str(doc["utility_kind"]),
        )
        budget = float(doc["budget"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed policy file {path}: {exc}") from None
    return policy, budget


def save_allocation(path, graph: ZoneGraph, allocation: Allocation) -> None:
    write_csv(
        path,
        ["zone_id", "coverage"],
        ([zid, allocation.a[i]] for i, zid in enumerate(graph.zone_ids)),
    )


def save_trace(path, trace: list[TraceEntry], q: int) -> None:
    header = ["iter", "alpha0"] + [f"alpha{k + 1}" for k in range(q)] + [
        "loss", "loss_se", "is_initial",
    ]
    rows = (
        [t.index] + list(t.point) + [t.loss, t.loss_se, int(t.is_initial)]
        for t in trace
    )
    write_csv(path, header, rows)


def save_alpha_samples(out_dir, samples: np.ndarray, quantiles: np.ndarray) -> dict:
    out = Path(out_dir)
    q = samples.shape[1] - 1
    cols = ["alpha0"] + [f"alpha{k + 1}" for k in range(q)]
    write_csv(
        out / "alpha_opt.csv",
        ["draw"] + cols,
        ([i] + list(row) for i, row in enumerate(samples)),
    )
    write_csv(
        out / "alpha_opt_quantiles.csv",
        ["percentile"] + cols,
        ([p] + list(row) for p, row in zip((5, 25, 50, 75, 95), quantiles)),
    )
    return {
        "samples": out / "alpha_opt.csv",
        "quantiles": out / "alpha_opt_quantiles.csv",
    }

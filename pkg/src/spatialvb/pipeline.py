"""Experiment orchestration: data, fit, prediction, scoring and on-disk artifacts."""

from __future__ import annotations

import configparser
import csv
import logging
import math
import pickle
import time
import traceback
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from . import config as cfgmod
from .config import ExperimentConfig
from .fit_basis import auto_sigma2_bounds_basis, fit_hybrid_mfvb, fit_infvb_sigma
from .fit_full import auto_sigma2_bounds, fit_infvb_phi, fit_infvb_phi_sigma
from .mcmc import McmcResult, batch_means_se, mh_sample
from .metrics import ScoreReport, score_predictions
from .model import Dataset, Kind, PriorSpec, SyntheticSpec, load_csv, simulate_dataset
from .parallel import ordered_map, rng_stream
from .predict import mcmc_linear_predictor, predict_response, sample_linear_predictor
from .spatial import MaternParams, matern_eigenbasis
from .variational import ig_mixture_quantile

log = logging.getLogger(__name__)

FIT_STATE = "fit.pkl"


@dataclass
class ExperimentOutcome:
    status: str
    output: Path
    timings: dict = field(default_factory=dict)
    score: ScoreReport | None = None
    fit: object = None
    parameters: list = field(default_factory=list)
    error: str = ""


# ---------------------------------------------------------------- data and basis

def prepare_data(cfg: ExperimentConfig):
    """The dataset and, when simulated, the true linear predictor at every location."""
    if cfg.simulated:
        spec = SyntheticSpec(n=cfg.n, train_fraction=cfg.train_fraction, beta_true=cfg.beta,
                             matern=MaternParams(cfg.sigma2, cfg.phi, cfg.nu), kind=cfg.kind,
                             seed=cfg.seed, tau2=cfg.tau2)
        sim = simulate_dataset(spec)
        return sim.dataset, sim.eta
    return load_csv(cfg.csv, cfg.kind), None


def build_basis(cfg: ExperimentConfig, dataset: Dataset):
    """Matérn eigenbasis with the configured range and unit sill, restricted to training rows."""
    params = MaternParams(1.0, cfg.phi, cfg.nu)
    if cfg.basis_on_all_locations:
        return matern_eigenbasis(dataset.coords, params, cfg.m).restrict(dataset.train)
    return matern_eigenbasis(dataset.coords[dataset.train], params, cfg.m)


# ---------------------------------------------------------------- fitting

def fit_model(cfg: ExperimentConfig, dataset: Dataset, basis=None, workers=None):
    """Run the configured fitter; returns (fit, wall seconds including any grid-bound pre-fit)."""
    prior = PriorSpec.default(dataset.p)
    fc = cfg.fit_config(prior.phi_upper, workers)
    t0 = time.perf_counter()
    if cfg.fitter == "mcmc":
        burn = None if cfg.burn_in < 0 else cfg.burn_in
        fit = mh_sample(dataset, cfg.model, prior, iterations=cfg.iterations, seed=cfg.seed, burn_in=burn,
                        thin=cfg.thin, basis=basis, nu=cfg.nu, phi_every=cfg.phi_every)
    elif cfg.fitter == "mfvb":
        fit = fit_hybrid_mfvb(dataset, basis, prior, fc)
    elif cfg.fitter == "infvb-phi":
        fit = fit_infvb_phi(dataset, prior, fc)
    elif cfg.fitter == "infvb-phi-sigma":
        if cfg.sigma2_bounds == "auto":
            fc = cfg.fit_config(prior.phi_upper, workers, auto_sigma2_bounds(dataset, prior, fc))
        fit = fit_infvb_phi_sigma(dataset, prior, fc)
    else:
        if cfg.sigma2_bounds == "auto":
            fc = cfg.fit_config(prior.phi_upper, workers, auto_sigma2_bounds_basis(dataset, basis, prior, fc))
        fit = fit_infvb_sigma(dataset, basis, prior, fc)
    return fit, time.perf_counter() - t0


def _gaussian_mixture_quantile(weights, means, sds, q):
    if len(means) == 1:
        return float(stats.norm.ppf(q, means[0], sds[0]))

    def cdf(x):
        return float(np.dot(weights, stats.norm.cdf(x, means, sds))) - q

    lo = float(np.min(stats.norm.ppf(q, means, sds)))
    hi = float(np.max(stats.norm.ppf(q, means, sds)))
    return lo if hi <= lo else float(optimize.brentq(cdf, lo, hi, xtol=1e-12))


def _pmf_summary(support, pmf):
    cdf = np.cumsum(pmf)
    mean = float(pmf @ support)
    sd = math.sqrt(max(float(pmf @ support**2) - mean**2, 0.0))
    lo = support[min(np.searchsorted(cdf, 0.025), support.size - 1)]
    hi = support[min(np.searchsorted(cdf, 0.975), support.size - 1)]
    return {"mean": mean, "sd": sd, "q025": float(lo), "q975": float(hi)}


def parameter_summary(fit) -> list[dict]:
    """Posterior mean, SD and 95% interval of each scalar parameter."""
    rows = []
    if isinstance(fit, McmcResult):
        names, mat = fit.chain_matrix()
        for name, col in zip(names, mat.T):
            lo, hi = np.quantile(col, [0.025, 0.975])
            rows.append({"parameter": name, "mean": float(col.mean()), "sd": float(col.std()),
                         "q025": float(lo), "q975": float(hi), "mcse": batch_means_se(col)})
        return rows
    p = fit.train.p
    if hasattr(fit, "mixture"):
        mix = fit.mixture
        act = mix.active
        w = mix.weights[act] / math.fsum(mix.weights[act])
        comps = [c for c, a in zip(mix.components, act) if a]
        for j in range(p):
            means = np.array([c.q_gamma.mu[j] for c in comps])
            sds = np.sqrt([c.q_gamma.cov[j, j] for c in comps])
            mean = float(w @ means)
            sd = math.sqrt(max(float(w @ (sds**2 + means**2)) - mean**2, 0.0))
            rows.append({"parameter": f"beta{j + 1}", "mean": mean, "sd": sd,
                         "q025": _gaussian_mixture_quantile(w, means, sds, 0.025),
                         "q975": _gaussian_mixture_quantile(w, means, sds, 0.975)})
        rows.append({"parameter": "sigma2", **fit.sigma2_summary()})
        tau = [c.q_tau2 for c in comps if c.q_tau2 is not None]
        if len(tau) == len(comps):
            rows.append({"parameter": "tau2", **_ig_mixture_summary(w, tau)})
        if "phi" in mix.names:
            rows.append({"parameter": "phi", **_pmf_summary(*mix.marginal_pmf("phi"))})
    else:
        mean, sd = fit.beta_summary()
        for j in range(p):
            lo, hi = stats.norm.ppf([0.025, 0.975], mean[j], sd[j])
            rows.append({"parameter": f"beta{j + 1}", "mean": float(mean[j]), "sd": float(sd[j]),
                         "q025": float(lo), "q975": float(hi)})
        rows.append({"parameter": "sigma2", **fit.sigma2_summary()})
        if fit.q_tau2 is not None:
            rows.append({"parameter": "tau2", **_ig_mixture_summary(np.ones(1), [fit.q_tau2])})
    for r in rows:
        r.setdefault("mcse", "")
    return rows


def _ig_mixture_summary(w, qs):
    mean = float(sum(wj * q.mean for wj, q in zip(w, qs)))
    second = float(sum(wj * (q.variance + q.mean**2) for wj, q in zip(w, qs)))
    sd = math.sqrt(max(second - mean**2, 0.0)) if math.isfinite(second) else math.inf
    return {"mean": mean, "sd": sd, "q025": ig_mixture_quantile(w, qs, 0.025),
            "q975": ig_mixture_quantile(w, qs, 0.975)}


# ---------------------------------------------------------------- prediction

def predict_sites(dataset: Dataset):
    """Rows to predict at: the test rows, or the training rows when there is no test split."""
    return dataset.test if dataset.test.size else dataset.train


def predict_eta(fit, dataset: Dataset, cfg: ExperimentConfig):
    rows = predict_sites(dataset)
    coords, X = dataset.coords[rows], dataset.X[rows]
    if isinstance(fit, McmcResult):
        return mcmc_linear_predictor(fit, coords, X, joint=cfg.joint, seed=cfg.seed)
    return sample_linear_predictor(fit, coords, X, draws=cfg.draws, seed=cfg.seed, joint=cfg.joint)


# ---------------------------------------------------------------- artifacts

def _fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    """Rows are dicts keyed by header names (missing keys left blank) or plain sequences."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            values = [r.get(h) for h in header] if isinstance(r, dict) else r
            w.writerow([_fmt(v) for v in values])


def read_csv(path) -> tuple[list, list]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_fit_summary(path, rows):
    write_csv(path, ["parameter", "mean", "sd", "q025", "q975", "mcse"], rows)


def write_eta_summary(path, dataset, rows, summary, eta_true=None):
    header = ["row", "split", "x", "y", "mean", "sd", "q025", "q975", "eta_true"]
    test = set(dataset.test.tolist())
    out = []
    for k, i in enumerate(rows):
        out.append({"row": int(i), "split": "test" if int(i) in test else "train",
                    "x": dataset.coords[i, 0], "y": dataset.coords[i, 1], "mean": summary.mean[k],
                    "sd": summary.sd[k], "q025": summary.q025[k], "q975": summary.q975[k],
                    "eta_true": None if eta_true is None else eta_true[i]})
    write_csv(path, header, out)


def write_eta_draws(path, rows, draws):
    write_csv(path, [f"row{int(i)}" for i in rows], [list(d) for d in draws])


def write_scores(path, method, report: ScoreReport):
    """Scores only; timings go to the manifest so reruns give identical bytes."""
    row = {"method": method, **report.row()}
    write_csv(path, ["method", "kind", "rmspe", "auc", "crps", "coverage95"], [row])


def write_trace(path, fit):
    rows = []
    if hasattr(fit, "mixture"):
        for j, comp in enumerate(fit.mixture.components):
            for k, v in enumerate(comp.trace):
                rows.append({"point": j, "iteration": k + 1, "elbo": float(v)})
    elif hasattr(fit, "trace"):
        for k, v in enumerate(fit.trace):
            rows.append({"point": 0, "iteration": k + 1, "elbo": float(v)})
    write_csv(path, ["point", "iteration", "elbo"], rows)


def write_weights(path, fit):
    mix = fit.mixture
    header = [*mix.names, "elbo", "log_volume", "weight", "iterations", "converged"]
    rows = []
    for j in range(len(mix)):
        r = {name: mix.grid[j, k] for k, name in enumerate(mix.names)}
        r.update(elbo=mix.elbos[j], log_volume=mix.log_volumes[j], weight=mix.weights[j],
                 iterations=fit.iterations[j], converged=bool(fit.converged[j]))
        rows.append(r)
    write_csv(path, header, rows)


def write_manifest(path, cfg: ExperimentConfig, status: str, timings: dict, extra: dict) -> None:
    """Plain-text manifest readable with configparser: status, timings, run facts and the config."""
    parser = cfgmod.to_parser(cfg)
    parser["status"] = {"status": status, **{k: _fmt(v) for k, v in extra.items()}}
    parser["timing"] = {k: _fmt(v) for k, v in timings.items()}
    with Path(path).open("w", encoding="utf-8") as fh:
        parser.write(fh)


def read_manifest(path):
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path, encoding="utf-8")
    return parser


# ---------------------------------------------------------------- the experiment

def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentOutcome:
    """Simulate or load, fit, predict at test rows, score and write every artifact.

    The manifest is written even when a step fails; its ``status`` section
    then carries ``status = failed`` and the error text.
    """
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    outcome = ExperimentOutcome("failed", out)
    extra = {"fitter": cfg.fitter, "model": cfg.model, "seed": cfg.seed}
    timings = outcome.timings
    try:
        dataset, eta_true = prepare_data(cfg)
        extra.update(n_train=dataset.train.size, n_test=dataset.test.size)
        basis = None
        if cfg.model == "basis":
            t0 = time.perf_counter()
            basis = build_basis(cfg, dataset)
            timings["basis_seconds"] = time.perf_counter() - t0
            extra["basis_m"] = basis.m
        fit, wall = fit_model(cfg, dataset, basis, workers)
        timings["fit_seconds"] = wall
        outcome.fit = fit
        _record_fit_facts(fit, extra)
        t0 = time.perf_counter()
        summary = predict_eta(fit, dataset, cfg)
        response = predict_response(summary, dataset.kind)
        timings["predict_seconds"] = time.perf_counter() - t0
        rows = predict_sites(dataset)
        truth = eta_true[rows] if eta_true is not None else None
        report = score_predictions(dataset.kind, dataset.z[rows], response, summary, truth)
        outcome.score = report
        outcome.parameters = parameter_summary(fit)
        write_fit_summary(out / "fit_summary.csv", outcome.parameters)
        write_eta_summary(out / "eta_summary.csv", dataset, rows, summary, eta_true)
        if cfg.save_draws:
            write_eta_draws(out / "eta_draws.csv", rows, summary.draws)
        write_scores(out / "scores.csv", cfg.fitter, report)
        write_trace(out / "elbo_trace.csv", fit)
        if hasattr(fit, "mixture"):
            write_weights(out / "weights.csv", fit)
        with (out / FIT_STATE).open("wb") as fh:
            pickle.dump({"config": cfg, "fit": fit, "eta_true": eta_true, "dataset": dataset}, fh)
        outcome.status = "ok"
    except Exception as exc:
        outcome.error = f"{type(exc).__name__}: {exc}"
        extra["error"] = outcome.error
        log.debug("experiment failed\n%s", traceback.format_exc())
    finally:
        write_manifest(out / "manifest.txt", cfg, outcome.status, timings, extra)
    return outcome


def _record_fit_facts(fit, extra: dict) -> None:
    if isinstance(fit, McmcResult):
        extra["saved_samples"] = fit.n_samples
        for k, v in fit.acceptance.items():
            extra[f"acceptance_{k}"] = v
        if fit.flags:
            extra["warnings"] = "; ".join(fit.flags)
    elif hasattr(fit, "mixture"):
        extra["grid_points"] = len(fit.mixture)
        extra["grid_failures"] = len(fit.failures)
        extra["grid_not_converged"] = int((~fit.converged).sum())
        if fit.failures:
            extra["failed_points"] = "; ".join(f"{j}/{k}: {m}" for j, k, m in fit.failures)
    else:
        extra["iterations"] = fit.iterations
        extra["converged"] = fit.converged


def load_run(directory):
    with (Path(directory) / FIT_STATE).open("rb") as fh:
        return pickle.load(fh)


def predict_run(directory, coords=None, X=None, draws=None, seed=None):
    """Linear-predictor summary from a saved run at its test rows or at new locations."""
    state = load_run(directory)
    cfg, fit, ds = state["config"], state["fit"], state["dataset"]
    seed = cfg.seed if seed is None else seed
    if coords is None:
        rows = predict_sites(ds)
        coords, X = ds.coords[rows], ds.X[rows]
    if isinstance(fit, McmcResult):
        return mcmc_linear_predictor(fit, coords, X, joint=cfg.joint, seed=seed)
    return sample_linear_predictor(fit, coords, X, draws=draws or cfg.draws, seed=seed, joint=cfg.joint)


def score_run(directory) -> ScoreReport:
    """Recompute scores of a saved run from its stored fit."""
    state = load_run(directory)
    ds, eta = state["dataset"], state["eta_true"]
    summary = predict_run(directory)
    rows = predict_sites(ds)
    return score_predictions(ds.kind, ds.z[rows], predict_response(summary, ds.kind), summary,
                             None if eta is None else eta[rows])


# ---------------------------------------------------------------- comparison

def compare(cfg: ExperimentConfig, fitters, workers: int | None = None) -> dict:
    """Run several fitters on one dataset; writes a side-by-side score table and parameter differences."""
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    outcomes = {}
    for f in fitters:
        sub = replace(cfg, fitter=f, output=str(out / f))
        outcomes[f] = run_experiment(sub, workers)
    score_rows = []
    for f, oc in outcomes.items():
        row = {"method": f, "status": oc.status, "wall_seconds": oc.timings.get("fit_seconds")}
        if oc.score is not None:
            row.update(oc.score.row())
        score_rows.append(row)
    write_csv(out / "compare_scores.csv",
              ["method", "status", "kind", "rmspe", "auc", "crps", "coverage95", "wall_seconds"], score_rows)
    ref = fitters[0]
    means = {f: {r["parameter"]: r["mean"] for r in oc.parameters} for f, oc in outcomes.items()}
    names = [r["parameter"] for r in outcomes[ref].parameters]
    param_rows = []
    for name in names:
        row = {"parameter": name}
        for f in fitters:
            row[f"mean_{f}"] = means[f].get(name)
            if f != ref and name in means[f]:
                row[f"diff_{f}"] = means[f][name] - means[ref][name]
        param_rows.append(row)
    header = ["parameter", *[f"mean_{f}" for f in fitters], *[f"diff_{f}" for f in fitters[1:]]]
    write_csv(out / "compare_parameters.csv", header, param_rows)
    return outcomes


# ---------------------------------------------------------------- table reproduction

@dataclass(frozen=True)
class Scenario:
    model: str
    kind: str
    phi: float
    n: int
    m: int = 50


def desk_scenarios(kinds=("bernoulli", "poisson"), phis=(0.3, 0.7), model="full") -> list[Scenario]:
    n = 500 if model == "full" else 5000
    return [Scenario(model, k, p, n) for k in kinds for p in phis]


def large_scenarios(model="full") -> list[Scenario]:
    if model == "full":
        return [Scenario("full", k, p, 500) for k in ("bernoulli", "poisson") for p in (0.1, 0.3, 0.5, 0.7)]
    return [Scenario("basis", k, p, 25_000, m) for k in ("bernoulli", "poisson")
            for p in (0.1, 0.3, 0.5, 0.7) for m in (20, 50, 100)]


def _default_vb(model):
    return ("infvb-phi", "infvb-phi-sigma") if model == "full" else ("mfvb", "infvb-sigma")


def _metric_name(kind):
    return "auc" if Kind.parse(kind) is Kind.BERNOULLI else "rmspe"


def replicate_seed(seed: int, scenario_index: int, replicate: int) -> int:
    return int(rng_stream(seed, "replicate", scenario_index, replicate).integers(2**62))


def _score_replicate(cfg: ExperimentConfig, workers=None) -> dict:
    dataset, eta = prepare_data(cfg)
    basis = build_basis(cfg, dataset) if cfg.model == "basis" else None
    fit, wall = fit_model(cfg, dataset, basis, workers)
    summary = predict_eta(fit, dataset, cfg)
    rows = predict_sites(dataset)
    report = score_predictions(dataset.kind, dataset.z[rows], predict_response(summary, dataset.kind),
                               summary, eta[rows])
    return {"score": report.row(), "wall": wall, "mean": summary.mean, "params": parameter_summary(fit)}


@dataclass
class TableResult:
    rows: list
    replicates: list
    failures: list


def run_table_reproduction(scale: str = "desk", scenarios=None, replicates: int | None = None,
                           vb_fitters=None, output=None, seed: int = 0, mcmc_iterations: int | None = None,
                           vb_workers: int | None = None, mcmc_workers: int | None = None,
                           base: ExperimentConfig | None = None) -> TableResult:
    """Replicated VB-versus-MCMC runs per scenario, aggregated into one table row each.

    MCMC chains of all replicates of a scenario run as separate jobs on the
    worker pool; each VB fit uses its own grid-level pool. A failing
    replicate is recorded and the rest proceed.
    """
    if scale not in ("desk", "large"):
        raise ValueError("scale must be 'desk' or 'large'")
    scenarios = scenarios or (desk_scenarios() if scale == "desk" else large_scenarios())
    replicates = replicates or (5 if scale == "desk" else 50)
    iters = mcmc_iterations or (50_000 if scale == "desk" else 100_000)
    # an explicit base config keeps its own grid sizes
    base = base or replace(ExperimentConfig(), **cfgmod.default_grid_sizes(scale))
    table, reps, failures = [], [], []
    for si, sc in enumerate(scenarios):
        fitters = tuple(vb_fitters or _default_vb(sc.model))
        metric = _metric_name(sc.kind)
        row = {"model": sc.model, "kind": sc.kind, "phi": sc.phi, "n": sc.n, "m": sc.m if sc.model == "basis" else "",
               "metric": metric, "replicates": replicates}
        try:
            cfgs = [replace(base, model=sc.model, kind=sc.kind, phi=sc.phi, n=sc.n, m=sc.m,
                            seed=replicate_seed(seed, si, r), iterations=iters, fitter="mcmc",
                            save_draws=False) for r in range(replicates)]
        except ValueError as exc:
            failures.append((si, "", "config", f"{type(exc).__name__}: {exc}"))
            row.update({"mcmc": math.nan, "mcmc_wall": math.nan})
            for f in fitters:
                row.update({f: math.nan, f"{f}_wall": math.nan, f"{f}_speedup": math.nan})
            table.append(row)
            continue
        mc = ordered_map(partial(_safe, _score_replicate, workers=1), cfgs, mcmc_workers)
        per = {f: [] for f in fitters}
        for r, c in enumerate(cfgs):
            for f in fitters:
                try:
                    per[f].append(_score_replicate(replace(c, fitter=f), vb_workers))
                except Exception as exc:
                    per[f].append(None)
                    failures.append((si, r, f, f"{type(exc).__name__}: {exc}"))
            if isinstance(mc[r], str):
                failures.append((si, r, "mcmc", mc[r]))
        mc_ok = [x for x in mc if not isinstance(x, str)]
        row["mcmc"] = float(np.mean([x["score"][metric] for x in mc_ok])) if mc_ok else math.nan
        row["mcmc_wall"] = float(np.mean([x["wall"] for x in mc_ok])) if mc_ok else math.nan
        for f in fitters:
            ok = [x for x in per[f] if x is not None]
            row[f] = float(np.mean([x["score"][metric] for x in ok])) if ok else math.nan
            row[f"{f}_wall"] = float(np.mean([x["wall"] for x in ok])) if ok else math.nan
            row[f"{f}_speedup"] = row["mcmc_wall"] / row[f"{f}_wall"] if ok else math.nan
        table.append(row)
        for r in range(replicates):
            rec = {"scenario": si, "replicate": r, "seed": cfgs[r].seed, "model": sc.model, "kind": sc.kind,
                   "phi": sc.phi, "metric": metric}
            if not isinstance(mc[r], str):
                rec.update(mcmc=mc[r]["score"][metric], mcmc_wall=mc[r]["wall"], mcmc_eta=mc[r]["mean"],
                           mcmc_params=mc[r]["params"])
            for f in fitters:
                x = per[f][r]
                if x is not None:
                    rec.update({f: x["score"][metric], f"{f}_wall": x["wall"], f"{f}_eta": x["mean"],
                                f"{f}_params": x["params"]})
            reps.append(rec)
    result = TableResult(table, reps, failures)
    if output is not None:
        write_table(output, result)
    return result


def _safe(fn, item, **kw):
    try:
        return fn(item, **kw)
    except Exception as exc:
        return f"{type(exc).__name__}: {exc}"


def write_table(output, result: TableResult) -> None:
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    header = []
    for r in result.rows:
        header += [k for k in r if k not in header]
    write_csv(out / "table.csv", header, result.rows)
    flat = [{k: v for k, v in rec.items() if not isinstance(v, (np.ndarray, list))} for rec in result.replicates]
    rheader = []
    for r in flat:
        rheader += [k for k in r if k not in rheader]
    write_csv(out / "replicates.csv", rheader, flat)
    write_csv(out / "failures.csv", ["scenario", "replicate", "method", "error"],
              [dict(zip(["scenario", "replicate", "method", "error"], f)) for f in result.failures])

"""Command-line entry point: simulate, fit, predict, score, compare, reproduce."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import pipeline
from .config import ConfigError, ExperimentConfig
from .model import save_csv
from .parallel import WORKERS_ENV

RUN_KEYS = ("model", "kind", "fitter", "seed", "output", "csv")


def _add_run_options(p: argparse.ArgumentParser, fitter=True):
    p.add_argument("--config", help="experiment config file (sectioned key = value)")
    p.add_argument("--model", choices=("full", "basis"))
    p.add_argument("--kind", help="gaussian, poisson or bernoulli")
    if fitter:
        p.add_argument("--fitter", choices=cfgmod.FITTERS)
    p.add_argument("--seed", type=int)
    p.add_argument("--output", "-o", help="output directory")
    p.add_argument("--csv", help="dataset CSV (x,y,covariates,z[,split]); omit to simulate")
    p.add_argument("--simulate", metavar="K=V,...", help="simulation and basis settings, e.g. n=2000,m=20,phi=0.5")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--workers", type=int, help=f"worker processes (default: ${WORKERS_ENV} or 1)")


def build_config(args) -> ExperimentConfig:
    base = cfgmod.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "simulate", None):
        overrides.update(cfgmod.parse_assignments(args.simulate))
    for item in getattr(args, "set", []):
        overrides.update(cfgmod.parse_assignments(item))
    for key in RUN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    # a new model without a fitter picks that model's default fitter
    if "model" in overrides and "fitter" not in overrides and not args.config:
        overrides["fitter"] = cfgmod.MODEL_FITTERS[overrides["model"]][0]
    return base.with_overrides({k: str(v) if not isinstance(v, str) else v for k, v in overrides.items()})


def cmd_simulate(args) -> int:
    cfg = build_config(args)
    if not cfg.simulated:
        raise ConfigError("simulate does not take --csv")
    dataset, eta = pipeline.prepare_data(cfg)
    out = Path(args.output or "simulated.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(dataset, out)
    truth = out.with_suffix(".eta.csv")
    pipeline.write_csv(truth, ["row", "eta"], [[i, float(v)] for i, v in enumerate(eta)])
    print(f"wrote {out} ({dataset.train.size} train, {dataset.test.size} test) and {truth}")
    return 0


def cmd_fit(args) -> int:
    cfg = build_config(args)
    outcome = pipeline.run_experiment(cfg, args.workers)
    if outcome.status != "ok":
        print(f"fit failed: {outcome.error} (see {outcome.output / 'manifest.txt'})", file=sys.stderr)
        return 1
    print(f"{cfg.fitter} on {cfg.model}/{cfg.kind}: fit {outcome.timings['fit_seconds']:.2f} s; "
          f"artifacts in {outcome.output}")
    for k, v in outcome.score.row().items():
        if v is not None and k != "kind":
            print(f"  {k:>10s} {v:.4f}")
    return 0


def cmd_predict(args) -> int:
    coords = X = None
    if args.locations:
        header, rows = pipeline.read_csv(args.locations)
        arr = np.array([[float(v) for v in r] for r in rows if r])
        coords, X = arr[:, :2], arr[:, 2:]
    summary = pipeline.predict_run(args.run, coords, X, draws=args.draws, seed=args.seed)
    out = Path(args.output or Path(args.run) / "predictions.csv")
    pipeline.write_csv(out, ["index", "mean", "sd", "q025", "q975"],
                       [[i, summary.mean[i], summary.sd[i], summary.q025[i], summary.q975[i]]
                        for i in range(summary.mean.size)])
    print(f"wrote {out}")
    return 0


def cmd_score(args) -> int:
    report = pipeline.score_run(args.run)
    out = Path(args.output or Path(args.run) / "rescored.csv")
    pipeline.write_csv(out, list(report.row()), [report.row()])
    for k, v in report.row().items():
        print(f"{k:>10s} {v if isinstance(v, str) or v is None else f'{v:.4f}'}")
    return 0


def cmd_compare(args) -> int:
    cfg = build_config(args)
    fitters = [f.strip() for f in args.fitters.split(",") if f.strip()]
    # reject fitter/model mismatches before any compute
    for f in fitters:
        cfg.with_overrides({"fitter": f})
    outcomes = pipeline.compare(cfg, fitters, args.workers)
    for f, oc in outcomes.items():
        line = oc.score.row() if oc.score else {}
        print(f"{f:>16s} {oc.status:>6s} " + " ".join(f"{k}={v:.4f}" for k, v in line.items()
                                                      if isinstance(v, float)))
    return 0 if all(oc.status == "ok" for oc in outcomes.values()) else 1


def cmd_reproduce(args) -> int:
    kinds = tuple(k.strip() for k in args.kinds.split(","))
    phis = tuple(float(p) for p in args.phis.split(",")) if args.phis else None
    if args.scale == "desk":
        scenarios = pipeline.desk_scenarios(kinds, phis or (0.3, 0.7), args.model)
    else:
        scenarios = [s for s in pipeline.large_scenarios(args.model)
                     if s.kind in kinds and (phis is None or s.phi in phis)]
    if args.n:
        scenarios = [replace(s, n=args.n) for s in scenarios]
    if args.m:
        scenarios = [replace(s, m=args.m) for s in scenarios]
    vb = tuple(f.strip() for f in args.fitters.split(",")) if args.fitters else None
    res = pipeline.run_table_reproduction(args.scale, scenarios, args.replicates, vb, args.output,
                                          args.seed, args.iterations, args.workers, args.workers)
    for row in res.rows:
        print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    if res.failures:
        print(f"{len(res.failures)} replicate failures recorded in {Path(args.output) / 'failures.csv'}",
              file=sys.stderr)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatialvb", description="Variational and MCMC fitting of spatial GLMMs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated dataset CSV")
    _add_run_options(p, fitter=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit, predict at test rows, score and write artifacts")
    _add_run_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="linear-predictor summary from a saved run")
    p.add_argument("--run", required=True, help="output directory of a previous fit")
    p.add_argument("--locations", help="CSV of x,y,covariates for new locations")
    p.add_argument("--draws", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("score", help="recompute test-set scores of a saved run")
    p.add_argument("--run", required=True)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("compare", help="run several fitters on one dataset")
    _add_run_options(p)
    p.add_argument("--fitters", required=True, help="comma-separated, e.g. mfvb,mcmc")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("reproduce", help="replicated VB versus MCMC scenario table")
    p.add_argument("--scale", choices=("desk", "large"), default="desk")
    p.add_argument("--model", choices=("full", "basis"), default="full")
    p.add_argument("--kinds", default="bernoulli,poisson")
    p.add_argument("--phis", help="comma-separated range values")
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--iterations", type=int, help="MCMC iterations")
    p.add_argument("--fitters", help="variational fitters to include")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int)
    p.add_argument("--output", "-o", default="table")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.error(str(exc))
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

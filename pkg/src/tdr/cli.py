"""Command-line driver: ``tdr simulate|train|predict|cv|benchmark|report``.

Exit status is 0 on success, 2 on a usage error and 1 when the run itself
fails.  ``TDR_THREADS`` caps the number of worker processes used by ``cv``
and ``benchmark``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import harness, io
from .heat import SimConfig, generate_dataset
from .lls import Family
from .prognostics import predict_many, prediction_error, train
from .supervised import FitConfig

log = logging.getLogger("tdr")

FAMILIES = ("normal", "lognormal", "logistic", "loglogistic", "sev", "weibull")


class UsageError(Exception):
    pass


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _fit_flags(p):
    p.add_argument("--family", choices=FAMILIES, default="lognormal")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)


def _grid_flags(p):
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--p-max", type=int, nargs="+", default=[4],
                   help="largest P_n in the CV grid (one value or three)")
    p.add_argument("--alphas", type=_floats, default=[0.2, 0.5, 0.8])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdr", description="Supervised tensor dimension reduction for "
                                                           "time-to-failure prediction from image streams")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate heat-transfer degradation streams")
    p.add_argument("--out", required=True)
    p.add_argument("--assets", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--missing-rate", type=float, default=0.0)
    p.add_argument("--missing-pattern", choices=("entry", "image"), default="image")
    p.add_argument("--dt", type=float, default=SimConfig.dt, help="time step of the heat simulation")

    p = sub.add_parser("train", help="fit a prognostic model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model directory")
    for n in (1, 2, 3):
        p.add_argument(f"--p{n}", type=int, default=2)
    p.add_argument("--alpha", type=float, default=0.5)
    _fit_flags(p)

    p = sub.add_parser("predict", help="predict failure times with a trained model")
    p.add_argument("--data", required=True)
    p.add_argument("--model")
    p.add_argument("--out", required=True, help="predictions CSV")

    p = sub.add_parser("cv", help="cross-validate (P1, P2, P3, alpha)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory for cv.csv and best.json")
    _grid_flags(p)
    _fit_flags(p)

    p = sub.add_parser("benchmark", help="compare Proposed-CV, MPCA-CV and MPCA-97%%")
    p.add_argument("--data", help="dataset directory; simulated from --assets/--seed if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--assets", type=int, default=500)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--missing-rate", type=_floats, default=[0.0, 0.1, 0.5, 0.9],
                   help="comma-separated missing rates")
    p.add_argument("--missing-pattern", choices=("entry", "image"), default="image")
    p.add_argument("--methods", default=",".join(harness.METHODS))
    p.add_argument("--no-plots", action="store_true")
    _grid_flags(p)
    _fit_flags(p)

    p = sub.add_parser("report", help="rebuild summary.csv and box plots from errors.csv")
    p.add_argument("--out", required=True, help="benchmark output directory")
    p.add_argument("--no-plots", action="store_true")
    return parser


def _grid(args) -> harness.CvGrid:
    p_max = args.p_max
    if len(p_max) not in (1, 3) or min(p_max) < 1:
        raise UsageError("--p-max takes one or three positive integers")
    if args.folds < 2:
        raise UsageError("--folds must be at least 2")
    if not args.alphas or any(not 0 <= a <= 1 for a in args.alphas):
        raise UsageError("--alphas must be values in [0, 1]")
    return harness.CvGrid.box(p_max[0] if len(p_max) == 1 else tuple(p_max), tuple(args.alphas), args.folds)


def _fit_cfg(args, alpha=0.5) -> FitConfig:
    if args.tol <= 0 or args.max_iters < 1:
        raise UsageError("--tol must be positive and --max-iters at least 1")
    return FitConfig(alpha=alpha, family=Family.parse(args.family), tol=args.tol,
                     max_iters=args.max_iters, seed=args.seed)


def _labelled(assets):
    out = [a for a in assets if a.ttf is not None]
    if len(out) < len(assets):
        log.warning("%d assets without a failure time are ignored", len(assets) - len(out))
    return out


def cmd_simulate(args) -> int:
    if args.assets < 1:
        raise UsageError("--assets must be at least 1")
    if not 0 <= args.missing_rate <= 1:
        raise UsageError("--missing-rate must lie in [0, 1]")
    cfg = SimConfig(n_assets=args.assets, seed=args.seed, dt=args.dt)
    sims = generate_dataset(cfg)
    streams = [s.stream for s in sims]
    if args.missing_rate > 0:
        streams = harness.apply_missing(streams, args.missing_rate, args.missing_pattern, args.seed)
    manifest = {"sim_config": cfg.to_dict(), "seed": args.seed,
                "missing_rate": args.missing_rate, "missing_pattern": args.missing_pattern}
    io.save_dataset(args.out, streams, manifest)
    print(f"wrote {len(streams)} assets to {args.out}")
    return 0


def cmd_train(args) -> int:
    dims = (args.p1, args.p2, args.p3)
    if min(dims) < 1:
        raise UsageError("--p1/--p2/--p3 must be positive")
    if not 0 <= args.alpha <= 1:
        raise UsageError("--alpha must lie in [0, 1]")
    cfg = _fit_cfg(args, args.alpha)
    assets, _ = io.load_dataset(args.data)
    model = train(_labelled(assets), dims, cfg)
    path = io.save_model(args.out, model)
    print(f"model written to {path}")
    return 0


def cmd_predict(args) -> int:
    if not args.model:
        raise UsageError("predict needs --model")
    model = io.load_model(args.model)
    assets, _ = io.load_dataset(args.data)
    preds = predict_many(model, assets)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["asset_id", "point_estimate", "location", "scale", "family", "true_ttf", "abs_rel_error"])
        for m, (a, p) in enumerate(zip(assets, preds)):
            err = "" if a.ttf is None else repr(prediction_error(p.point_estimate, a.ttf))
            w.writerow([m, repr(p.point_estimate), repr(p.location), repr(p.scale), p.family.name,
                        "" if a.ttf is None else repr(float(a.ttf)), err])
    print(f"{len(preds)} predictions written to {out}")
    return 0


def cmd_cv(args) -> int:
    grid = _grid(args)
    cfg = _fit_cfg(args)
    assets = _labelled(io.load_dataset(args.data)[0])
    if grid.folds > len(assets):
        raise UsageError(f"--folds {grid.folds} exceeds the {len(assets)} labelled assets")
    res = harness.cv_select(assets, grid, cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / "cv.csv")
    best = {"p1": res.best["dims"][0], "p2": res.best["dims"][1], "p3": res.best["dims"][2],
            "alpha": res.best["alpha"], "score": res.best["score"]}
    (out / "best.json").write_text(json.dumps(best, indent=2))
    print(json.dumps(best))
    return 0


def cmd_benchmark(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise UsageError("--methods is empty")
    unknown = [m for m in methods if m not in harness.METHODS]
    if unknown:
        raise UsageError(f"unknown methods {unknown}; choose from {list(harness.METHODS)}")
    if not args.missing_rate or any(not 0 <= r <= 1 for r in args.missing_rate):
        raise UsageError("--missing-rate must be values in [0, 1]")
    grid = _grid(args)
    cfg = _fit_cfg(args)
    if args.data:
        assets = _labelled(io.load_dataset(args.data)[0])
    else:
        if args.assets < 2:
            raise UsageError("--assets must be at least 2")
        assets = [s.stream for s in generate_dataset(SimConfig(n_assets=args.assets, seed=args.seed))]
    n_train = min(args.n_train, len(assets) - 1)
    if n_train < grid.folds:
        raise UsageError(f"{n_train} training assets cannot be split into {grid.folds} folds")
    if n_train != args.n_train:
        log.warning("only %d assets: using %d for training", len(assets), n_train)
    rep = harness.benchmark(assets[:n_train], assets[n_train:], methods, args.missing_rate,
                            args.missing_pattern, grid, cfg, seed=args.seed)
    rep.write(args.out, plots=not args.no_plots)
    for row in harness.report(args.out, plots=False):
        print(f"{row['method']:>9s}  rate={row['missing_rate']:.2f}  median={row['median']:.4f}  "
              f"iqr={row['iqr']:.4f}  {row['status']}")
    return 0


def cmd_report(args) -> int:
    if not (Path(args.out) / "errors.csv").exists():
        raise UsageError(f"no errors.csv in {args.out}")
    for row in harness.report(args.out, plots=not args.no_plots):
        print(f"{row['method']:>9s}  rate={row['missing_rate']:.2f}  median={row['median']:.4f}  "
              f"iqr={row['iqr']:.4f}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "predict": cmd_predict,
    "cv": cmd_cv,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on malformed flags
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tdr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"tdr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Cross-validation over (P1, P2, P3, alpha) and the three-method benchmark.

Methods compared by :func:`benchmark`:

``proposed``   supervised fit with (dims, alpha) chosen by k-fold CV
``mpca-cv``    masked Tucker imputation + MPCA, dims chosen by k-fold CV
``mpca-97``    the same baseline with dims from a 97% FVE target

Every reported median/IQR is recomputed from per-asset errors with the
linear-interpolation quantile convention, so ``errors.csv`` alone is
enough to rebuild ``summary.csv`` (see :func:`report`).
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .heat import inject_missing
from .lls import Family, fit_lls, predict_distribution
from .mpca import mpca_extract, mpca_fit
from .prognostics import (
    fit_completion,
    pad_and_stack,
    predict_many,
    prediction_error,
    train,
    train_mpca,
)
from .supervised import FitConfig
from .tensor import matricize

log = logging.getLogger(__name__)

METHODS = ("proposed", "mpca-cv", "mpca-97")


def n_jobs() -> int:
    """Worker count: CPU count capped by ``TDR_THREADS``."""
    n = os.cpu_count() or 1
    cap = os.environ.get("TDR_THREADS")
    if cap:
        try:
            n = min(n, max(int(cap), 1))
        except ValueError:
            log.warning("ignoring non-integer TDR_THREADS=%r", cap)
    return n


def _parallel(tasks):
    tasks = list(tasks)
    jobs = n_jobs()
    if jobs == 1 or len(tasks) < 2:
        return [f(*a) for f, a, _ in tasks]
    return Parallel(n_jobs=jobs)(delayed(f)(*a) for f, a, _ in tasks)


@dataclass(frozen=True)
class CvGrid:
    p_candidates: tuple = tuple(itertools.product(range(1, 5), repeat=3))
    alpha_candidates: tuple = (0.2, 0.5, 0.8)
    folds: int = 10

    def __post_init__(self):
        dims = tuple(tuple(int(p) for p in d) for d in self.p_candidates)
        if not dims or any(len(d) != 3 or min(d) < 1 for d in dims):
            raise ValueError("p_candidates must be a non-empty set of positive (P1, P2, P3)")
        alphas = tuple(float(a) for a in self.alpha_candidates)
        if not alphas or any(not 0.0 <= a <= 1.0 for a in alphas):
            raise ValueError("alpha_candidates must be a non-empty subset of [0, 1]")
        if self.folds < 2:
            raise ValueError(f"need at least 2 folds, got {self.folds}")
        object.__setattr__(self, "p_candidates", tuple(sorted(set(dims))))
        object.__setattr__(self, "alpha_candidates", tuple(sorted(set(alphas))))

    @classmethod
    def box(cls, p_max, alphas=(0.2, 0.5, 0.8), folds: int = 10) -> "CvGrid":
        """All ``(P1, P2, P3)`` with ``1 <= P_n <= p_max[n]``."""
        if np.isscalar(p_max):
            p_max = (p_max,) * 3
        return cls(tuple(itertools.product(*(range(1, int(p) + 1) for p in p_max))), alphas, folds)


def fold_assignment(seed: int, n: int, folds: int) -> np.ndarray:
    """Fold id of each of `n` items; a pure function of ``(seed, n, folds)``."""
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if folds > n:
        raise ValueError(f"{folds} folds requested for {n} assets")
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=int)
    ids[perm] = np.arange(n) % folds
    return ids


@dataclass
class CvResult:
    """One row per grid point; ``score`` is the fold-averaged median error (NaN if failed)."""

    rows: list
    best: dict

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["p1", "p2", "p3", "alpha", "score", "status"])
            for r in self.rows:
                w.writerow([*r["dims"], "" if r["alpha"] is None else r["alpha"],
                            repr(r["score"]), r["status"]])


def _select(rows) -> dict:
    ok = [r for r in rows if np.isfinite(r["score"])]
    if not ok:
        raise RuntimeError("every grid point failed during cross-validation")
    key = lambda r: (r["score"], int(np.prod(r["dims"])), r["alpha"] or 0.0)  # noqa: E731
    return min(ok, key=key)


def _proposed_fold(streams, ids, k, dims, alpha, cfg):
    tr = [s for s, f in zip(streams, ids) if f != k]
    te = [s for s, f in zip(streams, ids) if f == k]
    c = FitConfig(alpha=alpha, family=cfg.family, tol=cfg.tol, max_iters=cfg.max_iters, seed=cfg.seed)
    model = train(tr, dims, c)
    preds = predict_many(model, te)
    return float(np.median([prediction_error(p.point_estimate, s.ttf) for p, s in zip(preds, te)]))


def _mpca_fold(filled, y, ids, k, dims, family):
    tr, te = ids != k, ids == k
    mp = mpca_fit(filled[..., tr], dims=dims)
    lls = fit_lls(y[tr], matricize(mpca_extract(mp, filled[..., tr]), 4), family)
    feats = matricize(mpca_extract(mp, filled[..., te]), 4)
    est = np.array([predict_distribution(lls, f).point_estimate for f in feats])
    return float(np.median(np.abs(est - y[te]) / y[te]))


def _guard(fn, *args):
    try:
        return fn(*args), "ok"
    except (ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        return float("nan"), f"failed: {type(exc).__name__}: {exc}"


def _collect(points, folds, results):
    rows = []
    for j, (dims, alpha) in enumerate(points):
        fold_res = results[j * folds:(j + 1) * folds]
        bad = [st for _, st in fold_res if st != "ok"]
        if bad:
            log.warning("grid point dims=%s alpha=%s skipped: %s", dims, alpha, bad[0])
            rows.append({"dims": dims, "alpha": alpha, "score": float("nan"), "status": bad[0]})
        else:
            rows.append({"dims": dims, "alpha": alpha,
                         "score": float(np.mean([v for v, _ in fold_res])), "status": "ok"})
    return rows


def cv_select(streams, grid: CvGrid, cfg: FitConfig = FitConfig(), seed: int = 0) -> CvResult:
    """k-fold CV of the supervised method over ``grid`` (dims x alpha).

    The score of a grid point is the held-out median absolute relative
    error averaged over folds.  Ties go to the smaller ``P1*P2*P3``, then
    the smaller alpha.  Failing grid points are logged and skipped.
    """
    streams = list(streams)
    ids = fold_assignment(seed, len(streams), grid.folds)
    points = [(d, a) for d in grid.p_candidates for a in grid.alpha_candidates]
    tasks = [(_guard, (_proposed_fold, streams, ids, k, d, a, cfg), None)
             for d, a in points for k in range(grid.folds)]
    rows = _collect(points, grid.folds, _parallel(tasks))
    return CvResult(rows, _select(rows))


def cv_select_mpca(streams, grid: CvGrid, family="lognormal", seed: int = 0, completion=None) -> CvResult:
    """k-fold CV of the MPCA baseline over ``grid.p_candidates`` (alpha is unused).

    Streams are imputed once by `completion` (fitted here if not given);
    the imputation does not look at failure times.
    """
    streams = list(streams)
    family = Family.parse(family)
    x, y = pad_and_stack(streams)
    if completion is None and not x.complete:
        completion = fit_completion(streams, candidates=grid.p_candidates, seed=seed)
    filled = x.values if x.complete else completion.fill(x).values
    ids = fold_assignment(seed, len(streams), grid.folds)
    points = [(d, None) for d in grid.p_candidates]
    tasks = [(_guard, (_mpca_fold, filled, y, ids, k, d, family), None)
             for d, _ in points for k in range(grid.folds)]
    rows = _collect(points, grid.folds, _parallel(tasks))
    return CvResult(rows, _select(rows))


# --- benchmark ----------------------------------------------------------------------

def summarize(errors) -> dict:
    """Median, quartiles and IQR (linear interpolation) of a list of errors."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        return {"n": 0, "median": float("nan"), "q1": float("nan"), "q3": float("nan"), "iqr": float("nan")}
    q1, med, q3 = np.percentile(e, [25, 50, 75], method="linear")
    return {"n": int(e.size), "median": float(med), "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1)}


@dataclass
class MethodRun:
    method: str
    missing_rate: float
    asset_ids: list
    errors: list
    runtime: float
    selection: dict = field(default_factory=dict)
    status: str = "ok"


@dataclass
class BenchmarkReport:
    runs: list

    def summary(self) -> list:
        out = []
        for r in self.runs:
            out.append({"method": r.method, "missing_rate": r.missing_rate, **summarize(r.errors),
                        "runtime_s": r.runtime, "status": r.status})
        return out

    def median(self, method: str, rate: float) -> float:
        for r in self.runs:
            if r.method == method and r.missing_rate == rate:
                return summarize(r.errors)["median"]
        raise KeyError((method, rate))

    def write(self, out_dir, plots: bool = True) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "errors.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "missing_rate", "asset_id", "error"])
            for r in self.runs:
                for a, e in zip(r.asset_ids, r.errors):
                    w.writerow([r.method, r.missing_rate, a, repr(float(e))])
        with open(out / "runs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "missing_rate", "runtime_s", "status", "selection"])
            for r in self.runs:
                w.writerow([r.method, r.missing_rate, f"{r.runtime:.3f}", r.status, json.dumps(r.selection)])
        report(out, plots=plots)
        return out


def missing_rng(seed: int, asset_id: int):
    """Per-asset generator for missing-data injection.

    The same generator state is used at every rate, so the masks are nested
    (a higher rate removes a superset of frames).
    """
    return np.random.default_rng([int(seed), int(asset_id)])


def apply_missing(streams, rate: float, pattern: str, seed: int, offset: int = 0):
    return [inject_missing(s, rate, pattern, missing_rng(seed, offset + i)) for i, s in enumerate(streams)]


def _errors(preds, streams):
    return [prediction_error(p.point_estimate, s.ttf) for p, s in zip(preds, streams)]


def run_method(method: str, train_streams, test_streams, grid: CvGrid, cfg: FitConfig,
               seed: int = 0, completion=None) -> tuple[list, dict]:
    """Fit one method on the training streams and return per-asset test errors and its selection."""
    if method == "proposed":
        cv = cv_select(train_streams, grid, cfg, seed)
        dims, alpha = cv.best["dims"], cv.best["alpha"]
        c = FitConfig(alpha=alpha, family=cfg.family, tol=cfg.tol, max_iters=cfg.max_iters, seed=cfg.seed)
        model = train(train_streams, dims, c)
        sel = {"dims": list(dims), "alpha": alpha, "cv_score": cv.best["score"]}
    elif method == "mpca-cv":
        cv = cv_select_mpca(train_streams, grid, cfg.family, seed, completion)
        model = train_mpca(train_streams, dims=cv.best["dims"], family=cfg.family, completion=completion)
        sel = {"dims": list(cv.best["dims"]), "cv_score": cv.best["score"],
               "completion_dims": list(model.completion.core.shape[:3])}
    elif method == "mpca-97":
        model = train_mpca(train_streams, fve=0.97, family=cfg.family, completion=completion)
        sel = {"dims": list(model.subspace), "completion_dims": list(model.completion.core.shape[:3])}
    else:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    return _errors(predict_many(model, test_streams), test_streams), sel


def benchmark(train_streams, test_streams, methods=METHODS, rates=(0.0, 0.1, 0.5, 0.9),
              pattern: str = "image", grid: CvGrid | None = None, cfg: FitConfig = FitConfig(),
              seed: int = 0) -> BenchmarkReport:
    """Run each method at each missing rate; failures are isolated per (method, rate) cell.

    Missing data is injected into training and test streams alike, with
    nested masks across rates.
    """
    methods = list(methods)
    if not methods:
        raise ValueError("no methods requested")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
    grid = grid or CvGrid()
    train_streams, test_streams = list(train_streams), list(test_streams)
    runs = []
    for rate in rates:
        tr = apply_missing(train_streams, rate, pattern, seed)
        te = apply_missing(test_streams, rate, pattern, seed, offset=len(train_streams))
        completion = None
        # padding makes the stacked training tensor incomplete even at rate 0
        if any(m.startswith("mpca") for m in methods):
            t0 = time.perf_counter()
            completion = fit_completion(tr, candidates=grid.p_candidates, seed=seed)
            log.info("completion at rate %g took %.1fs", rate, time.perf_counter() - t0)
        for m in methods:
            t0 = time.perf_counter()
            try:
                errs, sel = run_method(m, tr, te, grid, cfg, seed, completion)
                status = "ok"
            except Exception as exc:  # isolate the cell, keep the rest of the table
                log.error("%s at missing rate %g failed: %s", m, rate, exc)
                errs, sel, status = [], {}, f"failed: {type(exc).__name__}: {exc}"
            dt = time.perf_counter() - t0
            log.info("%s rate=%g median=%.4f (%.1fs)", m, rate, summarize(errs)["median"], dt)
            runs.append(MethodRun(m, float(rate), list(range(len(train_streams), len(train_streams) + len(te)))
                                  if errs else [], errs, dt, sel, status))
    return BenchmarkReport(runs)


def read_errors(path) -> dict:
    """``{(method, rate): [errors...]}`` from an ``errors.csv`` file, in file order."""
    table: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            table.setdefault((row["method"], float(row["missing_rate"])), []).append(float(row["error"]))
    return table


def report(out_dir, plots: bool = True) -> list:
    """Recompute ``summary.csv`` (and box plots) from ``errors.csv`` in `out_dir`.

    Only ``summary.csv`` and ``boxplot_*.svg`` are written.
    """
    out = Path(out_dir)
    table = read_errors(out / "errors.csv")
    runs = {}
    if (out / "runs.csv").exists():
        with open(out / "runs.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                runs[(row["method"], float(row["missing_rate"]))] = row
    keys = sorted(set(table) | set(runs), key=lambda k: (k[1], METHODS.index(k[0]) if k[0] in METHODS else 99, k[0]))
    rows = []
    for k in keys:
        meta = runs.get(k, {})
        rows.append({"method": k[0], "missing_rate": k[1], **summarize(table.get(k, [])),
                     "runtime_s": meta.get("runtime_s", ""), "status": meta.get("status", "ok")})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "missing_rate", "n", "median", "q1", "q3", "iqr",
                                           "runtime_s", "status"])
        w.writeheader()
        w.writerows(rows)
    if plots and table:
        _boxplots(table, out)
    return rows


def _boxplots(table, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for rate in sorted({r for _, r in table}):
        keys = [k for k in table if k[1] == rate and table[k]]
        if not keys:
            continue
        keys.sort(key=lambda k: METHODS.index(k[0]) if k[0] in METHODS else 99)
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        ax.boxplot([table[k] for k in keys], whis=1.5)
        ax.set_xticks(range(1, len(keys) + 1), [k[0] for k in keys])
        ax.set_ylabel("absolute relative error")
        ax.set_title(f"{rate:.0%} missing")
        fig.tight_layout()
        fig.savefig(out / f"boxplot_{int(round(rate * 100)):02d}.svg")
        plt.close(fig)

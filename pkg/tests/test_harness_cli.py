import csv
import json

import numpy as np
import pytest

from tdr import cli, harness, io
from tdr.harness import CvGrid, fold_assignment
from tdr.heat import SimConfig, generate_dataset
from tdr.prognostics import pad_and_stack, train
from tdr.supervised import FitConfig


@pytest.fixture(scope="module")
def streams():
    return [a.stream for a in generate_dataset(SimConfig(n_assets=14, seed=3))]


def test_fold_assignment_is_a_balanced_partition():
    ids = fold_assignment(7, 23, 5)
    assert sorted(np.bincount(ids)) == [4, 4, 5, 5, 5]
    np.testing.assert_array_equal(ids, fold_assignment(7, 23, 5))
    assert not np.array_equal(ids, fold_assignment(8, 23, 5))
    with pytest.raises(ValueError):
        fold_assignment(0, 4, 5)
    with pytest.raises(ValueError):
        fold_assignment(0, 4, 1)


def test_grid_validation_and_order():
    g = CvGrid(((2, 1, 1), (1, 1, 1), (2, 1, 1)), (0.8, 0.2), 3)
    assert g.p_candidates == ((1, 1, 1), (2, 1, 1))
    assert g.alpha_candidates == (0.2, 0.8)
    assert len(CvGrid().p_candidates) == 64
    assert len(CvGrid.box((2, 1, 3)).p_candidates) == 6
    for bad in (dict(p_candidates=()), dict(alpha_candidates=(1.5,)), dict(folds=1),
                dict(p_candidates=((0, 1, 1),))):
        with pytest.raises(ValueError):
            CvGrid(**bad)


def test_selection_tie_breaks():
    rows = [{"dims": (2, 2, 1), "alpha": 0.2, "score": 0.1},
            {"dims": (1, 2, 1), "alpha": 0.8, "score": 0.1},
            {"dims": (1, 2, 1), "alpha": 0.5, "score": 0.1},
            {"dims": (1, 1, 1), "alpha": 0.2, "score": float("nan")}]
    assert harness._select(rows) == rows[2]
    with pytest.raises(RuntimeError):
        harness._select(rows[3:])


def test_single_point_grid(streams):
    res = harness.cv_select(streams, CvGrid(((1, 1, 1),), (0.5,), 2), FitConfig(max_iters=5))
    assert res.best["dims"] == (1, 1, 1) and res.best["alpha"] == 0.5
    assert np.isfinite(res.best["score"])


def test_failing_grid_point_is_skipped(streams):
    # P1 = 30 exceeds the image size, so every fold of that point fails
    grid = CvGrid(((1, 1, 1), (30, 1, 1)), (0.5,), 2)
    res = harness.cv_select(streams, grid, FitConfig(max_iters=5))
    bad = [r for r in res.rows if r["dims"] == (30, 1, 1)][0]
    assert np.isnan(bad["score"]) and bad["status"].startswith("failed")
    assert res.best["dims"] == (1, 1, 1)


def test_cv_is_independent_of_worker_count(streams, monkeypatch):
    grid = CvGrid(((1, 1, 1), (2, 1, 1)), (0.5,), 2)
    monkeypatch.setenv("TDR_THREADS", "1")
    a = harness.cv_select_mpca(streams, grid)
    monkeypatch.setenv("TDR_THREADS", "2")
    b = harness.cv_select_mpca(streams, grid)
    assert [r["score"] for r in a.rows] == [r["score"] for r in b.rows]


def test_summary_quantiles():
    s = harness.summarize([4.0, 1.0, 3.0, 2.0])
    assert (s["median"], s["q1"], s["q3"], s["iqr"]) == (2.5, 1.75, 3.25, 1.5)
    assert np.isnan(harness.summarize([])["median"])


def test_benchmark_report_recomputes_from_errors(streams, tmp_path):
    grid = CvGrid(((1, 1, 1),), (0.5,), 2)
    rep = harness.benchmark(streams[:10], streams[10:], ("mpca-cv", "mpca-97"), (0.0, 0.5), "image", grid,
                            FitConfig(max_iters=5))
    rep.write(tmp_path, plots=True)
    before = (tmp_path / "errors.csv").read_bytes()
    rows = harness.report(tmp_path, plots=False)
    assert (tmp_path / "errors.csv").read_bytes() == before
    assert (tmp_path / "boxplot_50.svg").exists()
    table = harness.read_errors(tmp_path / "errors.csv")
    for r in rows:
        assert r["median"] == harness.summarize(table[(r["method"], r["missing_rate"])])["median"]
        assert r["median"] == rep.median(r["method"], r["missing_rate"])
    with open(tmp_path / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4


def test_benchmark_isolates_failures(streams):
    rep = harness.benchmark(streams[:10], streams[10:], ("proposed", "mpca-97"), (0.0,), "image",
                            CvGrid(((30, 1, 1),), (0.5,), 2), FitConfig(max_iters=3))
    status = {r.method: r.status for r in rep.runs}
    assert status["proposed"].startswith("failed") and status["mpca-97"] == "ok"
    with pytest.raises(ValueError):
        harness.benchmark(streams[:4], streams[4:], ())


def test_missing_masks_nested_across_rates(streams):
    lo = harness.apply_missing(streams, 0.1, "image", 5)
    hi = harness.apply_missing(streams, 0.5, "image", 5)
    for a, b in zip(lo, hi):
        assert not np.any(b.mask & ~a.mask)


# --- command line ------------------------------------------------------------------

def run(argv):
    return cli.main([str(a) for a in argv])


def test_cli_usage_errors(tmp_path, capsys):
    assert run(["simulate", "--assets", 0, "--out", tmp_path / "d"]) == 2
    assert run(["predict", "--data", tmp_path, "--out", tmp_path / "p.csv"]) == 2
    assert run(["benchmark", "--out", tmp_path / "b", "--methods", ","]) == 2
    assert run(["benchmark", "--out", tmp_path / "b", "--methods", "svm"]) == 2
    assert run(["report", "--out", tmp_path / "nothing"]) == 2
    with pytest.raises(SystemExit) as exc:
        run(["train", "--data", tmp_path, "--out", tmp_path, "--family", "gamma"])
    assert exc.value.code == 2
    assert run(["train", "--data", tmp_path / "missing", "--out", tmp_path / "m"]) == 1


def test_cli_simulate_train_predict(tmp_path):
    data, model = tmp_path / "data", tmp_path / "model"
    assert run(["simulate", "--assets", 8, "--seed", 2, "--out", data,
                "--missing-rate", 0.5, "--missing-pattern", "image"]) == 0
    assets, manifest = io.load_dataset(data)
    assert len(assets) == 8 and manifest["missing_rate"] == 0.5
    for a in assets:
        dropped = int((~a.mask.all(axis=(0, 1))).sum())
        assert dropped == int(np.floor(0.5 * a.length + 0.5))
    assert run(["train", "--data", data, "--out", model, "--p1", 2, "--p2", 1, "--p3", 1,
                "--max-iters", 10]) == 0
    assert run(["predict", "--data", data, "--model", model, "--out", tmp_path / "pred.csv"]) == 0
    with open(tmp_path / "pred.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["asset_id", "point_estimate", "location", "scale", "family", "true_ttf",
                             "abs_rel_error"]
    # predicting the training set reproduces the in-sample fitted values
    m = train(assets, (2, 1, 1), FitConfig(alpha=0.5, max_iters=10))
    x, _ = pad_and_stack(assets)
    fitted = m.lls.location(m.features(x))
    np.testing.assert_allclose([float(r["location"]) for r in rows], fitted, rtol=1e-12)
    # and reruns are identical
    assert run(["predict", "--data", data, "--model", model, "--out", tmp_path / "again.csv"]) == 0
    assert (tmp_path / "pred.csv").read_bytes() == (tmp_path / "again.csv").read_bytes()


def test_cli_cv_and_benchmark(tmp_path):
    data = tmp_path / "data"
    assert run(["simulate", "--assets", 12, "--seed", 4, "--out", data]) == 0
    assert run(["cv", "--data", data, "--out", tmp_path / "cv", "--folds", 13]) == 2
    assert run(["cv", "--data", data, "--out", tmp_path / "cv", "--folds", 2, "--p-max", 1,
                "--alphas", "0.5", "--max-iters", 5]) == 0
    best = json.loads((tmp_path / "cv" / "best.json").read_text())
    assert (best["p1"], best["p2"], best["p3"], best["alpha"]) == (1, 1, 1, 0.5)
    out = tmp_path / "bench"
    assert run(["benchmark", "--data", data, "--out", out, "--n-train", 9, "--missing-rate", "0,0.5",
                "--methods", "mpca-97", "--folds", 2, "--p-max", 1, "--no-plots"]) == 0
    assert (out / "summary.csv").exists() and not list(out.glob("*.svg"))
    assert run(["report", "--out", out]) == 0
    assert (out / "boxplot_00.svg").exists()


def planted_streams(seed, m=30, dims=(6, 5, 4)):
    import oracles as orc
    from tdr.prognostics import AssetStream

    rng = np.random.default_rng(seed)
    f = [np.linalg.qr(rng.standard_normal((i, 2)))[0].T for i in dims]
    core = rng.standard_normal((2, 2, 2, m))
    x = orc.recon(core, *f) + 0.01 * rng.standard_normal(dims + (m,))
    g = rng.standard_normal(8)
    y = np.exp(2 + 0.5 * core.reshape(-1, m, order="F").T @ (g / np.linalg.norm(g))
               + 0.1 * rng.standard_normal(m))
    return [AssetStream(x[..., k], ttf=float(y[k])) for k in range(m)]


def test_cv_finds_planted_dims():
    grid = CvGrid.box(2, (0.5,), 5)
    hits = sum(harness.cv_select(planted_streams(s), grid, FitConfig(max_iters=30), seed=s).best["dims"]
               == (2, 2, 2) for s in range(10))
    assert hits >= 8

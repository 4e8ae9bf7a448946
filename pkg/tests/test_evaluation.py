import csv
import json
import math

import numpy as np
import pytest

from promptpsi.codec import CodecConfig, CodecModel, baseline_config
from promptpsi.evaluation import (CSV_COLUMNS, FIG4A, FIG4B, CellResult, EvalReport, MissingData,
                                  SplitOverlap, class_mean_bank, evaluate_grid,
                                  export_report, grid_by_name, matching_accuracy, read_report)
from promptpsi.evaluation import TestSet as HeldOut
from promptpsi.irs import SystemConfig, generate_dataset
from promptpsi.prompts import TaskDescriptor, init_bank, task_grid

SYS = SystemConfig(rows=8, cols=8)
CODEC = CodecConfig(rows=8, cols=8, d_model=16, d_p=16, latent_hidden=32, dec_hidden=32)
GRID = task_grid((0.125, 0.25, 0.5), (10.0, 15.0), ("LoS", "NLoS"))


@pytest.fixture(scope="module")
def setup():
    r = np.random.default_rng(0)
    model = CodecModel(CODEC, r)
    bank = init_bank(GRID, CODEC.d_p, r)
    base = CodecModel(baseline_config(CODEC), r)
    tests = {}
    for i, t in enumerate(GRID):
        psi = generate_dataset(SYS, t.channel_type, 20, seed=i)
        tests[t] = HeldOut(psi, np.arange(100, 120))
    return {"prompt": (model, bank), "baseline": (base, None)}, tests


def _report(setup, grid=GRID, seed=3, **kw):
    models, tests = setup
    return evaluate_grid(models, tests, grid, seed, "ab" * 32, draws=5, **kw)


def test_every_cell_for_every_model(setup):
    rep = _report(setup)
    assert len(rep.cells) == len(GRID) * 2
    assert all(math.isfinite(c.nmse_db) for c in rep.cells)
    assert {(c.task, c.model) for c in rep.cells} == {(t, m) for t in GRID for m in ("prompt", "baseline")}


def test_report_deterministic(setup):
    a, b = _report(setup), _report(setup)
    assert [c.nmse_db for c in a.cells] == [c.nmse_db for c in b.cells]


def test_more_draws_change_only_noise(setup):
    models, tests = setup
    t = [TaskDescriptor(0.25, 15.0, "NLoS")]
    a = evaluate_grid(models, tests, t, 1, "x", draws=50)
    b = evaluate_grid(models, tests, t, 2, "x", draws=50)
    for ca, cb in zip(a.cells, b.cells):
        assert abs(ca.nmse_db - cb.nmse_db) < 0.1


def test_missing_cell_fails_unless_partial(setup):
    models, tests = setup
    partial = dict(list(tests.items())[:3])
    with pytest.raises(MissingData):
        evaluate_grid(models, partial, GRID, 0, "x", draws=2)
    rep = evaluate_grid(models, partial, GRID, 0, "x", draws=2, allow_partial=True)
    assert len(rep.cells) == 6 and len(rep.absent) == 9


def test_training_split_refused(setup):
    seen = {GRID[0].label(): np.arange(90, 105)}
    with pytest.raises(SplitOverlap):
        _report(setup, train_indices={"prompt": seen})
    _report(setup, train_indices={"prompt": {GRID[0].label(): np.arange(0, 100)}})


def test_figure_grids():
    assert grid_by_name("fig4a", GRID) == FIG4A
    assert {(t.cr, t.snr_db, t.channel_type) for t in FIG4A} == {(c, 15.0, "NLoS") for c in (0.125, 0.25, 0.5)}
    assert len(FIG4B) == 4 and {t.cr for t in FIG4B} == {0.25}
    assert grid_by_name("full", GRID) == GRID
    with pytest.raises(ValueError):
        grid_by_name("fig5", GRID)


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_export_roundtrip(setup, tmp_path, fmt):
    rep = _report(setup)
    rep.matching = {"prompt": {"channel_type": 0.5}}
    path = tmp_path / f"r.{fmt}"
    export_report(rep, path, fmt)
    back = read_report(path, fmt)
    assert back.cells == rep.cells
    assert (back.config_digest, back.seed, back.matching) == (rep.config_digest, rep.seed, rep.matching)


def test_csv_layout(setup, tmp_path):
    rep = _report(setup)
    path = tmp_path / "r.csv"
    export_report(rep, path, "csv")
    rows = list(csv.reader(open(path)))
    assert rows[0] == CSV_COLUMNS
    assert len(rows) == len(GRID) * 2 + 1
    meta = json.load(open(f"{path}.meta.json"))
    assert meta["config_digest"] == rep.config_digest and meta["seed"] == rep.seed


def test_json_is_versioned(setup, tmp_path):
    path = tmp_path / "r.json"
    export_report(_report(setup), path, "json")
    obj = json.load(open(path))
    assert obj["schema"] == "promptpsi-eval-report" and obj["version"] == 1


def test_unknown_format_and_nan_rejected(setup, tmp_path):
    rep = _report(setup)
    with pytest.raises(ValueError, match="format"):
        export_report(rep, tmp_path / "r.xml", "xml")
    bad = EvalReport([CellResult(GRID[0], "m", float("nan"), 1, 0)], "x", 0)
    with pytest.raises(ValueError, match="non-finite"):
        export_report(bad, tmp_path / "r.csv", "csv")


def test_export_error_has_path(setup, tmp_path):
    with pytest.raises(OSError, match="nope"):
        export_report(_report(setup), tmp_path / "nope" / "r.csv", "csv")


def test_constant_keys_score_one_class(setup):
    models, tests = setup
    model, bank = models["prompt"]
    flat = bank.copy()
    for p in flat:
        p.key_vec.data[:] = 1.0  # every match ties and goes to the first (LoS) prompt
    samples = [(ts.psi, t) for t, ts in tests.items()]
    acc = matching_accuracy(model, flat, samples)
    assert acc["channel_type"] == 0.5
    assert acc["per_channel"] == {"LoS": 1.0, "NLoS": 0.0}
    assert acc["n"] == 20 * len(GRID)
    lo, hi = acc["channel_type_ci"]
    assert lo < 0.5 < hi


def test_class_mean_keys_are_channel_centroids(setup):
    models, tests = setup
    model, bank = models["prompt"]
    before = bank.key_matrix().copy()
    samples = [(ts.psi, t) for t, ts in tests.items()]
    ref = class_mean_bank(model, bank, samples)
    np.testing.assert_array_equal(bank.key_matrix(), before)
    for ctype in ("LoS", "NLoS"):
        e = np.concatenate([model.embed(ts.psi) for t, ts in tests.items() if t.channel_type == ctype])
        centroid = (e / np.linalg.norm(e, axis=1, keepdims=True)).mean(axis=0)
        for p in ref:
            if p.key_meta.channel_type == ctype:
                np.testing.assert_allclose(p.key_vec.data, centroid, rtol=1e-12)

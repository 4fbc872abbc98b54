import numpy as np
import pandas as pd
import pytest

from conftest import exhaustive_threshold, make_case, make_cohort
from core.errors import DataError, SchemaError, UnattainablePrecisionError
from core.patchagg import (
    GRID_COLUMNS,
    REASON_NO_GRID,
    PatchClass,
    aggregate_cases,
    apply_percentages,
    classify_patches,
    load_patch_grids,
    load_slide_manifest,
    pattern_percentages,
    select_tissue_threshold,
    write_percentages_csv,
)
from schemas import ClassWeights, PatchGrid, PatternPercentages


def one_cell(probs, tissue=1.0):
    return PatchGrid(slide_id="S", probs=np.array(probs, dtype=float).reshape(1, 1, 4), tissue_score=[[tissue]])


# --- Tissue threshold ---------------------------------------------------------------

def test_separable_scores():
    result = select_tissue_threshold([0.1, 0.2, 0.8, 0.9], [False, False, True, True], 0.97)
    assert 0.2 < result.threshold <= 0.8
    assert result.precision == 1.0
    assert result.recall == 1.0


def test_all_positive_labels_take_the_minimum_score():
    result = select_tissue_threshold([0.4, 0.1, 0.7], [True, True, True], 0.97)
    assert result.threshold == 0.1
    assert result.recall == 1.0


def test_matches_exhaustive_scan(rng):
    labels = rng.random(1000) < 0.8
    scores = np.where(labels, rng.normal(0.7, 0.15, 1000), rng.normal(0.3, 0.15, 1000)).clip(0, 1).round(3)
    expected = exhaustive_threshold(scores, labels, 0.97)
    assert expected is not None
    result = select_tissue_threshold(scores, labels, 0.97)
    assert result.threshold == expected
    assert result.precision >= 0.97


def test_unattainable_precision():
    with pytest.raises(UnattainablePrecisionError):
        select_tissue_threshold([0.1, 0.9], [True, False], 0.97)


def test_threshold_input_checks():
    with pytest.raises(DataError):
        select_tissue_threshold([0.1, 0.2], [True], 0.97)
    with pytest.raises(DataError):
        select_tissue_threshold([0.1, 0.2], [False, False], 0.97)
    with pytest.raises(DataError):
        select_tissue_threshold([0.1, 0.2], [True, True], 1.5)


# --- Classification ----------------------------------------------------------------

def test_plain_argmax():
    assert classify_patches(one_cell([0.1, 0.2, 0.3, 0.4]))[0, 0] == PatchClass.GP5


def test_weights_rerank_classes():
    weights = ClassWeights(w=(1.0, 1.0, 2.0, 1.0))
    assert classify_patches(one_cell([0.1, 0.2, 0.3, 0.4]), weights)[0, 0] == PatchClass.GP4


def test_ties_go_to_lower_risk_class():
    assert classify_patches(one_cell([0.25, 0.25, 0.25, 0.25]))[0, 0] == PatchClass.NONTUMOR
    assert classify_patches(one_cell([0.0, 0.0, 0.5, 0.5]))[0, 0] == PatchClass.GP4


def test_low_tissue_score_is_masked():
    cell = one_cell([0.0, 0.0, 0.0, 1.0], tissue=0.3)
    assert classify_patches(cell, tissue_threshold=0.5)[0, 0] == PatchClass.MASKED
    assert classify_patches(cell, tissue_threshold=0.3)[0, 0] == PatchClass.GP5


def test_near_ties_survive_weight_scaling():
    base = np.array([1.0, 1.0, 1.5, 0.75])
    cell = one_cell([0.1, 0.3, 0.2, 0.4])
    for factor in (1.0, 0.3, 0.7, 7.0, 0.01):
        assert classify_patches(cell, ClassWeights(w=tuple(base * factor)))[0, 0] == PatchClass.GP3


def test_weight_scaling_never_changes_classes(rng):
    probs = rng.dirichlet(np.ones(4), size=(20, 30))
    grid = PatchGrid(slide_id="S", probs=probs, tissue_score=rng.random((20, 30)))
    weights = rng.uniform(0.2, 3.0, size=4)
    expected = classify_patches(grid, ClassWeights(w=tuple(weights)), tissue_threshold=0.2)
    for factor in (1e-3, 0.37, 3.0, 1e4):
        scaled = ClassWeights(w=tuple(weights * factor))
        np.testing.assert_array_equal(classify_patches(grid, scaled, tissue_threshold=0.2), expected)


def test_raising_the_threshold_only_masks_more(rng):
    grid = PatchGrid(slide_id="S", probs=rng.dirichlet(np.ones(4), size=(15, 15)), tissue_score=rng.random((15, 15)))
    previous = classify_patches(grid, tissue_threshold=0.0)
    for threshold in np.linspace(0.05, 1.0, 20):
        current = classify_patches(grid, tissue_threshold=threshold)
        assert not ((previous == PatchClass.MASKED) & (current != PatchClass.MASKED)).any()
        kept = current != PatchClass.MASKED
        np.testing.assert_array_equal(current[kept], previous[kept])
        previous = current


def test_cell_and_slide_order_do_not_matter(rng):
    probs = rng.dirichlet(np.ones(4), size=(12, 10))
    tissue = rng.random((12, 10))
    grid = PatchGrid(slide_id="A", probs=probs, tissue_score=tissue)
    other = PatchGrid(slide_id="B", probs=rng.dirichlet(np.ones(4), size=(5, 5)), tissue_score=rng.random((5, 5)))
    def classify(g):
        return classify_patches(g, tissue_threshold=0.3)

    expected = pattern_percentages([classify(grid), classify(other)])

    flat = rng.permutation(12 * 10)
    shuffled = PatchGrid(
        slide_id="A",
        probs=probs.reshape(-1, 4)[flat].reshape(10, 12, 4),
        tissue_score=tissue.ravel()[flat].reshape(10, 12),
    )
    assert pattern_percentages([classify(other), classify(shuffled)]) == expected


def test_weights_must_be_positive():
    with pytest.raises(ValueError):
        ClassWeights(w=(1.0, 0.0, 1.0, 1.0))


# --- Percentages --------------------------------------------------------------------

def test_percentages_ignore_nontumor_cells():
    cells = np.array([1] * 50 + [2] * 30 + [3] * 20 + [0] * 900 + [-1] * 7)
    pct = pattern_percentages([cells])
    assert (pct.pct_gp3, pct.pct_gp4, pct.pct_gp5, pct.tumor_present) == (50.0, 30.0, 20.0, True)
    assert pct.n_nontumor_cells == 900
    assert pct.n_masked_cells == 7


def test_no_tumor_cells():
    pct = pattern_percentages([np.zeros((3, 3)), np.full((2, 2), -1)])
    assert (pct.pct_gp3, pct.pct_gp4, pct.pct_gp5, pct.tumor_present) == (0.0, 0.0, 0.0, False)


def test_slides_pool_at_case_level():
    pct = pattern_percentages([np.full(10, 1), np.full(10, 2)])
    assert (pct.pct_gp3, pct.pct_gp4, pct.pct_gp5) == (50.0, 50.0, 0.0)


# --- Files --------------------------------------------------------------------------

def write_grids(path):
    rows = [
        # slide 001: GP3, GP4 and one low-tissue cell; (1, 1) absent
        ("001", 0, 0, 0.1, 0.7, 0.1, 0.1, 0.9),
        ("001", 0, 1, 0.1, 0.1, 0.7, 0.1, 0.9),
        ("001", 1, 0, 0.0, 0.0, 0.0, 1.0, 0.1),
        # slide 002 belongs to the same case
        ("002", 0, 0, 0.0, 0.0, 1.0, 0.0, 1.0),
        # slide 003: all nontumor
        ("003", 0, 0, 0.9, 0.1, 0.0, 0.0, 1.0),
    ]
    pd.DataFrame(rows, columns=GRID_COLUMNS).to_csv(path, index=False)
    return path


def test_load_grids_and_aggregate(tmp_path):
    grids = load_patch_grids(write_grids(tmp_path / "grids.csv"))
    assert sorted(grids) == ["001", "002", "003"]
    assert (grids["001"].rows, grids["001"].cols) == (2, 2)
    assert grids["001"].tissue_score[1, 1] == 0.0

    (tmp_path / "manifest.csv").write_text("slide_id,case_id\n001,P1\n002,P1\n003,P2\n", encoding="utf-8")
    manifest = load_slide_manifest(tmp_path / "manifest.csv")
    assert manifest == {"001": "P1", "002": "P1", "003": "P2"}

    per_case = aggregate_cases(grids, manifest, tissue_threshold=0.5)
    p1 = per_case["P1"]
    assert p1.pct_gp3 == pytest.approx(100 / 3)
    assert p1.pct_gp4 == pytest.approx(200 / 3)
    assert p1.pct_gp5 == 0.0
    assert p1.n_masked_cells == 2
    assert not per_case["P2"].tumor_present


def test_absent_cells_are_masked_at_any_threshold(tmp_path):
    grids = load_patch_grids(write_grids(tmp_path / "grids.csv"))
    assert not grids["001"].present[1, 1]
    assert grids["001"].present[0, 0]
    cells = classify_patches(grids["001"], tissue_threshold=0.0)
    assert cells[1, 1] == PatchClass.MASKED
    pct = pattern_percentages([cells])
    assert (pct.n_masked_cells, pct.n_nontumor_cells, pct.n_tumor_cells) == (1, 0, 3)


def test_grid_file_problems(tmp_path):
    with pytest.raises(DataError):
        load_patch_grids(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("slide_id,row,col\n001,0,0\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        load_patch_grids(bad)
    unnormalized = tmp_path / "unnormalized.csv"
    pd.DataFrame([("001", 0, 0, 0.5, 0.5, 0.5, 0.0, 1.0)], columns=GRID_COLUMNS).to_csv(unnormalized, index=False)
    with pytest.raises(DataError):
        load_patch_grids(unnormalized)


def test_manifest_must_cover_every_slide(tmp_path):
    grids = load_patch_grids(write_grids(tmp_path / "grids.csv"))
    with pytest.raises(DataError):
        aggregate_cases(grids, {"001": "P1"})


def test_cases_without_grids_are_excluded():
    cohort = make_cohort([make_case("P1"), make_case("P2")])
    pct = PatternPercentages(pct_gp3=20.0, pct_gp4=80.0, pct_gp5=0.0, tumor_present=True)
    updated = apply_percentages(cohort, {"P1": pct})
    assert updated.case_ids == ["P1"]
    assert updated.cases[0].pct_gp4 == 80.0
    assert [(r.case_id, r.reason) for r in updated.exclusion_log] == [("P2", REASON_NO_GRID)]


def test_percentages_csv(tmp_path):
    pct = PatternPercentages(pct_gp3=20.0, pct_gp4=80.0, pct_gp5=0.0, tumor_present=True, n_tumor_cells=5)
    write_percentages_csv({"P1": pct}, tmp_path / "pct.csv")
    frame = pd.read_csv(tmp_path / "pct.csv", dtype={"case_id": str})
    assert list(frame.columns[:4]) == ["case_id", "pct_gp3", "pct_gp4", "pct_gp5"]
    assert frame.loc[0, "n_tumor_cells"] == 5

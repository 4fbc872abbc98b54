import json

import numpy as np
import pandas as pd
import pytest

from conftest import make_case, make_cohort
from core.cohort import save_cohort
from core.config import load_run_config
from core.errors import ConfigError, HistogramError, PipelineStageError
from core.pipeline import (
    ASSIGNMENT_FILES,
    CSV_REPORTS,
    NA_NO_GRADES,
    analysis_frame,
    discordance_survival,
    ensemble_assignments,
    group_km,
    run_pipeline,
    substratify_km,
    validate_bundle,
)
from schemas import ReferenceHistogram, RiskAssignment

SMALL_RUN = dict(simulate=True, n_cases=800, seed=5, n_bootstrap=20)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "first"
    bundle = run_pipeline(load_run_config(out_dir=out, **SMALL_RUN))
    return out, bundle


def assignment(case_id, group, score=0.0):
    return RiskAssignment(case_id=case_id, risk_score=score, risk_group=group, method="loocv")


# --- Building blocks -----------------------------------------------------------------

def test_discordance_marks_impossible_directions():
    ai = [1, 1, 2, 5, 4, 3, 2]
    gg = [1, 1, 2, 5, 5, 2, 3]
    times = [2.0, 11.0, 12.0, 4.0, 15.0, 9.0, 12.0]
    events = [True, False, False, True, False, True, False]
    rows = {(r.gg, r.direction): r for r in discordance_survival(ai, gg, times, events)}
    assert len(rows) == 20
    assert rows[(1, "lower")].note.startswith("N/A") and rows[(1, "lower")].estimate is None
    assert rows[(5, "higher")].note.startswith("N/A")
    assert rows[(1, "same")].n == 2
    assert rows[(1, "same")].estimate == pytest.approx(0.5)
    assert rows[(5, "lower")].n == 1
    for g in range(1, 6):
        split = sum(rows[(g, d)].n for d in ("lower", "same", "higher"))
        assert split == rows[(g, "all")].n


def test_group_km_curves_and_test():
    curves, row = group_km([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [True] * 6, [1, 1, 1, 2, 2, 2], "v1_ai")
    assert sorted(curves) == ["v1_ai_1", "v1_ai_2"]
    assert row.df == 1 and row.p_value is not None

    _, single = group_km([1.0, 2.0], [True, False], [3, 3], "v2_gg")
    assert single.note.startswith("skipped")


def test_substratify_skips_one_sided_strata():
    cases = [make_case(f"S{i}", pathologist_gg=1, followup_years=float(i + 1), dss_event=i % 2 == 0, os_event=None) for i in range(4)]
    cases += [
        make_case(f"T{i}", pathologist_gg=3, followup_years=float(i + 1), dss_event=True, os_event=True) for i in range(4)
    ]
    cohort = make_cohort(cases)
    groups = {"S0": 1, "S1": 2, "S2": 1, "S3": 2, "T0": 4, "T1": 5, "T2": 2, "T3": 1}
    curves, rows = substratify_km(cohort, {k: assignment(k, g) for k, g in groups.items()}, "gg", prefix="v2_")
    by_stratum = {r.stratum: r for r in rows}
    assert by_stratum["v2_gg1"].note == "skipped: only one side of the split has cases"
    assert by_stratum["v2_gg1"].p_value is None
    assert by_stratum["v2_gg3"].df == 1
    assert "v2_gg1_ai1-2" in curves and "v2_gg1_ai3-5" not in curves
    assert {"v2_gg3_ai1-2", "v2_gg3_ai3-5"} <= set(curves)


def test_substratify_by_tstage():
    cohort = make_cohort(
        [make_case(f"P{i}", t_category="T3" if i < 4 else "T2", followup_years=float(i + 1), dss_event=True, os_event=True) for i in range(8)]
    )
    groups = {f"P{i}": (1 if i % 2 else 4) for i in range(8)}
    _, rows = substratify_km(cohort, {k: assignment(k, g) for k, g in groups.items()}, "tstage", prefix="v1_")
    assert [r.stratum for r in rows] == ["v1_t1-2", "v1_t3-4"]
    with pytest.raises(ConfigError):
        substratify_km(cohort, {k: assignment(k, g) for k, g in groups.items()}, "year")


def test_analysis_frame_adds_ensemble_only_for_graded_cohorts():
    graded = make_cohort([make_case("A", pathologist_gg=1), make_case("B", pathologist_gg=4)])
    frame = analysis_frame(graded, "DSS", {"A": assignment("A", 3, 0.2), "B": assignment("B", 2, 0.1)})
    assert frame["ensemble"].tolist() == [2.0, 3.0]
    assert frame["score"].tolist() == [0.2, 0.1]

    ungraded = make_cohort([make_case("A", pathologist_gg=None), make_case("B")])
    frame = analysis_frame(ungraded, "DSS", {"A": assignment("A", 3), "B": assignment("B", None)})
    assert "ensemble" not in frame.columns
    assert np.isnan(frame["group"].iloc[1])

    # a fully graded validation set 1 still gets no ensemble
    frame = analysis_frame(graded, "DSS", {"A": assignment("A", 3, 0.2), "B": assignment("B", 2, 0.1)}, graded_set=False)
    assert "ensemble" not in frame.columns


def test_ensemble_assignments_are_labelled_and_discretized():
    frame = pd.DataFrame({"case_id": ["A", "B", "C"], "ensemble": [2.5, 1.0, 4.0]})
    grouped = ensemble_assignments(frame, ReferenceHistogram(counts=(1, 1, 0, 0, 1)))
    assert [a.method for a in grouped] == ["ensemble"] * 3
    assert [a.risk_group for a in grouped] == [2, 1, 5]
    with pytest.raises(HistogramError):
        ensemble_assignments(frame, ReferenceHistogram(counts=(1, 1, 1, 1, 1)))


def test_two_input_sources_are_rejected(tmp_path):
    cohort_file = tmp_path / "cohort.csv"
    save_cohort(make_cohort([make_case("A")]), cohort_file)
    with pytest.raises(ConfigError):
        load_run_config(cohort_path=cohort_file, simulate=True, seed=1, out_dir=tmp_path / "out")
    with pytest.raises(ConfigError):
        load_run_config(seed=1, out_dir=tmp_path / "out")


# --- End to end ----------------------------------------------------------------------

def test_bundle_is_complete_and_valid(finished_run):
    out, bundle = finished_run
    assert validate_bundle(out) == []
    for rel in list(CSV_REPORTS) + list(ASSIGNMENT_FILES.values()) + ["fit_per_pattern.json", "manifest.json"]:
        assert (out / rel).is_file(), rel

    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["seed"] == 5
    assert manifest["files"]["assignments.csv"] == bundle.manifest["files"]["assignments.csv"]
    assert "manifest.json" not in manifest["files"]
    assert manifest["n_cases"]["V1"] > manifest["n_cases"]["V2"] > 0
    for rel in manifest["km_curves"].values():
        assert (out / rel).is_file()

    assignments = pd.read_csv(out / "assignments_v2.csv")
    assert len(assignments) == manifest["n_cases"]["V2"]
    assert assignments["risk_group"].between(1, 5).all()


def test_table2_shape(finished_run):
    _, bundle = finished_run
    rows = {(r.validation_set, r.metric): r for r in bundle.table2}
    assert rows[("V1", "pathologist_gg")].note == NA_NO_GRADES
    assert rows[("V1", "ensemble_mean")].c_index is None
    v1_score = rows[("V1", "ai_risk_score")]
    assert 0.5 < v1_score.c_index <= 1.0
    assert v1_score.ci_lower <= v1_score.ci_upper
    for metric in ("pathologist_gg", "ai_risk_score", "ai_risk_group", "ensemble_mean"):
        assert rows[("V2", metric)].n == rows[("V2", "ai_risk_score")].n
    diffs = {(d.validation_set, d.comparison): d for d in bundle.table2_diffs}
    assert len(diffs) == 6
    assert diffs[("V1", "ai_risk_score - pathologist_gg")].note == NA_NO_GRADES


def test_sections_cover_every_analysis(finished_run):
    _, bundle = finished_run
    assert len(bundle.discordance10y) == 20
    assert {r.setting for r in bundle.sensitivity_discretization} == {"loocv", "temporal_split", "rule_based"}
    assert {r.setting for r in bundle.sensitivity_years} == {"surgery_year >= 2000", "surgery_year >= 1995"}
    assert len(bundle.multivariable) == 8
    assert {r.stratum for r in bundle.logrank} >= {"v1_ai", "v2_ai", "v2_gg"}
    reference_rows = [r for r in bundle.hr_univariable if r.note == "reference"]
    assert {(r.validation_set, r.variable) for r in reference_rows} == {
        ("V1", "ai_risk_group"), ("V2", "ai_risk_group"), ("V2", "pathologist_gg")
    }
    assert {r.variable for r in bundle.hr_per_pattern} == {"pct_gp4", "pct_gp5"}


def test_rerun_is_byte_identical(finished_run):
    out, bundle = finished_run
    second = out.parent / "second"
    rerun = run_pipeline(load_run_config(out_dir=second, **SMALL_RUN))
    assert rerun.manifest["files"] == bundle.manifest["files"]
    # a previous run directory may be replaced
    run_pipeline(load_run_config(out_dir=second, **SMALL_RUN))
    assert validate_bundle(second) == []


def test_tampering_is_detected(finished_run, tmp_path):
    out, _ = finished_run
    copy = tmp_path / "copy"
    copy.mkdir()
    for path in out.rglob("*"):
        if path.is_file():
            target = copy / path.relative_to(out)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(path.read_bytes())
    (copy / "table1.csv").write_text((copy / "table1.csv").read_text(encoding="utf-8") + "V9,x,y,1\n", encoding="utf-8")
    (copy / "multivariable.csv").unlink()
    problems = validate_bundle(copy)
    assert any("table1.csv" in p and "hash" in p for p in problems)
    assert any(p == "missing multivariable.csv" for p in problems)


def test_refuses_foreign_output_directory(tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / "notes.txt").write_text("keep me", encoding="utf-8")
    with pytest.raises(ConfigError):
        run_pipeline(load_run_config(out_dir=out, **SMALL_RUN))
    assert (out / "notes.txt").read_text(encoding="utf-8") == "keep me"


def test_failed_stage_leaves_nothing_behind(tmp_path):
    cohort_file = tmp_path / "data" / "ungraded.csv"
    save_cohort(make_cohort([make_case(f"U{i:02d}", pathologist_gg=None) for i in range(30)]), cohort_file)
    runs = tmp_path / "runs"
    with pytest.raises(PipelineStageError) as exc:
        run_pipeline(load_run_config(cohort_path=cohort_file, seed=1, n_bootstrap=5, out_dir=runs / "out"))
    assert exc.value.stage == "validation_sets"
    assert exc.value.exit_code == 3
    assert list(runs.iterdir()) == []


@pytest.mark.slow
def test_default_scale_separates_risk_groups(tmp_path):
    bundle = run_pipeline(
        load_run_config(simulate=True, seed=20210623, n_bootstrap=10, n_workers=4, out_dir=tmp_path / "full")
    )
    overall = next(r for r in bundle.logrank if r.stratum == "v1_ai")
    assert overall.p_value < 0.001


def test_graded_validation_set_1_still_has_no_grade_metrics(sim_cohort, tmp_path):
    cases = [c if c.pathologist_gg is not None else c.model_copy(update={"pathologist_gg": 2}) for c in sim_cohort.cases]
    assert any(c.surgery_year < 2000 for c in cases)
    cohort_file = tmp_path / "graded.csv"
    save_cohort(make_cohort(cases, label="graded"), cohort_file)
    bundle = run_pipeline(load_run_config(cohort_path=cohort_file, seed=3, n_bootstrap=5, out_dir=tmp_path / "out"))
    rows = {(r.validation_set, r.metric): r for r in bundle.table2}
    assert rows[("V1", "pathologist_gg")].note == NA_NO_GRADES
    assert rows[("V1", "ensemble_mean")].c_index is None
    assert rows[("V2", "pathologist_gg")].c_index is not None
    v1_gg = [r for r in bundle.hr_univariable if r.validation_set == "V1" and r.variable == "pathologist_gg"]
    assert [r.note for r in v1_gg] == [NA_NO_GRADES]


def test_explicit_reference_must_match_validation_set_2(finished_run, tmp_path):
    out, bundle = finished_run
    n_v2 = bundle.manifest["n_cases"]["V2"]
    with pytest.raises(PipelineStageError) as exc:
        run_pipeline(load_run_config(out_dir=tmp_path / "bad", **dict(SMALL_RUN, reference=f"{n_v2 + 1},0,0,0,0")))
    assert exc.value.stage == "discretization"
    assert exc.value.exit_code == 3
    assert not (tmp_path / "bad").exists()

    counts = (n_v2 - 4, 1, 1, 1, 1)
    run_pipeline(
        load_run_config(out_dir=tmp_path / "good", **dict(SMALL_RUN, reference=",".join(map(str, counts))))
    )
    groups = pd.read_csv(tmp_path / "good" / "assignments_v2.csv")["risk_group"]
    assert tuple(int((groups == g).sum()) for g in range(1, 6)) == counts

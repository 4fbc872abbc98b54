"""End-to-end analysis run: one RunConfig in, one directory of CSV/JSON reports out.

Stages run in a fixed order and write into a staging directory next to ``out_dir``;
the staging directory replaces ``out_dir`` only when every stage succeeded.
"""

import hashlib
import json
import platform
import shutil
import tempfile
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pydantic
import scipy

import core
from core.cohort import (
    apply_exclusions,
    cohort_frame,
    describe_cohort,
    load_cohort,
    make_simulation_params,
    outcome_arrays,
    select_validation_set,
    simulate_cohort,
)
from core.concordance import c_index
from core.config import RunConfig, settings
from core.coxph import fit_cox, fit_report, fit_univariable_groups, grade_design, hazard_ratios
from core.errors import (
    ConfigError,
    ConvergenceError,
    DegenerateCovariateError,
    GleasonRiskError,
    HistogramError,
    MissingGradeError,
    PipelineStageError,
    ReliabilityError,
    SeparationError,
    SizeError,
    UndefinedMetricError,
    UndefinedStatisticError,
)
from core.inference import bootstrap_ci, bootstrap_diff_ci, write_replicates_csv
from core.log import get_logger
from core.patchagg import aggregate_cases, apply_percentages, load_patch_grids, load_slide_manifest
from core.riskmodel import (
    ASSIGNMENT_COLUMNS,
    FEATURES,
    assignments_by_case,
    discretize_to_reference,
    ensemble_mean,
    export_assignments_csv,
    load_assignments_csv,
    loocv_risk_scores,
    reference_from_cohort,
    rule_based_assignments,
    temporal_split_scores,
)
from core.survstats import CURVE_COLUMNS, export_curve_csv, kaplan_meier, logrank, survival_at
from schemas import (
    Cohort,
    DiffRow,
    DiscordanceRow,
    HazardRatioRow,
    LogRankRow,
    MultivariableRow,
    ReferenceHistogram,
    ReportBundle,
    RiskAssignment,
    SensitivityRow,
    SurvivalCurve,
    Table1Row,
    Table2Row,
)

logger = get_logger(__name__)

CSV_REPORTS = {
    "table1.csv": Table1Row,
    "table2.csv": Table2Row,
    "table2_diffs.csv": DiffRow,
    "hr_univariable.csv": HazardRatioRow,
    "hr_per_pattern.csv": HazardRatioRow,
    "discordance10y.csv": DiscordanceRow,
    "km/logrank.csv": LogRankRow,
    "sensitivity_years.csv": SensitivityRow,
    "sensitivity_discretization.csv": SensitivityRow,
    "multivariable.csv": MultivariableRow,
}
ASSIGNMENT_FILES = {"V1": "assignments.csv", "V2": "assignments_v2.csv"}
JSON_REPORTS = ("fit_per_pattern.json", "manifest.json")

NA_NO_GRADES = "N/A: pathologist Grade Groups are evaluated on validation set 2 only"
PATTERN_SCALE = 10.0

Metric = Callable[[pd.DataFrame], float]


class Estimate(NamedTuple):
    value: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    n_effective: Optional[int] = None
    note: str = ""


@contextmanager
def stage(name: str):
    logger.info(f"🔄 Stage {name}")
    try:
        yield
    except PipelineStageError:
        raise
    except GleasonRiskError as e:
        logger.error(f"❌ Stage {name} failed: {e.detail}")
        raise PipelineStageError(name, e) from e


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(config: RunConfig) -> str:
    payload = json.dumps(json.loads(config.model_dump_json()), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# --- Metrics -----------------------------------------------------------------------

def concordance_of(column: str) -> Metric:
    def metric(frame: pd.DataFrame) -> float:
        return c_index(
            frame[column].to_numpy(float), frame["time"].to_numpy(float), frame["event"].to_numpy(bool)
        ).c_index

    return metric


def cox_concordance(column: str, with_tstage: bool, grade_coding: str, ridge: float) -> Metric:
    """C-index of the in-sample linear predictor of a grade (+ T-stage) Cox model."""

    def metric(frame: pd.DataFrame) -> float:
        try:
            X, names = grade_design(
                frame[column].to_numpy(float),
                frame["tstage_high"].to_numpy(float) if with_tstage else None,
                grade_coding,
            )
            fit = fit_cox(X, frame["time"].to_numpy(float), frame["event"].to_numpy(bool), ridge=ridge, names=names)
        except (DegenerateCovariateError, SeparationError, ConvergenceError) as e:
            raise UndefinedMetricError(f"Cox model on {column}: {e.detail}") from e
        return c_index(X @ fit.coef, frame["time"].to_numpy(float), frame["event"].to_numpy(bool)).c_index

    return metric


class RunContext:
    """Config plus the staging directory every stage writes into."""

    def __init__(self, config: RunConfig, staging: Path):
        self.config = config
        self.staging = staging

    def _dump(self, name: str, result) -> None:
        if self.config.dump_replicates:
            write_replicates_csv(result, self.staging / "replicates" / f"{name}.csv")

    def estimate(self, name: str, metric: Metric, frame: pd.DataFrame) -> Estimate:
        cfg = self.config
        try:
            result = bootstrap_ci(
                metric, frame, cfg.n_bootstrap, cfg.alpha, cfg.seed, cfg.interval, cfg.n_workers,
                keep_replicates=cfg.dump_replicates,
            )
        except (UndefinedMetricError, UndefinedStatisticError) as e:
            return Estimate(note=f"N/A: {e.detail}")
        except ReliabilityError as e:
            return Estimate(value=float(metric(frame)), note=e.detail)
        self._dump(name, result)
        return Estimate(result.point_estimate, result.ci_lower, result.ci_upper, result.n_effective)

    def estimate_diff(self, name: str, metric_a: Metric, metric_b: Metric, frame: pd.DataFrame) -> Estimate:
        cfg = self.config
        try:
            result = bootstrap_diff_ci(
                metric_a, metric_b, frame, cfg.n_bootstrap, cfg.alpha, cfg.seed, cfg.interval, cfg.n_workers,
                keep_replicates=cfg.dump_replicates,
            )
        except (UndefinedMetricError, UndefinedStatisticError) as e:
            return Estimate(note=f"N/A: {e.detail}")
        except ReliabilityError as e:
            return Estimate(value=float(metric_a(frame)) - float(metric_b(frame)), note=e.detail)
        self._dump(name, result)
        return Estimate(result.point_estimate, result.ci_lower, result.ci_upper, result.n_effective)


# --- Inputs --------------------------------------------------------------------------

def load_input(config: RunConfig) -> Cohort:
    if config.cohort_path is not None:
        return load_cohort(config.cohort_path)
    if config.simulate:
        seed = config.seed if config.sim_seed is None else config.sim_seed
        return simulate_cohort(make_simulation_params(n_cases=config.n_cases, seed=seed))
    clinical = load_cohort(config.clinical_path)
    percentages = aggregate_cases(
        load_patch_grids(config.patch_grid_path),
        load_slide_manifest(config.patch_manifest_path),
        tissue_threshold=config.tissue_threshold,
    )
    return apply_percentages(clinical, percentages)


def reference_for(config: RunConfig, graded: Cohort) -> ReferenceHistogram:
    """Explicit counts from the config, else the pathologist Grade Groups of ``graded``."""
    counts = config.reference_counts()
    reference = ReferenceHistogram(counts=counts) if counts else reference_from_cohort(graded)
    if reference.total == 0:
        raise HistogramError("reference histogram is empty")
    return reference


def _group_value(assignment: RiskAssignment) -> float:
    return np.nan if assignment.risk_group is None else float(assignment.risk_group)


def analysis_frame(
    cohort: Cohort, outcome: str, assignments: Dict[str, RiskAssignment], graded_set: bool = True
) -> pd.DataFrame:
    """One row per case: outcome, pathologist grade, T-stage, A.I. score/group.

    The ensemble column is added only for a graded set (validation set 2) whose cases all carry a grade.
    """
    times, events = outcome_arrays(cohort, outcome)
    frame = cohort_frame(cohort)[["case_id", "surgery_year", "pct_gp3", "pct_gp4", "pct_gp5", "gg", "tstage_high"]]
    frame = frame.assign(
        time=times,
        event=events,
        score=[assignments[cid].risk_score for cid in frame["case_id"]],
        group=[_group_value(assignments[cid]) for cid in frame["case_id"]],
    )
    if graded_set and len(frame) and frame["gg"].notna().all() and frame["group"].notna().all():
        frame["ensemble"] = ensemble_mean(frame["group"].to_numpy(), frame["gg"].to_numpy())
    return frame


def ensemble_assignments(frame: pd.DataFrame, reference: ReferenceHistogram) -> List[RiskAssignment]:
    """The A.I./pathologist average discretized to the reference histogram."""
    scores = [
        RiskAssignment(case_id=cid, risk_score=float(s), method="ensemble")
        for cid, s in zip(frame["case_id"], frame["ensemble"])
    ]
    return discretize_to_reference(scores, reference)


# --- Survival summaries --------------------------------------------------------------

def discordance_survival(
    ai_groups, ggs, times, events, horizon: float = 10.0, alpha: float = 0.05, ci_method: str = "log-log"
) -> List[DiscordanceRow]:
    """Survival at ``horizon`` per Grade Group, overall and split by whether the A.I. group is lower, same or higher."""
    ai = np.asarray(ai_groups, dtype=float)
    gg = np.asarray(ggs, dtype=float)
    if np.isnan(ai).any() or np.isnan(gg).any():
        raise MissingGradeError("discordance analysis needs both the A.I. group and the Grade Group for every case")
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)

    rows: List[DiscordanceRow] = []
    for g in range(1, 6):
        in_gg = gg == g
        strata = (
            ("all", in_gg),
            ("lower", in_gg & (ai < gg)),
            ("same", in_gg & (ai == gg)),
            ("higher", in_gg & (ai > gg)),
        )
        for direction, mask in strata:
            n = int(mask.sum())
            if n == 0:
                rows.append(DiscordanceRow(gg=g, direction=direction, n=0, note="N/A: no cases"))
                continue
            curve = kaplan_meier(times[mask], events[mask], alpha=alpha, ci_method=ci_method)
            s, lo, hi = survival_at(curve, horizon)
            rows.append(DiscordanceRow(gg=g, direction=direction, estimate=s, ci_lower=lo, ci_upper=hi, n=n))
    return rows


def group_km(
    times, events, groups, stratum: str, alpha: float = 0.05, ci_method: str = "log-log"
) -> Tuple[Dict[str, SurvivalCurve], LogRankRow]:
    """One curve per group and a k-sample log-rank test across them."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    groups = np.asarray(groups).astype(int)
    labels = sorted(set(groups.tolist()))
    curves = {
        f"{stratum}_{g}": kaplan_meier(times[groups == g], events[groups == g], alpha=alpha, ci_method=ci_method)
        for g in labels
    }
    comparison = "groups " + "/".join(str(g) for g in labels)
    if len(labels) < 2:
        return curves, LogRankRow(stratum=stratum, comparison=comparison, n=len(times), note="skipped: single group")
    try:
        result = logrank(
            [times[groups == g] for g in labels], [events[groups == g] for g in labels], [str(g) for g in labels]
        )
    except UndefinedStatisticError as e:
        return curves, LogRankRow(stratum=stratum, comparison=comparison, n=len(times), note=f"N/A: {e.detail}")
    return curves, LogRankRow(
        stratum=stratum, comparison=comparison, chi2=result.chi2, df=result.df, p_value=result.p_value, n=len(times)
    )


def substratify_km(
    cohort: Cohort,
    assignments: Dict[str, RiskAssignment],
    within: str,
    outcome: str = "DSS",
    prefix: str = "",
    alpha: float = 0.05,
    ci_method: str = "log-log",
) -> Tuple[Dict[str, SurvivalCurve], List[LogRankRow]]:
    """A.I. groups 1-2 vs 3-5 inside each pathologist Grade Group (``within="gg"``)
    or each T-stage category (``within="tstage"``)."""
    times, events = outcome_arrays(cohort, outcome)
    ai = np.array([assignments[c.case_id].risk_group for c in cohort.cases], dtype=float)
    if np.isnan(ai).any():
        raise MissingGradeError("sub-stratification needs a risk group for every case")
    if within == "gg":
        keys = [None if c.pathologist_gg is None else f"gg{c.pathologist_gg}" for c in cohort.cases]
    elif within == "tstage":
        keys = [None if c.tstage_high is None else ("t3-4" if c.tstage_high else "t1-2") for c in cohort.cases]
    else:
        raise ConfigError(f"unknown sub-stratification {within!r}")

    curves: Dict[str, SurvivalCurve] = {}
    rows: List[LogRankRow] = []
    comparison = "ai1-2 vs ai3-5"
    for key in sorted({k for k in keys if k is not None}):
        in_stratum = np.array([k == key for k in keys])
        stratum = f"{prefix}{key}"
        low = in_stratum & (ai <= 2)
        high = in_stratum & (ai >= 3)
        for side, mask in (("ai1-2", low), ("ai3-5", high)):
            if mask.any():
                curves[f"{stratum}_{side}"] = kaplan_meier(times[mask], events[mask], alpha=alpha, ci_method=ci_method)
        n = int(in_stratum.sum())
        if not low.any() or not high.any():
            rows.append(
                LogRankRow(stratum=stratum, comparison=comparison, n=n, note="skipped: only one side of the split has cases")
            )
            continue
        try:
            result = logrank([times[low], times[high]], [events[low], events[high]], ["ai1-2", "ai3-5"])
        except UndefinedStatisticError as e:
            rows.append(LogRankRow(stratum=stratum, comparison=comparison, n=n, note=f"N/A: {e.detail}"))
            continue
        rows.append(
            LogRankRow(
                stratum=stratum, comparison=comparison, chi2=result.chi2, df=result.df, p_value=result.p_value, n=n
            )
        )
    return curves, rows


# --- Hazard ratios ------------------------------------------------------------------

def group_hazard_rows(
    validation_set: str, variable: str, groups, times, events, alpha: float = 0.05
) -> List[HazardRatioRow]:
    groups = np.asarray(groups).astype(int)
    note = ""
    try:
        hrs = fit_univariable_groups(groups, times, events, reference=1, alpha=alpha)
    except (SeparationError, ConvergenceError) as e:
        logger.warning(f"⚠️ {validation_set} {variable}: {e.detail}; refitting with ridge {settings.FALLBACK_RIDGE:g}")
        hrs = fit_univariable_groups(groups, times, events, reference=1, ridge=settings.FALLBACK_RIDGE, alpha=alpha)
        note = f"ridge {settings.FALLBACK_RIDGE:g} fallback: {e.detail}"
    rows = [HazardRatioRow(validation_set=validation_set, variable=variable, level="1", hr=1.0, note="reference")]
    for h in hrs:
        rows.append(
            HazardRatioRow(
                validation_set=validation_set,
                variable=variable,
                level=h.name.split("_", 1)[1],
                hr=h.hr,
                ci_lower=h.ci_lower,
                ci_upper=h.ci_upper,
                p_value=h.p_value,
                scale=h.scale,
                note=note,
            )
        )
    return rows


def pattern_hazard_rows(validation_set: str, frame: pd.DataFrame, alpha: float = 0.05) -> Tuple[List[HazardRatioRow], dict]:
    """Hazard ratio per 10 percentage points of pattern 4 and pattern 5."""
    X = frame[list(FEATURES)].to_numpy(float)
    times, events = frame["time"].to_numpy(float), frame["event"].to_numpy(bool)
    note = ""
    try:
        fit = fit_cox(X, times, events, names=FEATURES)
    except (SeparationError, ConvergenceError) as e:
        logger.warning(f"⚠️ {validation_set} pattern fit: {e.detail}; refitting with ridge {settings.FALLBACK_RIDGE:g}")
        fit = fit_cox(X, times, events, ridge=settings.FALLBACK_RIDGE, names=FEATURES)
        note = f"ridge {settings.FALLBACK_RIDGE:g} fallback: {e.detail}"
    scales = [PATTERN_SCALE] * len(FEATURES)
    rows = [
        HazardRatioRow(
            validation_set=validation_set,
            variable=h.name,
            level=f"per {PATTERN_SCALE:g} percentage points",
            hr=h.hr,
            ci_lower=h.ci_lower,
            ci_upper=h.ci_upper,
            p_value=h.p_value,
            scale=h.scale,
            note=note,
        )
        for h in hazard_ratios(fit, scales, alpha)
    ]
    return rows, fit_report(fit, scales, alpha)


# --- Report sections ------------------------------------------------------------------

def table2_section(ctx: RunContext, frames: Dict[str, pd.DataFrame]) -> Tuple[List[Table2Row], List[DiffRow]]:
    rows: List[Table2Row] = []
    diffs: List[DiffRow] = []
    metrics = (
        ("pathologist_gg", "gg"),
        ("ai_risk_score", "score"),
        ("ai_risk_group", "group"),
        ("ensemble_mean", "ensemble"),
    )
    comparisons = (
        ("ai_risk_score - pathologist_gg", "score", "gg"),
        ("ai_risk_group - pathologist_gg", "group", "gg"),
        ("ai_risk_score - ai_risk_group", "score", "group"),
    )
    for vs, frame in frames.items():
        graded = vs == "V2" and "ensemble" in frame.columns
        for name, column in metrics:
            if column in ("gg", "ensemble") and not graded:
                rows.append(Table2Row(validation_set=vs, metric=name, n=len(frame), note=NA_NO_GRADES))
                continue
            est = ctx.estimate(f"{vs}_{name}", concordance_of(column), frame)
            rows.append(
                Table2Row(
                    validation_set=vs, metric=name, c_index=est.value, ci_lower=est.ci_lower, ci_upper=est.ci_upper,
                    n=len(frame), n_effective=est.n_effective, note=est.note,
                )
            )
        for label, a, b in comparisons:
            if "gg" in (a, b) and not graded:
                diffs.append(DiffRow(validation_set=vs, comparison=label, note=NA_NO_GRADES))
                continue
            est = ctx.estimate_diff(f"{vs}_{a}_minus_{b}", concordance_of(a), concordance_of(b), frame)
            diffs.append(
                DiffRow(
                    validation_set=vs, comparison=label, diff=est.value, ci_lower=est.ci_lower,
                    ci_upper=est.ci_upper, n_effective=est.n_effective, note=est.note,
                )
            )
    return rows, diffs


def sensitivity_years_section(
    ctx: RunContext, cohort: Cohort, scores: Sequence[RiskAssignment]
) -> List[SensitivityRow]:
    cfg = ctx.config
    by_case = assignments_by_case(scores)
    rows: List[SensitivityRow] = []
    years = sorted({cfg.validation_min_year, cfg.sensitivity_min_year}, reverse=True)
    for min_year in years:
        subset = select_validation_set(cohort, "V2", min_year)
        setting = f"surgery_year >= {min_year}"
        if len(subset) == 0:
            rows.append(SensitivityRow(analysis="years", validation_set="V2", setting=setting, note="N/A: no cases"))
            continue
        reference = reference_for(cfg, subset)
        if min_year != cfg.validation_min_year:
            # widened years: explicit counts describe validation set 2, carried over as frequencies
            reference = reference.rescaled(len(subset))
        grouped = discretize_to_reference([by_case[cid] for cid in subset.case_ids], reference)
        frame = analysis_frame(subset, cfg.outcome, assignments_by_case(grouped))
        for name, column in (("pathologist_gg", "gg"), ("ai_risk_score", "score"), ("ai_risk_group", "group")):
            est = ctx.estimate(f"years{min_year}_{name}", concordance_of(column), frame)
            rows.append(
                SensitivityRow(
                    analysis=f"years:{name}", validation_set="V2", setting=setting, c_index=est.value,
                    ci_lower=est.ci_lower, ci_upper=est.ci_upper, n=len(frame), note=est.note,
                )
            )
    return rows


def sensitivity_discretization_section(
    ctx: RunContext, cohort: Cohort, sets: Dict[str, Cohort], frames: Dict[str, pd.DataFrame]
) -> List[SensitivityRow]:
    cfg = ctx.config
    rows: List[SensitivityRow] = []

    def add(vs: str, setting: str, frame: Optional[pd.DataFrame], note: str = "") -> None:
        if frame is None:
            rows.append(SensitivityRow(analysis="discretization", validation_set=vs, setting=setting, note=note))
            return
        est = ctx.estimate(f"{vs}_{setting}", concordance_of("group"), frame)
        rows.append(
            SensitivityRow(
                analysis="discretization", validation_set=vs, setting=setting, c_index=est.value,
                ci_lower=est.ci_lower, ci_upper=est.ci_upper, n=len(frame), note=est.note,
            )
        )

    for vs, frame in frames.items():
        add(vs, "loocv", frame)

        if vs == "V1":
            add(vs, "temporal_split", None, "N/A: training years are part of validation set 1")
        else:
            train = cohort.derive(
                [c for c in cohort.cases if c.surgery_year <= cfg.temporal_train_max_year],
                label=f"{cohort.label}:train<={cfg.temporal_train_max_year}",
            )
            try:
                scored = temporal_split_scores(train, sets[vs], cfg.outcome)
            except SizeError as e:
                add(vs, "temporal_split", None, f"N/A: {e.detail}")
            else:
                grouped = assignments_by_case(
                    discretize_to_reference(scored, reference_for(cfg, sets["V2"]))
                )
                add(vs, "temporal_split", frame.assign(group=[float(grouped[c].risk_group) for c in frame["case_id"]]))

        ruled = assignments_by_case(rule_based_assignments(sets[vs]))
        add(vs, "rule_based", frame.assign(group=[float(ruled[c].risk_group) for c in frame["case_id"]]))
    return rows


def multivariable_section(ctx: RunContext, frame: pd.DataFrame) -> List[MultivariableRow]:
    """C-index grid of grade-type features, alone and with T-stage, on graded cases with a known T-stage."""
    cfg = ctx.config
    staged = frame[frame["tstage_high"].notna()].reset_index(drop=True)
    rows: List[MultivariableRow] = []
    features = ("pathologist_gg", "ai_risk_group", "average", "average_discretized")
    columns = {
        "pathologist_gg": "gg",
        "ai_risk_group": "group",
        "average": "ensemble",
        "average_discretized": "ensemble_group",
    }
    for feature in features:
        for with_tstage in (False, True):
            if len(staged) == 0:
                rows.append(
                    MultivariableRow(validation_set="V2", features=feature, with_tstage=with_tstage, note="N/A: no cases")
                )
                continue
            metric = cox_concordance(columns[feature], with_tstage, cfg.grade_coding, cfg.ridge)
            suffix = "_tstage" if with_tstage else ""
            est = ctx.estimate(f"multivariable_{feature}{suffix}", metric, staged)
            rows.append(
                MultivariableRow(
                    validation_set="V2", features=feature, with_tstage=with_tstage, c_index=est.value,
                    ci_lower=est.ci_lower, ci_upper=est.ci_upper, n=len(staged), note=est.note,
                )
            )
    return rows


# --- Files ---------------------------------------------------------------------------

def write_rows(path: Path, rows: Sequence[pydantic.BaseModel], model) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(model.model_fields)
    pd.DataFrame([r.model_dump() for r in rows], columns=columns).to_csv(path, index=False, lineterminator="\n")


def versions() -> Dict[str, str]:
    return {
        "gleasonrisk": core.__version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
    }


def _staging_dir(out_dir: Path) -> Path:
    if out_dir.exists() and any(out_dir.iterdir()) and not (out_dir / "manifest.json").is_file():
        raise ConfigError(f"output directory {out_dir} is not empty and holds no previous run")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))


def run_pipeline(config: RunConfig) -> ReportBundle:
    out_dir = Path(config.out_dir)
    staging = _staging_dir(out_dir)
    try:
        bundle = _run(RunContext(config, staging))
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if out_dir.exists():
        shutil.rmtree(out_dir)
    staging.rename(out_dir)
    logger.info(f"✅ Reports written to {out_dir}")
    return bundle


def _run(ctx: RunContext) -> ReportBundle:
    cfg = ctx.config
    out = ctx.staging
    bundle = ReportBundle()

    with stage("load"):
        cohort = load_input(cfg)
    with stage("exclusions"):
        cohort = apply_exclusions(cohort)
    with stage("validation_sets"):
        sets = {
            "V1": select_validation_set(cohort, "V1"),
            "V2": select_validation_set(cohort, "V2", cfg.validation_min_year),
        }
        if len(sets["V2"]) == 0:
            raise SizeError("validation set 2 is empty: no graded cases in the selected years")
        logger.info(f"✅ Validation set 1: {len(sets['V1'])} cases, validation set 2: {len(sets['V2'])} cases")

    with stage("risk_scores"):
        scores = loocv_risk_scores(sets["V1"], cfg.outcome, n_workers=cfg.n_workers)
        score_by_case = assignments_by_case(scores)

    with stage("discretization"):
        reference = reference_for(cfg, sets["V2"])
        for vs, subset in sets.items():
            # set 2 must match the reference exactly; set 1 takes its frequencies
            target = reference if vs == "V2" else reference.rescaled(len(subset))
            grouped = discretize_to_reference([score_by_case[cid] for cid in subset.case_ids], target)
            export_assignments_csv(grouped, out / ASSIGNMENT_FILES[vs])

    with stage("table1"):
        bundle.table1 = [row for vs, subset in sets.items() for row in describe_cohort(subset, vs)]
        write_rows(out / "table1.csv", bundle.table1, Table1Row)

    with stage("table2"):
        # groups are read back from the files just written
        frames = {
            vs: analysis_frame(
                subset, cfg.outcome, assignments_by_case(load_assignments_csv(out / ASSIGNMENT_FILES[vs])), vs == "V2"
            )
            for vs, subset in sets.items()
        }
        v2 = frames["V2"]
        ensemble_groups = assignments_by_case(ensemble_assignments(v2, reference))
        frames["V2"] = v2.assign(ensemble_group=[float(ensemble_groups[c].risk_group) for c in v2["case_id"]])
        bundle.table2, bundle.table2_diffs = table2_section(ctx, frames)
        write_rows(out / "table2.csv", bundle.table2, Table2Row)
        write_rows(out / "table2_diffs.csv", bundle.table2_diffs, DiffRow)

    with stage("hazard_ratios"):
        fits = {}
        for vs, frame in frames.items():
            times, events = frame["time"].to_numpy(float), frame["event"].to_numpy(bool)
            bundle.hr_univariable += group_hazard_rows(vs, "ai_risk_group", frame["group"], times, events, cfg.alpha)
            if vs == "V2":
                bundle.hr_univariable += group_hazard_rows(vs, "pathologist_gg", frame["gg"], times, events, cfg.alpha)
            else:
                bundle.hr_univariable.append(
                    HazardRatioRow(validation_set=vs, variable="pathologist_gg", level="", note=NA_NO_GRADES)
                )
            rows, fits[vs] = pattern_hazard_rows(vs, frame, cfg.alpha)
            bundle.hr_per_pattern += rows
        write_rows(out / "hr_univariable.csv", bundle.hr_univariable, HazardRatioRow)
        write_rows(out / "hr_per_pattern.csv", bundle.hr_per_pattern, HazardRatioRow)
        (out / "fit_per_pattern.json").write_text(json.dumps(fits, indent=2) + "\n", encoding="utf-8")

    with stage("discordance"):
        bundle.discordance10y = discordance_survival(
            v2["group"], v2["gg"], v2["time"], v2["event"], cfg.horizon_years, cfg.alpha, cfg.ci_method
        )
        write_rows(out / "discordance10y.csv", bundle.discordance10y, DiscordanceRow)

    with stage("kaplan_meier"):
        curves: Dict[str, SurvivalCurve] = {}
        logrank_rows: List[LogRankRow] = []
        for stratum, frame, column in (("v1_ai", frames["V1"], "group"), ("v2_ai", v2, "group"), ("v2_gg", v2, "gg")):
            found, row = group_km(frame["time"], frame["event"], frame[column], stratum, cfg.alpha, cfg.ci_method)
            curves.update(found)
            logrank_rows.append(row)
        for vs, within, prefix in (("V2", "gg", "v2_"), ("V1", "tstage", "v1_")):
            found, rows = substratify_km(
                sets[vs], assignments_by_case(load_assignments_csv(out / ASSIGNMENT_FILES[vs])), within,
                cfg.outcome, prefix, cfg.alpha, cfg.ci_method,
            )
            curves.update(found)
            logrank_rows += rows
        for name, curve in curves.items():
            export_curve_csv(curve, out / "km" / f"{name}.km.csv")
            bundle.km_curves[name] = f"km/{name}.km.csv"
        bundle.logrank = logrank_rows
        write_rows(out / "km" / "logrank.csv", bundle.logrank, LogRankRow)

    with stage("sensitivity"):
        bundle.sensitivity_years = sensitivity_years_section(ctx, cohort, scores)
        bundle.sensitivity_discretization = sensitivity_discretization_section(ctx, cohort, sets, frames)
        write_rows(out / "sensitivity_years.csv", bundle.sensitivity_years, SensitivityRow)
        write_rows(out / "sensitivity_discretization.csv", bundle.sensitivity_discretization, SensitivityRow)

    with stage("multivariable"):
        bundle.multivariable = multivariable_section(ctx, frames["V2"])
        write_rows(out / "multivariable.csv", bundle.multivariable, MultivariableRow)

    with stage("manifest"):
        files = {
            p.relative_to(out).as_posix(): sha256_file(p) for p in sorted(out.rglob("*")) if p.is_file()
        }
        bundle.manifest = {
            "seed": cfg.seed,
            "config": json.loads(cfg.model_dump_json()),
            "config_sha256": config_hash(cfg),
            "versions": versions(),
            "cohort_label": cohort.label,
            "n_cases": {vs: len(subset) for vs, subset in sets.items()},
            "exclusions": len(cohort.exclusion_log),
            "km_curves": bundle.km_curves,
            "files": files,
            "created_at": datetime.now(timezone.utc).isoformat(),
        }
        (out / "manifest.json").write_text(json.dumps(bundle.manifest, indent=2) + "\n", encoding="utf-8")
    return bundle


def validate_bundle(out_dir) -> List[str]:
    """Problems with a finished run directory: missing files, wrong headers, hash mismatches."""
    out_dir = Path(out_dir)
    problems: List[str] = []

    def check_header(rel: str, expected: List[str]) -> None:
        path = out_dir / rel
        if not path.is_file():
            problems.append(f"missing {rel}")
            return
        header = list(pd.read_csv(path, nrows=0).columns)
        if header != expected:
            problems.append(f"{rel}: header {','.join(header)} != {','.join(expected)}")

    for rel, model in CSV_REPORTS.items():
        check_header(rel, list(model.model_fields))
    for rel in ASSIGNMENT_FILES.values():
        check_header(rel, ASSIGNMENT_COLUMNS)

    documents = {}
    for rel in JSON_REPORTS:
        path = out_dir / rel
        if not path.is_file():
            problems.append(f"missing {rel}")
            continue
        try:
            documents[rel] = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            problems.append(f"{rel}: invalid JSON ({e.msg})")

    manifest = documents.get("manifest.json")
    if manifest is not None:
        for rel in manifest.get("km_curves", {}).values():
            check_header(rel, CURVE_COLUMNS)
        for rel, digest in manifest.get("files", {}).items():
            path = out_dir / rel
            if not path.is_file():
                problems.append(f"missing {rel}")
            elif sha256_file(path) != digest:
                problems.append(f"{rel}: content does not match the manifest hash")
    return problems

"""A.I. risk scores and risk groups.

Scores are Cox linear predictors on (pct_gp4, pct_gp5); pct_gp3 is left out because the
three percentages sum to 100. Groups come either from discretizing scores to a reference
Grade Group histogram or from the rule-based Gleason score mapping.
"""

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.cohort import outcome_arrays
from core.config import settings
from core.coxph import CoxData, fit_prepared, linear_predictors
from core.errors import (
    ConvergenceError,
    DataError,
    DegenerateCovariateError,
    DisjointnessError,
    FoldError,
    HistogramError,
    MissingGradeError,
    SchemaError,
    SeparationError,
    SizeError,
    UndefinedGradeError,
)
from core.log import get_logger
from schemas import Cohort, CoxFit, ReferenceHistogram, RiskAssignment

logger = get_logger(__name__)

FEATURES = ("pct_gp4", "pct_gp5")
ASSIGNMENT_COLUMNS = ["case_id", "method", "risk_score", "risk_group"]

# (primary, secondary) Gleason patterns -> Grade Group
GRADE_GROUPS: Dict[Tuple[int, int], int] = {
    (3, 3): 1,
    (3, 4): 2,
    (4, 3): 3,
    (4, 4): 4, (3, 5): 4, (5, 3): 4,
    (4, 5): 5, (5, 4): 5, (5, 5): 5,
}


def feature_matrix(cohort: Cohort) -> np.ndarray:
    return np.array([[c.pct_gp4, c.pct_gp5] for c in cohort.cases], dtype=float).reshape(len(cohort), 2)


def _fit_with_fallback(data: CoxData, context: str) -> CoxFit:
    """Unpenalized fit; separation or non-convergence retries once with the fallback ridge."""
    try:
        return fit_prepared(data, names=FEATURES)
    except (SeparationError, ConvergenceError) as e:
        logger.warning(f"⚠️ {context}: {e.detail}; refitting with ridge {settings.FALLBACK_RIDGE:g}")
    return fit_prepared(data, ridge=settings.FALLBACK_RIDGE, names=FEATURES)


def _check_fit_size(cohort: Cohort, events: np.ndarray) -> None:
    if len(cohort) < settings.LOOCV_MIN_CASES:
        raise SizeError(f"risk model needs at least {settings.LOOCV_MIN_CASES} cases, got {len(cohort)}")
    if int(events.sum()) < 2:
        raise SizeError(f"risk model needs at least 2 events, got {int(events.sum())}")


# --- Continuous scores --------------------------------------------------------------

def in_sample_risk_scores(cohort: Cohort, outcome: str = "DSS") -> List[RiskAssignment]:
    """Scores from a single fit on the whole cohort (no optimism adjustment)."""
    times, events = outcome_arrays(cohort, outcome)
    _check_fit_size(cohort, events)
    X = feature_matrix(cohort)
    fit = _fit_with_fallback(CoxData.build(X, times, events), "in-sample fit")
    scores = linear_predictors(fit, X)
    return [
        RiskAssignment(case_id=cid, risk_score=float(s), method="in_sample")
        for cid, s in zip(cohort.case_ids, scores)
    ]


def loocv_risk_scores(cohort: Cohort, outcome: str = "DSS", n_workers: Optional[int] = None) -> List[RiskAssignment]:
    """Out-of-fold scores: case i is scored by the model fit on every other case.

    Each fold starts from beta = 0, so results do not depend on fold order or thread count.
    """
    times, events = outcome_arrays(cohort, outcome)
    _check_fit_size(cohort, events)
    X = feature_matrix(cohort)
    full = CoxData.build(X, times, events)
    for k, name in enumerate(FEATURES):
        if np.ptp(X[:, k]) == 0:
            raise DegenerateCovariateError(f"{name} is constant across the cohort")
    ids = cohort.case_ids

    def score_fold(i: int) -> float:
        try:
            fit = _fit_with_fallback(full.without(i), f"fold {ids[i]}")
        except (SeparationError, ConvergenceError, DegenerateCovariateError, DataError) as e:
            raise FoldError(f"fold for case {ids[i]} failed: {e.detail}", ids[i]) from e
        return float(np.dot(fit.coef, X[i]))

    workers = settings.N_WORKERS if n_workers is None else n_workers
    logger.info(f"🔄 Fitting {len(ids)} leave-one-out folds ({workers} worker(s))")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score_fold, range(len(ids))))
    else:
        scores = [score_fold(i) for i in range(len(ids))]
    logger.info(f"✅ LOOCV scores ready for {len(ids)} cases")
    return [RiskAssignment(case_id=cid, risk_score=s, method="loocv") for cid, s in zip(ids, scores)]


def temporal_split_scores(train: Cohort, eval_cohort: Cohort, outcome: str = "DSS") -> List[RiskAssignment]:
    """One fit on ``train``; ``eval_cohort`` is scored with the frozen coefficients."""
    overlap = sorted(set(train.case_ids) & set(eval_cohort.case_ids))
    if overlap:
        shown = ", ".join(overlap[:5])
        raise DisjointnessError(f"train and eval share {len(overlap)} case(s): {shown}")
    times, events = outcome_arrays(train, outcome)
    _check_fit_size(train, events)
    fit = _fit_with_fallback(CoxData.build(feature_matrix(train), times, events), "temporal-split fit")
    scores = linear_predictors(fit, feature_matrix(eval_cohort))
    logger.info(f"✅ Temporal split: trained on {len(train)}, scored {len(eval_cohort)} cases")
    return [
        RiskAssignment(case_id=cid, risk_score=float(s), method="temporal_split")
        for cid, s in zip(eval_cohort.case_ids, scores)
    ]


# --- Discrete groups -----------------------------------------------------------------

def reference_from_cohort(cohort: Cohort) -> ReferenceHistogram:
    """Pathologist Grade Group counts; every case must carry a grade."""
    missing = [c.case_id for c in cohort.cases if c.pathologist_gg is None]
    if missing:
        raise MissingGradeError(f"{len(missing)} case(s) have no pathologist Grade Group (e.g. {missing[0]})")
    counts = [0] * 5
    for c in cohort.cases:
        counts[c.pathologist_gg - 1] += 1
    return ReferenceHistogram(counts=tuple(counts))


def discretize_to_reference(assignments: Sequence[RiskAssignment], reference: ReferenceHistogram) -> List[RiskAssignment]:
    """Fills groups 1..5 in ascending (score, case_id) order with exactly ``reference.counts`` cases.

    Returned in the input order.
    """
    if reference.total != len(assignments):
        raise HistogramError(
            f"reference histogram sums to {reference.total} but there are {len(assignments)} assignments"
        )
    order = sorted(range(len(assignments)), key=lambda k: (assignments[k].risk_score, assignments[k].case_id))
    groups = np.repeat(np.arange(1, 6), reference.counts)
    out: List[Optional[RiskAssignment]] = [None] * len(assignments)
    for rank, k in enumerate(order):
        out[k] = assignments[k].model_copy(update={"risk_group": int(groups[rank])})
    return out


def rule_based_gg(
    pct_gp3: float, pct_gp4: float, pct_gp5: float, secondary_min_share: Optional[float] = None
) -> int:
    """Grade Group from pattern percentages.

    Primary is the largest pattern (ties to the higher pattern). Secondary is the next largest
    when it reaches ``secondary_min_share`` percent; otherwise a higher-grade minor pattern
    still counts as secondary, else secondary equals primary.
    """
    min_share = settings.SECONDARY_PATTERN_MIN_SHARE if secondary_min_share is None else secondary_min_share
    raw = np.array([pct_gp3, pct_gp4, pct_gp5], dtype=float)
    if np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise DataError("pattern percentages must be finite and nonnegative")
    total = raw.sum()
    if total <= 0:
        raise UndefinedGradeError("Grade Group is undefined without tumor")
    share = 100.0 * raw / total
    patterns = (3, 4, 5)

    # largest share first, higher pattern first on ties
    ranked = sorted(range(3), key=lambda k: (-share[k], -k))
    primary = patterns[ranked[0]]
    runner_up = ranked[1]
    if share[runner_up] >= min_share:
        secondary = patterns[runner_up]
    else:
        present = [patterns[k] for k in range(3) if share[k] > 0]
        highest = max(present)
        secondary = highest if highest > primary else primary
    return GRADE_GROUPS[(primary, secondary)]


def rule_based_assignments(cohort: Cohort) -> List[RiskAssignment]:
    out = []
    for c in cohort.cases:
        try:
            gg = rule_based_gg(c.pct_gp3, c.pct_gp4, c.pct_gp5)
        except UndefinedGradeError as e:
            raise UndefinedGradeError(f"case {c.case_id}: {e.detail}") from e
        out.append(RiskAssignment(case_id=c.case_id, risk_score=float(gg), risk_group=gg, method="rule_based"))
    return out


def ensemble_mean(ai_group, pathologist_gg):
    """Arithmetic mean of A.I. risk group and pathologist Grade Group (scalars or arrays)."""
    if pathologist_gg is None or ai_group is None:
        raise MissingGradeError("ensemble needs both the A.I. group and the pathologist Grade Group")
    ai = np.asarray(ai_group, dtype=float)
    gg = np.asarray(pathologist_gg, dtype=float)
    if ai.shape != gg.shape:
        raise DataError("A.I. groups and Grade Groups must have the same shape")
    if np.any(np.isnan(ai)) or np.any(np.isnan(gg)):
        raise MissingGradeError("ensemble needs both the A.I. group and the pathologist Grade Group")
    if np.any((ai < 1) | (ai > 5)) or np.any((gg < 1) | (gg > 5)):
        raise DataError("groups must lie in 1..5")
    mean = (ai + gg) / 2.0
    return float(mean) if mean.ndim == 0 else mean


# --- Files -----------------------------------------------------------------------

def export_assignments_csv(assignments: Sequence[RiskAssignment], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [
        {
            "case_id": a.case_id,
            "method": a.method,
            "risk_score": repr(float(a.risk_score)),
            "risk_group": "" if a.risk_group is None else str(a.risk_group),
        }
        for a in assignments
    ]
    pd.DataFrame(rows, columns=ASSIGNMENT_COLUMNS).to_csv(path, index=False, lineterminator="\n")


def load_assignments_csv(path) -> List[RiskAssignment]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"assignments file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != ASSIGNMENT_COLUMNS:
        raise SchemaError(f"assignments header must be {','.join(ASSIGNMENT_COLUMNS)}")
    return [
        RiskAssignment(
            case_id=row.case_id,
            method=row.method,
            risk_score=float(row.risk_score),
            risk_group=None if row.risk_group == "" else int(row.risk_group),
        )
        for row in frame.itertuples(index=False)
    ]


def assignments_by_case(assignments: Sequence[RiskAssignment]) -> Dict[str, RiskAssignment]:
    return {a.case_id: a for a in assignments}

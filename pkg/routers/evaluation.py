from pathlib import Path

from core.cli import CommandRouter, arg
from core.cohort import apply_exclusions, load_cohort
from core.errors import DataError
from core.inference import bootstrap_ci, bootstrap_diff_ci
from core.pipeline import analysis_frame, concordance_of, group_km
from core.riskmodel import assignments_by_case, load_assignments_csv
from core.survstats import export_curve_csv

router = CommandRouter(tags=["evaluation"])


def _frame(args):
    assignments = assignments_by_case(load_assignments_csv(args.assignments))
    cohort = apply_exclusions(load_cohort(args.cohort))
    cohort = cohort.derive([c for c in cohort.cases if c.case_id in assignments])
    if len(cohort) == 0:
        raise DataError("no cohort case has an assignment")
    return analysis_frame(cohort, args.outcome, assignments)


@router.command(
    "evaluate",
    help="C-index with a bootstrap CI for one score column, or the paired difference of two",
    arguments=[
        arg("--cohort", type=Path, required=True),
        arg("--assignments", type=Path, required=True),
        arg("--metric", choices=["score", "group", "gg"], default="score"),
        arg("--versus", choices=["score", "group", "gg"], default=None),
        arg("--outcome", choices=["DSS", "OS"], default="DSS"),
        arg("--n-bootstrap", type=int, default=1000),
        arg("--seed", type=int, default=20210623),
        arg("--alpha", type=float, default=0.05),
        arg("--interval", choices=["percentile", "basic"], default="percentile"),
    ],
)
def evaluate(args):
    frame = _frame(args)
    if "gg" in (args.metric, args.versus):
        frame = frame[frame["gg"].notna()].reset_index(drop=True)
    if args.versus is None:
        result = bootstrap_ci(concordance_of(args.metric), frame, args.n_bootstrap, args.alpha, args.seed, args.interval)
    else:
        result = bootstrap_diff_ci(
            concordance_of(args.metric), concordance_of(args.versus), frame,
            args.n_bootstrap, args.alpha, args.seed, args.interval,
        )
    return {"metric": args.metric, "versus": args.versus, "n": len(frame), **result.model_dump(exclude_none=True)}


@router.command(
    "km",
    help="Kaplan-Meier curves per risk group and the log-rank test across groups",
    arguments=[
        arg("--cohort", type=Path, required=True),
        arg("--assignments", type=Path, required=True),
        arg("--outcome", choices=["DSS", "OS"], default="DSS"),
        arg("--alpha", type=float, default=0.05),
        arg("--ci-method", choices=["log-log", "plain"], default="log-log"),
        arg("--out", type=Path, required=True, help="directory for <stratum>.km.csv files"),
    ],
)
def km(args):
    frame = _frame(args)
    if frame["group"].isna().any():
        raise DataError("assignments carry no risk groups; run discretize first")
    curves, row = group_km(frame["time"], frame["event"], frame["group"], "groups", args.alpha, args.ci_method)
    for name, curve in curves.items():
        export_curve_csv(curve, args.out / f"{name}.km.csv")
    return {"curves": sorted(curves), "logrank": row.model_dump()}

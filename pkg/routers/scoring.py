from pathlib import Path

from core.cli import CommandRouter, arg
from core.cohort import apply_exclusions, load_cohort, select_validation_set
from core.config import settings
from core.errors import HistogramError, ParameterError
from core.riskmodel import (
    discretize_to_reference,
    export_assignments_csv,
    in_sample_risk_scores,
    load_assignments_csv,
    loocv_risk_scores,
    reference_from_cohort,
    rule_based_assignments,
    temporal_split_scores,
)
from schemas import ReferenceHistogram

router = CommandRouter(tags=["scoring"])


def _parse_reference(raw: str) -> ReferenceHistogram:
    parts = raw.split(",")
    if len(parts) != 5 or not all(p.strip().isdigit() for p in parts):
        raise ParameterError("reference counts must be five comma-separated integers")
    return ReferenceHistogram(counts=tuple(int(p) for p in parts))


@router.command(
    "score",
    help="A.I. risk scores for a cohort (LOOCV by default)",
    arguments=[
        arg("--cohort", type=Path, required=True),
        arg("--method", choices=["loocv", "in_sample", "temporal_split", "rule_based"], default="loocv"),
        arg("--validation-set", choices=["V1", "V2"], default="V1"),
        arg("--min-year", type=int, default=2000),
        arg("--train-max-year", type=int, default=1999, help="temporal split: train on years up to this"),
        arg("--outcome", choices=["DSS", "OS"], default="DSS"),
        arg("--workers", type=int, default=settings.N_WORKERS),
        arg("--out", type=Path, required=True, help="assignments CSV"),
    ],
)
def score(args):
    cohort = apply_exclusions(load_cohort(args.cohort))
    target = select_validation_set(cohort, args.validation_set, args.min_year)
    if args.method == "loocv":
        assignments = loocv_risk_scores(target, args.outcome, n_workers=args.workers)
    elif args.method == "in_sample":
        assignments = in_sample_risk_scores(target, args.outcome)
    elif args.method == "temporal_split":
        train = cohort.derive([c for c in cohort.cases if c.surgery_year <= args.train_max_year])
        assignments = temporal_split_scores(train, target, args.outcome)
    else:
        assignments = rule_based_assignments(target)
    export_assignments_csv(assignments, args.out)
    return {"method": args.method, "cases": len(assignments), "out": str(args.out)}


@router.command(
    "discretize",
    help="Assign risk groups so group sizes match a reference Grade Group histogram",
    arguments=[
        arg("--assignments", type=Path, required=True),
        arg("--reference", default="pathologist", help="'pathologist' (needs --cohort) or five comma-separated counts"),
        arg("--cohort", type=Path, default=None, help="cohort whose validation set 2 Grade Groups are the reference"),
        arg("--min-year", type=int, default=2000),
        arg("--rescale", action="store_true", help="keep the reference frequencies when its total differs"),
        arg("--out", type=Path, required=True),
    ],
)
def discretize(args):
    assignments = load_assignments_csv(args.assignments)
    if args.reference == "pathologist":
        if args.cohort is None:
            raise ParameterError("--reference pathologist needs --cohort")
        graded = select_validation_set(apply_exclusions(load_cohort(args.cohort)), "V2", args.min_year)
        reference = reference_from_cohort(graded)
    else:
        reference = _parse_reference(args.reference)
    if reference.total == 0:
        raise HistogramError("reference histogram is empty")
    target = reference.rescaled(len(assignments)) if args.rescale else reference
    grouped = discretize_to_reference(assignments, target)
    export_assignments_csv(grouped, args.out)
    sizes = [sum(a.risk_group == g for a in grouped) for g in range(1, 6)]
    return {"reference": list(reference.counts), "rescaled": args.rescale, "group_sizes": sizes, "out": str(args.out)}

from pathlib import Path

from core.cli import CommandRouter, arg
from core.cohort import (
    apply_exclusions,
    load_cohort,
    make_simulation_params,
    save_cohort,
    select_validation_set,
    simulate_cohort,
)
from core.log import get_logger

router = CommandRouter(tags=["cohort"])
logger = get_logger(__name__)


@router.command(
    "simulate",
    help="Write a synthetic cohort CSV (plus sidecar) with known pattern effects",
    arguments=[
        arg("--out", type=Path, required=True, help="cohort CSV to write"),
        arg("--n-cases", type=int, default=2807),
        arg("--seed", type=int, default=20210623),
        arg("--gg-noise-sd", type=float, default=None, help="pathologist grading noise, percentage points"),
        arg("--other-cause-hazard", type=float, default=None, help="yearly competing-death hazard"),
        arg("--baseline-hazard", type=float, default=None),
    ],
)
def simulate(args):
    overrides = {
        "n_cases": args.n_cases,
        "seed": args.seed,
        "gg_noise_sd": args.gg_noise_sd,
        "other_cause_hazard": args.other_cause_hazard,
        "baseline_hazard": args.baseline_hazard,
    }
    params = make_simulation_params(**{k: v for k, v in overrides.items() if v is not None})
    cohort = simulate_cohort(params)
    save_cohort(cohort, args.out)
    return {
        "out": str(args.out),
        "label": cohort.label,
        "cases": len(cohort),
        "dss_events": sum(c.dss_event for c in cohort.cases),
        "graded": sum(c.pathologist_gg is not None for c in cohort.cases),
    }


@router.command(
    "ingest",
    help="Load a cohort CSV, apply exclusions and optionally select a validation set",
    arguments=[
        arg("--cohort", type=Path, required=True),
        arg("--validation-set", choices=["V1", "V2"], default="V1"),
        arg("--min-year", type=int, default=2000),
        arg("--out", type=Path, default=None, help="write the resulting cohort here"),
    ],
)
def ingest(args):
    loaded = load_cohort(args.cohort)
    cohort = select_validation_set(apply_exclusions(loaded), args.validation_set, args.min_year)
    if args.out is not None:
        save_cohort(cohort, args.out)
        logger.info(f"✅ Cohort written to {args.out}")
    reasons = {}
    for record in cohort.exclusion_log:
        reasons[record.reason] = reasons.get(record.reason, 0) + 1
    return {
        "label": cohort.label,
        "rows_rejected": len(loaded.load_errors),
        "rejections": [r.model_dump() for r in loaded.load_errors[:20]],
        "excluded": reasons,
        "cases": len(cohort),
    }

from pathlib import Path

import pandas as pd
from pydantic import ValidationError

from core.cli import CommandRouter, arg, csv_floats
from core.cohort import load_cohort, save_cohort
from core.config import settings
from core.errors import ParameterError, SchemaError
from core.patchagg import (
    aggregate_cases,
    apply_percentages,
    load_patch_grids,
    load_slide_manifest,
    select_tissue_threshold,
    write_percentages_csv,
)
from schemas import ClassWeights

router = CommandRouter(tags=["patches"])


@router.command(
    "aggregate",
    help="Turn patch probability grids into per-case Gleason pattern percentages",
    arguments=[
        arg("--patch-grids", type=Path, required=True),
        arg("--manifest", type=Path, required=True, help="slide_id,case_id CSV"),
        arg("--weights", type=csv_floats, default=None, help="four class weights: nontumor,gp3,gp4,gp5"),
        arg("--tissue-threshold", type=float, default=None),
        arg("--tissue-labels", type=Path, default=None,
            help="tissue_score,is_prostate CSV used to pick the threshold at --target-precision"),
        arg("--target-precision", type=float, default=settings.TISSUE_TARGET_PRECISION),
        arg("--out", type=Path, required=True, help="percentages CSV"),
        arg("--clinical", type=Path, default=None, help="cohort CSV whose pattern fields are replaced"),
        arg("--cohort-out", type=Path, default=None),
    ],
)
def aggregate(args):
    summary = {}
    threshold = args.tissue_threshold or 0.0
    if args.tissue_labels is not None:
        labels = pd.read_csv(args.tissue_labels)
        if not {"tissue_score", "is_prostate"} <= set(labels.columns):
            raise SchemaError("tissue label file needs columns tissue_score, is_prostate")
        chosen = select_tissue_threshold(
            labels["tissue_score"].to_numpy(float), labels["is_prostate"].to_numpy(bool), args.target_precision
        )
        threshold = chosen.threshold
        summary["tissue_threshold"] = chosen.model_dump()

    try:
        weights = ClassWeights(w=args.weights) if args.weights else None
    except ValidationError as e:
        raise ParameterError(f"invalid class weights: {e.errors()[0]['msg']}") from e
    percentages = aggregate_cases(
        load_patch_grids(args.patch_grids), load_slide_manifest(args.manifest), weights, threshold
    )
    write_percentages_csv(percentages, args.out)
    summary.update(cases=len(percentages), out=str(args.out), threshold=threshold)

    if args.clinical is not None:
        cohort = apply_percentages(load_cohort(args.clinical), percentages)
        if args.cohort_out is not None:
            save_cohort(cohort, args.cohort_out)
        summary["cohort_cases"] = len(cohort)
    return summary

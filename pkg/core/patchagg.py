"""Patch grids to case-level Gleason pattern percentages."""

from enum import IntEnum
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from core.errors import DataError, SchemaError, UnattainablePrecisionError
from core.log import get_logger
from schemas import ClassWeights, Cohort, ExclusionRecord, PatchGrid, PatternPercentages, TissueThreshold

logger = get_logger(__name__)

GRID_COLUMNS = ["slide_id", "row", "col", "p_nontumor", "p_gp3", "p_gp4", "p_gp5", "tissue_score"]
MANIFEST_COLUMNS = ["slide_id", "case_id"]
REASON_NO_GRID = "no patch grid"
TIE_RTOL = 1e-9


class PatchClass(IntEnum):
    MASKED = -1
    NONTUMOR = 0
    GP3 = 1
    GP4 = 2
    GP5 = 3


def select_tissue_threshold(scores, labels, target_precision: float) -> TissueThreshold:
    """Smallest cut ``t`` (among observed scores) whose rule ``score >= t`` reaches the target precision.

    ``labels`` are truthy for prostatic tissue.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.size == 0:
        raise DataError("scores and labels must be nonempty and equally long")
    if not 0 < target_precision <= 1:
        raise DataError("target_precision must lie in (0, 1]")
    if not labels.any():
        raise DataError("at least one prostatic (positive) label is required")

    cuts = np.unique(scores)
    order = np.sort(scores)
    pos_sorted = np.sort(scores[labels])
    # counts with score >= cut
    selected = scores.size - np.searchsorted(order, cuts, side="left")
    true_pos = pos_sorted.size - np.searchsorted(pos_sorted, cuts, side="left")
    precision = true_pos / selected
    ok = np.flatnonzero(precision >= target_precision)
    if ok.size == 0:
        raise UnattainablePrecisionError(
            f"no threshold reaches precision {target_precision:g} (best {precision.max():.4f})"
        )
    k = ok[0]
    return TissueThreshold(
        threshold=float(cuts[k]),
        precision=float(precision[k]),
        recall=float(true_pos[k] / pos_sorted.size),
        target_precision=target_precision,
    )


def classify_patches(grid: PatchGrid, weights: Optional[ClassWeights] = None, tissue_threshold: float = 0.0) -> np.ndarray:
    """Per-cell PatchClass codes; ties in the weighted argmax go to the lower-risk class.

    Weighted scores within a relative ``TIE_RTOL`` of the cell maximum count as tied, so
    scaling every weight by the same positive constant never changes a class.
    """
    weights = weights or ClassWeights()
    weighted = grid.probs * np.asarray(weights.w)
    top = weighted.max(axis=2, keepdims=True)
    tied = np.isclose(weighted, top, rtol=TIE_RTOL, atol=0.0)
    classes = np.argmax(tied, axis=2).astype(np.int8)  # first tied maximum = lowest risk
    classes[grid.tissue_score < tissue_threshold] = PatchClass.MASKED
    if grid.present is not None:
        classes[~grid.present] = PatchClass.MASKED
    return classes


def pattern_percentages(classified: Iterable[np.ndarray]) -> PatternPercentages:
    """Pools classified cells from all of a case's slides; denominators are tumor cells only."""
    counts = np.zeros(5, dtype=np.int64)  # masked, nontumor, gp3, gp4, gp5
    for cells in classified:
        counts += np.bincount(np.asarray(cells).ravel().astype(np.int64) + 1, minlength=5)[:5]
    tumor = counts[2:]
    n_tumor = int(tumor.sum())
    if n_tumor == 0:
        return PatternPercentages(
            pct_gp3=0.0, pct_gp4=0.0, pct_gp5=0.0, tumor_present=False,
            n_tumor_cells=0, n_nontumor_cells=int(counts[1]), n_masked_cells=int(counts[0]),
        )
    pct = 100.0 * tumor / n_tumor
    return PatternPercentages(
        pct_gp3=float(pct[0]), pct_gp4=float(pct[1]), pct_gp5=float(pct[2]), tumor_present=True,
        n_tumor_cells=n_tumor, n_nontumor_cells=int(counts[1]), n_masked_cells=int(counts[0]),
    )


# --- Files -------------------------------------------------------------------------

def load_patch_grids(path) -> Dict[str, PatchGrid]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"patch grid file not found: {path}")
    frame = pd.read_csv(path, dtype={"slide_id": str})
    missing = [c for c in GRID_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"patch grid file is missing column(s): {', '.join(missing)}")

    grids: Dict[str, PatchGrid] = {}
    for slide_id, cells in frame.groupby("slide_id", sort=True):
        rows = int(cells["row"].max()) + 1
        cols = int(cells["col"].max()) + 1
        if (cells["row"] < 0).any() or (cells["col"] < 0).any():
            raise DataError(f"slide {slide_id}: negative grid coordinates")
        if cells.duplicated(["row", "col"]).any():
            raise DataError(f"slide {slide_id}: duplicate grid cells")
        # cells absent from the file are background and always masked
        probs = np.zeros((rows, cols, 4))
        probs[:, :, 0] = 1.0
        tissue = np.zeros((rows, cols))
        r, c = cells["row"].to_numpy(int), cells["col"].to_numpy(int)
        probs[r, c] = cells[["p_nontumor", "p_gp3", "p_gp4", "p_gp5"]].to_numpy(float)
        tissue[r, c] = cells["tissue_score"].to_numpy(float)
        present = np.zeros((rows, cols), dtype=bool)
        present[r, c] = True
        try:
            grids[str(slide_id)] = PatchGrid(slide_id=str(slide_id), probs=probs, tissue_score=tissue, present=present)
        except ValidationError as e:
            raise DataError(f"slide {slide_id}: {e.errors()[0]['msg']}") from e
    logger.info(f"✅ Loaded {len(grids)} slide grids from {path.name}")
    return grids


def load_slide_manifest(path) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"slide manifest not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"slide manifest is missing column(s): {', '.join(missing)}")
    if frame["slide_id"].duplicated().any():
        raise DataError("slide manifest maps a slide_id more than once")
    return dict(zip(frame["slide_id"], frame["case_id"]))


def aggregate_cases(
    grids: Mapping[str, PatchGrid],
    manifest: Mapping[str, str],
    weights: Optional[ClassWeights] = None,
    tissue_threshold: float = 0.0,
) -> Dict[str, PatternPercentages]:
    unmapped = sorted(set(grids) - set(manifest))
    if unmapped:
        raise DataError(f"slides missing from manifest: {', '.join(unmapped[:5])}")
    per_case: Dict[str, list] = {}
    for slide_id in sorted(grids):
        per_case.setdefault(manifest[slide_id], []).append(classify_patches(grids[slide_id], weights, tissue_threshold))
    return {case_id: pattern_percentages(cells) for case_id, cells in sorted(per_case.items())}


def apply_percentages(cohort: Cohort, percentages: Mapping[str, PatternPercentages]) -> Cohort:
    """Replaces each case's pattern fields with aggregated values; cases without grids are excluded."""
    cases, excluded = [], []
    for case in cohort.cases:
        pct = percentages.get(case.case_id)
        if pct is None:
            excluded.append(ExclusionRecord(case_id=case.case_id, reason=REASON_NO_GRID))
            continue
        cases.append(
            case.model_copy(
                update=dict(
                    pct_gp3=pct.pct_gp3, pct_gp4=pct.pct_gp4, pct_gp5=pct.pct_gp5, tumor_present=pct.tumor_present
                )
            )
        )
    if excluded:
        logger.warning(f"⚠️ {len(excluded)} cases have no patch grid and were excluded")
    return cohort.derive(cases, extra_exclusions=excluded)


def write_percentages_csv(percentages: Mapping[str, PatternPercentages], path) -> None:
    rows = [{"case_id": cid, **p.model_dump()} for cid, p in sorted(percentages.items())]
    pd.DataFrame(rows).to_csv(path, index=False, lineterminator="\n")

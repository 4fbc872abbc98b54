import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from core.config import settings
from core.errors import DataError, ParameterError, RowError, SchemaError
from core.log import get_logger
from schemas import Case, Cohort, ExclusionRecord, RowRejection, SimulationParams, Table1Row

logger = get_logger(__name__)

SCHEMA_VERSION = "1"
COHORT_COLUMNS = [
    "case_id", "surgery_year", "pct_gp3", "pct_gp4", "pct_gp5", "tumor_present",
    "gg", "t_category", "followup_years", "dss_event", "os_event",
]
EARLY_DEATH_YEARS = 30 / 365.25
REASON_EARLY_DEATH = "death within 30 days"
REASON_NO_TUMOR = "no tumor"


def sidecar_path(path: Path) -> Path:
    return Path(str(path) + ".meta.json")


# --- Ingest ------------------------------------------------------------------

def _parse_float(raw: str, field: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise RowError(f"non-numeric {field}: {raw!r}")
    if not np.isfinite(value):
        raise RowError(f"non-finite {field}: {raw!r}")
    return value


def _parse_int(raw: str, field: str) -> int:
    value = _parse_float(raw, field)
    if value != int(value):
        raise RowError(f"non-integer {field}: {raw!r}")
    return int(value)


def _parse_bool(raw: str, field: str) -> bool:
    if raw not in ("0", "1"):
        raise RowError(f"{field} must be 0 or 1, got {raw!r}")
    return raw == "1"


def _optional(raw: str, parse, field: str):
    return None if raw == "" else parse(raw, field)


def _case_from_row(row: dict) -> Case:
    fields = dict(
        case_id=row["case_id"],
        surgery_year=_parse_int(row["surgery_year"], "surgery_year"),
        pct_gp3=_parse_float(row["pct_gp3"], "pct_gp3"),
        pct_gp4=_parse_float(row["pct_gp4"], "pct_gp4"),
        pct_gp5=_parse_float(row["pct_gp5"], "pct_gp5"),
        tumor_present=_parse_bool(row["tumor_present"], "tumor_present"),
        pathologist_gg=_optional(row["gg"], _parse_int, "gg"),
        t_category=row["t_category"] or None,
        followup_years=_parse_float(row["followup_years"], "followup_years"),
        dss_event=_parse_bool(row["dss_event"], "dss_event"),
        os_event=_optional(row["os_event"], _parse_bool, "os_event"),
    )
    try:
        return Case(**fields)
    except ValidationError as e:
        raise RowError(_validation_reason(e))


def _validation_reason(e: ValidationError) -> str:
    reasons = []
    for err in e.errors():
        msg = err["msg"].removeprefix("Value error, ")
        loc = ".".join(str(p) for p in err["loc"])
        reasons.append(f"{loc}: {msg}" if loc else msg)
    return "; ".join(reasons)


def load_cohort(path, schema_version: str = SCHEMA_VERSION) -> Cohort:
    """Reads a cohort CSV (and its JSON sidecar when present).

    Malformed rows are collected in ``load_errors``; the load only fails when
    every row is rejected, a required column is missing or a case_id repeats.
    """
    path = Path(path)
    if schema_version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported cohort schema version {schema_version!r} (expected {SCHEMA_VERSION})")
    if not path.is_file():
        raise DataError(f"cohort file not found: {path}")

    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in COHORT_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"cohort file {path.name} is missing required column(s): {', '.join(missing)}")

    cases: List[Case] = []
    rejections: List[RowRejection] = []
    for i, row in enumerate(frame[COHORT_COLUMNS].to_dict(orient="records"), start=1):
        row = {k: v.strip() for k, v in row.items()}
        try:
            cases.append(_case_from_row(row))
        except RowError as e:
            rejections.append(RowRejection(row=i, case_id=row["case_id"] or None, reason=e.detail))

    if rejections and not cases:
        raise RowError(f"all {len(rejections)} rows rejected; first: row {rejections[0].row}: {rejections[0].reason}")
    for r in rejections:
        logger.warning(f"⚠️ Row {r.row} ({r.case_id}) rejected: {r.reason}")

    label, exclusions = path.stem, ()
    meta_path = sidecar_path(path)
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("schema_version", SCHEMA_VERSION) != schema_version:
            raise SchemaError(f"sidecar schema version {meta.get('schema_version')!r} does not match {schema_version!r}")
        label = meta.get("label", label)
        exclusions = tuple(ExclusionRecord(**rec) for rec in meta.get("exclusion_log", []))

    cohort = Cohort(cases=tuple(cases), label=label, exclusion_log=exclusions, load_errors=tuple(rejections))
    logger.info(f"✅ Loaded {len(cohort)} cases from {path.name} ({len(rejections)} rejected)")
    return cohort


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_cohort(cohort: Cohort, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [
        {
            "case_id": c.case_id, "surgery_year": _fmt(c.surgery_year),
            "pct_gp3": _fmt(c.pct_gp3), "pct_gp4": _fmt(c.pct_gp4), "pct_gp5": _fmt(c.pct_gp5),
            "tumor_present": _fmt(c.tumor_present), "gg": _fmt(c.pathologist_gg),
            "t_category": _fmt(c.t_category), "followup_years": _fmt(c.followup_years),
            "dss_event": _fmt(c.dss_event), "os_event": _fmt(c.os_event),
        }
        for c in cohort.cases
    ]
    pd.DataFrame(records, columns=COHORT_COLUMNS).to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
    meta = {
        "schema_version": SCHEMA_VERSION,
        "label": cohort.label,
        "exclusion_log": [rec.model_dump() for rec in cohort.exclusion_log],
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


# --- Exclusions and validation sets -----------------------------------------

def apply_exclusions(cohort: Cohort) -> Cohort:
    """Drops deaths within 30 days of surgery (DSS or OS) and cases without tumor."""
    kept, excluded = [], []
    for case in cohort.cases:
        died = case.dss_event or bool(case.os_event)
        if died and case.followup_years < EARLY_DEATH_YEARS:
            excluded.append(ExclusionRecord(case_id=case.case_id, reason=REASON_EARLY_DEATH))
        elif not case.tumor_present:
            excluded.append(ExclusionRecord(case_id=case.case_id, reason=REASON_NO_TUMOR))
        else:
            kept.append(case)
    if excluded:
        logger.info(f"🔄 Excluded {len(excluded)} of {len(cohort)} cases")
    return cohort.derive(kept, extra_exclusions=excluded)


def select_validation_set(cohort: Cohort, which: Literal["V1", "V2"], min_year: int = 2000) -> Cohort:
    if which == "V1":
        return cohort
    if which != "V2":
        raise ParameterError(f"unknown validation set {which!r}")
    selected = [c for c in cohort.cases if c.surgery_year >= min_year and c.pathologist_gg is not None]
    suffix = "V2" if min_year == 2000 else f"V2>={min_year}"
    return cohort.derive(selected, label=f"{cohort.label}:{suffix}")


# --- Columnar views ------------------------------------------------------------

def cohort_frame(cohort: Cohort) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "case_id": [c.case_id for c in cohort.cases],
            "surgery_year": [c.surgery_year for c in cohort.cases],
            "pct_gp3": [c.pct_gp3 for c in cohort.cases],
            "pct_gp4": [c.pct_gp4 for c in cohort.cases],
            "pct_gp5": [c.pct_gp5 for c in cohort.cases],
            "gg": [np.nan if c.pathologist_gg is None else float(c.pathologist_gg) for c in cohort.cases],
            "tstage_high": [np.nan if c.tstage_high is None else float(c.tstage_high) for c in cohort.cases],
            "followup_years": [c.followup_years for c in cohort.cases],
            "dss_event": [c.dss_event for c in cohort.cases],
            "os_event": [c.os_event for c in cohort.cases],
        }
    )


def outcome_arrays(cohort: Cohort, outcome: str = "DSS") -> Tuple[np.ndarray, np.ndarray]:
    times = np.array([c.followup_years for c in cohort.cases], dtype=float)
    if outcome == "DSS":
        events = np.array([c.dss_event for c in cohort.cases], dtype=bool)
    elif outcome == "OS":
        if any(c.os_event is None for c in cohort.cases):
            raise DataError("OS outcome requested but os_event is missing for some cases")
        events = np.array([c.os_event for c in cohort.cases], dtype=bool)
    else:
        raise ParameterError(f"unknown outcome {outcome!r}")
    return times, events


def describe_cohort(cohort: Cohort, validation_set: str) -> List[Table1Row]:
    rows: List[Table1Row] = []

    def add(characteristic, level, value):
        rows.append(Table1Row(validation_set=validation_set, characteristic=characteristic, level=level, value=str(value)))

    add("cases", "", len(cohort))
    followup = np.array([c.followup_years for c in cohort.cases], dtype=float)
    if followup.size:
        q1, med, q3 = np.percentile(followup, [25, 50, 75])
        add("followup_years", "median (IQR)", f"{med:.1f} ({q1:.1f}, {q3:.1f})")
    dss = sum(c.dss_event for c in cohort.cases)
    add("DSS", "observed", dss)
    add("DSS", "censored", len(cohort) - dss)
    if all(c.os_event is not None for c in cohort.cases):
        os_obs = sum(bool(c.os_event) for c in cohort.cases)
        add("OS", "observed", os_obs)
        add("OS", "censored", len(cohort) - os_obs)
    for gg in range(1, 6):
        add("grade_group", str(gg), sum(c.pathologist_gg == gg for c in cohort.cases))
    add("grade_group", "unknown", sum(c.pathologist_gg is None for c in cohort.cases))
    for t in ("T2", "T3", "T4"):
        add("t_category", t, sum(c.t_category == t for c in cohort.cases))
    add("t_category", "unknown", sum(c.t_category is None for c in cohort.cases))
    return rows


# --- Simulation ------------------------------------------------------------------

def make_simulation_params(**overrides) -> SimulationParams:
    overrides.setdefault("gg_noise_sd", settings.GG_NOISE_SD)
    try:
        return SimulationParams(**overrides)
    except ValidationError as e:
        raise ParameterError(f"invalid simulation params: {_validation_reason(e)}") from e


def simulate_cohort(params: SimulationParams) -> Cohort:
    """Synthetic cohort with exponential disease-specific event times.

    Hazard is ``baseline_hazard * exp(beta_gp4*p4 + beta_gp5*p5 + beta_tstage*T3+)``;
    other-cause deaths censor DSS and count for OS. Fully determined by ``seed``.
    """
    from core.riskmodel import rule_based_gg

    if not isinstance(params, SimulationParams):
        raise ParameterError("simulate_cohort needs SimulationParams")

    n = params.n_cases
    rng = np.random.default_rng(params.seed)

    groups = rng.choice(5, size=n, p=np.asarray(params.gg_mixture))
    alphas = np.asarray(params.dirichlet_alphas, dtype=float)[groups]
    gammas = rng.standard_gamma(alphas)
    sums = gammas.sum(axis=1, keepdims=True)
    gammas[sums[:, 0] == 0, 0] = 1.0  # degenerate draw -> pure pattern 3
    pct = np.clip(100.0 * gammas / gammas.sum(axis=1, keepdims=True), 0.0, 100.0)

    high = rng.random(n) < np.asarray(params.tstage_high_prob)[groups]
    t4 = rng.random(n) < params.tstage_t4_share
    t_category = np.where(high, np.where(t4, "T4", "T3"), "T2")

    lp = params.beta_gp4 * pct[:, 1] + params.beta_gp5 * pct[:, 2] + params.beta_tstage * high
    event_time = rng.standard_exponential(n) / (params.baseline_hazard * np.exp(lp))
    if params.other_cause_hazard > 0:
        other_time = rng.standard_exponential(n) / params.other_cause_hazard
    else:
        other_time = np.full(n, np.inf)
    censor_time = rng.uniform(params.censor_min_years, params.censor_max_years, n)

    followup = np.maximum(np.minimum.reduce([event_time, other_time, censor_time]), 1e-6)
    dss_event = event_time <= np.minimum(other_time, censor_time)
    os_event = np.minimum(event_time, other_time) <= censor_time

    years = rng.integers(params.year_min, params.year_max + 1, size=n)

    noisy = np.clip(pct + rng.normal(0.0, params.gg_noise_sd, size=(n, 3)), 0.0, None)
    noisy_sums = noisy.sum(axis=1)
    noisy = np.where(noisy_sums[:, None] > 0, noisy, pct)
    recorded_draw = rng.random(n)
    recorded = np.where(
        years >= params.gg_adoption_year,
        recorded_draw < params.gg_recorded_prob,
        recorded_draw < params.pre_adoption_gg_prob,
    )

    cases = []
    for i in range(n):
        gg = rule_based_gg(*noisy[i]) if recorded[i] else None
        cases.append(
            Case(
                case_id=f"SIM{i:06d}",
                pct_gp3=float(pct[i, 0]),
                pct_gp4=float(pct[i, 1]),
                pct_gp5=float(pct[i, 2]),
                tumor_present=True,
                pathologist_gg=gg,
                t_category=str(t_category[i]),
                surgery_year=int(years[i]),
                followup_years=float(followup[i]),
                dss_event=bool(dss_event[i]),
                os_event=bool(os_event[i]),
            )
        )
    cohort = Cohort(cases=tuple(cases), label=f"synthetic-seed{params.seed}")
    logger.info(
        f"✅ Simulated {n} cases: {int(dss_event.sum())} DSS events, "
        f"{int(recorded.sum())} with pathologist Grade Group"
    )
    return cohort

# schemas.py

import math
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from core.errors import DuplicateCaseError

PCT_SUM_TOL = 1e-6
TCategory = Literal["T2", "T3", "T4"]
Outcome = Literal["DSS", "OS"]
RiskMethod = Literal["loocv", "temporal_split", "rule_based", "in_sample", "ensemble"]
TiesMethod = Literal["efron", "breslow"]


# Cohort models
class Case(BaseModel):
    """One prostatectomy case."""
    model_config = ConfigDict(frozen=True)

    case_id: str = Field(min_length=1)
    pct_gp3: float = Field(ge=0, le=100)
    pct_gp4: float = Field(ge=0, le=100)
    pct_gp5: float = Field(ge=0, le=100)
    tumor_present: bool
    pathologist_gg: Optional[int] = Field(default=None, ge=1, le=5)
    t_category: Optional[TCategory] = None
    surgery_year: int
    followup_years: float = Field(gt=0)
    dss_event: bool
    os_event: Optional[bool] = None

    @model_validator(mode="after")
    def check_case(self) -> "Case":
        if self.tumor_present:
            total = self.pct_gp3 + self.pct_gp4 + self.pct_gp5
            if abs(total - 100.0) > PCT_SUM_TOL:
                raise ValueError(f"pattern sum violation ({total:g} != 100)")
        if self.dss_event and self.os_event is False:
            raise ValueError("dss_event requires os_event when os_event is recorded")
        return self

    @property
    def tstage_high(self) -> Optional[bool]:
        if self.t_category is None:
            return None
        return self.t_category in ("T3", "T4")


class ExclusionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)
    case_id: str
    reason: str


class RowRejection(BaseModel):
    """Row-level ingest diagnostic; row numbers are 1-based data rows (header excluded)."""
    model_config = ConfigDict(frozen=True)
    row: int
    case_id: Optional[str] = None
    reason: str


class Cohort(BaseModel):
    """Immutable, case_id-sorted collection of cases plus provenance."""
    model_config = ConfigDict(frozen=True)

    cases: Tuple[Case, ...] = ()
    label: str = "cohort"
    exclusion_log: Tuple[ExclusionRecord, ...] = ()
    load_errors: Tuple[RowRejection, ...] = ()

    @field_validator("cases", mode="after")
    @classmethod
    def sort_and_check_unique(cls, cases: Tuple[Case, ...]) -> Tuple[Case, ...]:
        ids = [c.case_id for c in cases]
        if len(set(ids)) != len(ids):
            seen, dupes = set(), []
            for cid in ids:
                if cid in seen:
                    dupes.append(cid)
                seen.add(cid)
            raise DuplicateCaseError(dupes)
        return tuple(sorted(cases, key=lambda c: c.case_id))

    def __len__(self) -> int:
        return len(self.cases)

    @property
    def case_ids(self) -> List[str]:
        return [c.case_id for c in self.cases]

    def derive(self, cases, label: Optional[str] = None, extra_exclusions=()) -> "Cohort":
        return Cohort(
            cases=tuple(cases),
            label=self.label if label is None else label,
            exclusion_log=self.exclusion_log + tuple(extra_exclusions),
            load_errors=self.load_errors,
        )


class SimulationParams(BaseModel):
    """Synthetic cohort generator settings. Pattern effects default to the
    per-10-point hazard ratios 1.48 (GP4) and 1.51 (GP5)."""
    model_config = ConfigDict(frozen=True)

    n_cases: int = Field(default=2807, ge=1)
    gg_mixture: Tuple[float, float, float, float, float] = (0.40, 0.31, 0.15, 0.08, 0.06)
    dirichlet_alphas: Tuple[Tuple[float, float, float], ...] = (
        (20.0, 1.0, 0.2),
        (12.0, 4.0, 0.3),
        (5.0, 8.0, 0.5),
        (1.5, 8.0, 1.0),
        (1.0, 4.0, 4.0),
    )
    beta_gp4: float = math.log(1.48) / 10
    beta_gp5: float = math.log(1.51) / 10
    baseline_hazard: float = Field(default=0.00055, gt=0)
    censor_min_years: float = Field(default=4.0, ge=0)
    censor_max_years: float = 22.0
    seed: int = 20210623
    gg_noise_sd: float = Field(default=10.0, ge=0)

    year_min: int = 1995
    year_max: int = 2014
    gg_adoption_year: int = 2000
    gg_recorded_prob: float = Field(default=0.72, ge=0, le=1)
    pre_adoption_gg_prob: float = Field(default=0.01, ge=0, le=1)

    tstage_high_prob: Tuple[float, float, float, float, float] = (0.10, 0.20, 0.40, 0.60, 0.75)
    tstage_t4_share: float = Field(default=0.03, ge=0, le=1)
    beta_tstage: float = 0.0
    other_cause_hazard: float = Field(default=0.02, ge=0)

    @model_validator(mode="after")
    def check_params(self) -> "SimulationParams":
        if any(p < 0 for p in self.gg_mixture) or abs(sum(self.gg_mixture) - 1.0) > 1e-9:
            raise ValueError("gg_mixture must be a probability vector summing to 1")
        if len(self.dirichlet_alphas) != 5 or any(a <= 0 for row in self.dirichlet_alphas for a in row):
            raise ValueError("dirichlet_alphas needs five positive 3-vectors")
        if not self.censor_min_years < self.censor_max_years:
            raise ValueError("censor_min_years must be < censor_max_years")
        if self.year_min > self.year_max:
            raise ValueError("year_min must be <= year_max")
        if any(not 0 <= p <= 1 for p in self.tstage_high_prob):
            raise ValueError("tstage_high_prob entries must be probabilities")
        return self


# Patch aggregation models
class PatchGrid(BaseModel):
    """Per-patch class probabilities (nontumor, GP3, GP4, GP5) plus tissue confidence."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    slide_id: str
    probs: np.ndarray
    tissue_score: np.ndarray
    # cells that exist on the slide; None means every cell
    present: Optional[np.ndarray] = None

    @field_validator("probs", "tissue_score", mode="before")
    @classmethod
    def as_float_array(cls, v):
        arr = np.array(v, dtype=float)
        arr.setflags(write=False)
        return arr

    @field_validator("present", mode="before")
    @classmethod
    def as_bool_array(cls, v):
        if v is None:
            return None
        arr = np.array(v, dtype=bool)
        arr.setflags(write=False)
        return arr

    @model_validator(mode="after")
    def check_grid(self) -> "PatchGrid":
        if self.probs.ndim != 3 or self.probs.shape[2] != 4:
            raise ValueError("probs must have shape (rows, cols, 4)")
        if self.probs.shape[0] == 0 or self.probs.shape[1] == 0:
            raise ValueError("grid dimensions must be positive")
        if self.tissue_score.shape != self.probs.shape[:2]:
            raise ValueError("tissue_score must have shape (rows, cols)")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ValueError("class probabilities must lie in [0, 1]")
        if np.any(np.abs(self.probs.sum(axis=2) - 1.0) > 1e-6):
            raise ValueError("class probabilities must sum to 1 per cell")
        if np.any(self.tissue_score < 0) or np.any(self.tissue_score > 1):
            raise ValueError("tissue_score must lie in [0, 1]")
        if self.present is not None and self.present.shape != self.probs.shape[:2]:
            raise ValueError("present must have shape (rows, cols)")
        return self

    @property
    def rows(self) -> int:
        return self.probs.shape[0]

    @property
    def cols(self) -> int:
        return self.probs.shape[1]


class ClassWeights(BaseModel):
    model_config = ConfigDict(frozen=True)
    w: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    @field_validator("w")
    @classmethod
    def positive(cls, w):
        if any(x <= 0 for x in w):
            raise ValueError("class weights must be positive")
        return w


class TissueThreshold(BaseModel):
    model_config = ConfigDict(frozen=True)
    threshold: float
    precision: float
    recall: float
    target_precision: float


class PatternPercentages(BaseModel):
    model_config = ConfigDict(frozen=True)
    pct_gp3: float
    pct_gp4: float
    pct_gp5: float
    tumor_present: bool
    n_tumor_cells: int = 0
    n_nontumor_cells: int = 0
    n_masked_cells: int = 0


# Survival statistics models
class SurvivalCurve(BaseModel):
    """Kaplan-Meier estimate listed at the distinct event times."""
    model_config = ConfigDict(frozen=True)

    event_times: Tuple[float, ...]
    survival: Tuple[float, ...]
    at_risk: Tuple[int, ...]
    n_events: Tuple[int, ...]
    ci_lower: Tuple[float, ...]
    ci_upper: Tuple[float, ...]
    n_subjects: int
    alpha: float = 0.05
    ci_method: Literal["log-log", "plain"] = "log-log"

    @model_validator(mode="after")
    def check_lengths(self) -> "SurvivalCurve":
        n = len(self.event_times)
        if any(len(x) != n for x in (self.survival, self.at_risk, self.n_events, self.ci_lower, self.ci_upper)):
            raise ValueError("curve columns must have equal length")
        return self


class LogRankResult(BaseModel):
    model_config = ConfigDict(frozen=True)
    chi2: float = Field(ge=0)
    df: int
    p_value: float = Field(ge=0, le=1)
    groups: Tuple[str, ...] = ()
    observed: Tuple[float, ...] = ()
    expected: Tuple[float, ...] = ()


# Cox models
class CoxFit(BaseModel):
    model_config = ConfigDict(frozen=True)

    beta: Tuple[float, ...]
    covariance: Tuple[Tuple[float, ...], ...]
    log_likelihood: float
    penalized_log_likelihood: float
    null_log_likelihood: float
    n_iterations: int
    converged: bool
    gradient_max_norm: float
    ties_method: TiesMethod = "efron"
    ridge: float = 0.0
    names: Tuple[str, ...] = ()
    n_subjects: int = 0
    n_events: int = 0

    @property
    def coef(self) -> np.ndarray:
        return np.asarray(self.beta, dtype=float)

    @property
    def cov(self) -> np.ndarray:
        return np.asarray(self.covariance, dtype=float)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


class HazardRatio(BaseModel):
    model_config = ConfigDict(frozen=True)
    name: str
    hr: float
    ci_lower: float
    ci_upper: float
    p_value: Optional[float] = None
    scale: float = 1.0
    beta: float = 0.0
    se: float = 0.0


class ConcordanceResult(BaseModel):
    model_config = ConfigDict(frozen=True)
    c_index: float = Field(ge=0, le=1)
    n_concordant: int
    n_discordant: int
    n_tied_score: int
    n_comparable: int

    @model_validator(mode="after")
    def check_counts(self) -> "ConcordanceResult":
        if self.n_concordant + self.n_discordant + self.n_tied_score != self.n_comparable:
            raise ValueError("pair counts must sum to n_comparable")
        return self


# Risk model
class RiskAssignment(BaseModel):
    model_config = ConfigDict(frozen=True)
    case_id: str
    risk_score: float
    risk_group: Optional[int] = Field(default=None, ge=1, le=5)
    method: RiskMethod


class ReferenceHistogram(BaseModel):
    """Cases per Grade Group 1..5."""
    model_config = ConfigDict(frozen=True)
    counts: Tuple[int, int, int, int, int]

    @field_validator("counts")
    @classmethod
    def nonnegative(cls, counts):
        if any(c < 0 for c in counts):
            raise ValueError("histogram counts must be nonnegative")
        return counts

    @property
    def total(self) -> int:
        return sum(self.counts)

    def rescaled(self, n: int) -> "ReferenceHistogram":
        """Same frequencies, summing to n (largest-remainder rounding, ties to the lower group)."""
        if self.total == 0:
            raise ValueError("cannot rescale an empty histogram")
        quotas = [c * n / self.total for c in self.counts]
        floors = [math.floor(q) for q in quotas]
        short = n - sum(floors)
        order = sorted(range(5), key=lambda k: (-(quotas[k] - floors[k]), k))
        for k in order[:short]:
            floors[k] += 1
        return ReferenceHistogram(counts=tuple(floors))


# Inference
class BootstrapResult(BaseModel):
    model_config = ConfigDict(frozen=True)
    point_estimate: float
    ci_lower: float
    ci_upper: float
    n_resamples: int
    n_effective: int
    n_undefined: int = 0
    undefined_replicates: Tuple[int, ...] = ()
    seed: int
    alpha: float = 0.05
    interval: Literal["percentile", "basic"] = "percentile"
    replicate_values: Optional[Tuple[float, ...]] = None
    replicate_pairs: Optional[Tuple[Tuple[float, float], ...]] = None

    @model_validator(mode="after")
    def ordered(self) -> "BootstrapResult":
        if self.ci_lower > self.ci_upper:
            raise ValueError("ci_lower must not exceed ci_upper")
        return self


# Report rows (CSV headers are the field names, in order)
class Table1Row(BaseModel):
    validation_set: str
    characteristic: str
    level: str
    value: str


class Table2Row(BaseModel):
    validation_set: str
    metric: str
    c_index: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    n: int = 0
    n_effective: Optional[int] = None
    note: str = ""


class DiffRow(BaseModel):
    validation_set: str
    comparison: str
    diff: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    n_effective: Optional[int] = None
    note: str = ""


class HazardRatioRow(BaseModel):
    validation_set: str
    variable: str
    level: str
    hr: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    p_value: Optional[float] = None
    scale: float = 1.0
    note: str = ""


class DiscordanceRow(BaseModel):
    gg: int
    direction: str
    estimate: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    n: int = 0
    note: str = ""


class LogRankRow(BaseModel):
    stratum: str
    comparison: str
    chi2: Optional[float] = None
    df: Optional[int] = None
    p_value: Optional[float] = None
    n: int = 0
    note: str = ""


class SensitivityRow(BaseModel):
    analysis: str
    validation_set: str
    setting: str
    c_index: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    n: int = 0
    note: str = ""


class MultivariableRow(BaseModel):
    validation_set: str
    features: str
    with_tstage: bool
    c_index: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    n: int = 0
    note: str = ""


class ReportBundle(BaseModel):
    table1: List[Table1Row] = []
    table2: List[Table2Row] = []
    table2_diffs: List[DiffRow] = []
    hr_univariable: List[HazardRatioRow] = []
    hr_per_pattern: List[HazardRatioRow] = []
    discordance10y: List[DiscordanceRow] = []
    km_curves: Dict[str, str] = {}
    logrank: List[LogRankRow] = []
    sensitivity_years: List[SensitivityRow] = []
    sensitivity_discretization: List[SensitivityRow] = []
    multivariable: List[MultivariableRow] = []
    manifest: Dict[str, object] = {}

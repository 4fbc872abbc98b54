from pathlib import Path
from typing import Literal, Optional, Tuple

from pydantic import Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from core.errors import ConfigError


class Settings(BaseSettings):
    LOG_LEVEL: str = "INFO"

    # Cox fitting
    COX_TOL: float = 1e-9
    COX_MAX_ITER: int = 100
    COX_SEPARATION_BOUND: float = 50.0
    COX_MIN_INFORMATION: float = 1e-8

    # Risk model
    FALLBACK_RIDGE: float = 0.02
    LOOCV_MIN_CASES: int = 20
    SECONDARY_PATTERN_MIN_SHARE: float = 5.0

    # Resampling / parallelism
    N_WORKERS: int = 1
    BOOTSTRAP_MAX_UNDEFINED_FRACTION: float = 0.10

    # Patch aggregation and simulation defaults
    TISSUE_TARGET_PRECISION: float = 0.97
    GG_NOISE_SD: float = 10.0

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")


settings = Settings()


class RunConfig(BaseSettings):
    """Everything one pipeline run needs. Loaded from GLEASONRISK_* variables,
    a KEY=VALUE --config file, then command-line overrides (highest priority)."""

    # Input sources, exactly one of: cohort file, simulation, patch grids
    cohort_path: Optional[Path] = None
    simulate: bool = False
    n_cases: int = 2807
    sim_seed: Optional[int] = None
    patch_grid_path: Optional[Path] = None
    patch_manifest_path: Optional[Path] = None
    clinical_path: Optional[Path] = None
    tissue_threshold: float = Field(default=0.0, ge=0, le=1)

    # Validation sets
    validation_min_year: int = 2000
    sensitivity_min_year: int = 1995
    temporal_train_max_year: int = 1999

    outcome: Literal["DSS", "OS"] = "DSS"
    reference: str = "pathologist"
    grade_coding: Literal["categorical", "ordinal"] = "categorical"
    ci_method: Literal["log-log", "plain"] = "log-log"
    interval: Literal["percentile", "basic"] = "percentile"

    n_bootstrap: int = Field(default=1000, ge=1)
    seed: int = 20210623
    alpha: float = Field(default=0.05, gt=0, lt=1)
    ridge: float = Field(default=0.02, ge=0)
    horizon_years: float = Field(default=10.0, gt=0)
    n_workers: int = Field(default=1, ge=1)
    dump_replicates: bool = False

    out_dir: Path = Path("runs/default")

    model_config = SettingsConfigDict(env_prefix="GLEASONRISK_", env_file=None, extra="ignore")

    @field_validator("reference")
    @classmethod
    def check_reference(cls, v: str) -> str:
        if v == "pathologist":
            return v
        parts = [p.strip() for p in v.split(",")]
        if len(parts) != 5 or not all(p.isdigit() for p in parts):
            raise ValueError("reference must be 'pathologist' or five comma-separated counts")
        return ",".join(parts)

    @model_validator(mode="after")
    def check_sources(self) -> "RunConfig":
        patch_source = self.patch_grid_path is not None or self.patch_manifest_path is not None
        sources = [self.cohort_path is not None, self.simulate, patch_source]
        if sum(sources) != 1:
            raise ValueError("exactly one input source is required: cohort_path, simulate or patch grids")
        if patch_source and (
            self.patch_grid_path is None or self.patch_manifest_path is None or self.clinical_path is None
        ):
            raise ValueError("patch source needs patch_grid_path, patch_manifest_path and clinical_path")
        for path in (self.cohort_path, self.patch_grid_path, self.patch_manifest_path, self.clinical_path):
            if path is not None and not path.is_file():
                raise ValueError(f"input file not found: {path}")
        return self

    def reference_counts(self) -> Optional[Tuple[int, ...]]:
        if self.reference == "pathologist":
            return None
        return tuple(int(p) for p in self.reference.split(","))


def load_run_config(config_file: Optional[Path] = None, **overrides) -> RunConfig:
    """Builds a RunConfig, turning pydantic validation failures into ConfigError."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if config_file is not None and not Path(config_file).is_file():
        raise ConfigError(f"config file not found: {config_file}")
    try:
        return RunConfig(_env_file=config_file, **overrides)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid run config: {problems}") from e

"""Exception hierarchy. Every error carries a readable ``detail`` and the CLI exit code
its family maps to (2 config, 3 data, 4 numeric/convergence)."""

from typing import Optional, Sequence


class GleasonRiskError(Exception):
    exit_code = 3

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(GleasonRiskError):
    exit_code = 2


class ParameterError(ConfigError):
    pass


class DataError(GleasonRiskError):
    exit_code = 3


class SchemaError(DataError):
    pass


class RowError(DataError):
    def __init__(self, detail: str, row: Optional[int] = None, case_id: Optional[str] = None):
        super().__init__(detail)
        self.row = row
        self.case_id = case_id


class DuplicateCaseError(DataError):
    def __init__(self, case_ids: Sequence[str]):
        super().__init__(f"duplicate case_id(s): {', '.join(sorted(set(case_ids)))}")
        self.case_ids = list(case_ids)


class EmptyCurveError(DataError):
    pass


class HistogramError(DataError):
    pass


class DisjointnessError(DataError):
    pass


class SizeError(DataError):
    pass


class UndefinedGradeError(DataError):
    pass


class MissingGradeError(DataError):
    pass


class NumericError(GleasonRiskError):
    exit_code = 4


class ConvergenceError(NumericError):
    def __init__(self, detail: str, last_beta: Optional[Sequence[float]] = None):
        super().__init__(detail)
        self.last_beta = None if last_beta is None else list(last_beta)


class NotConvergedError(NumericError):
    pass


class SeparationError(NumericError):
    def __init__(self, detail: str, coefficients: Sequence[str] = ()):
        super().__init__(detail)
        self.coefficients = list(coefficients)


class DegenerateCovariateError(NumericError):
    pass


class UndefinedStatisticError(NumericError):
    pass


class UndefinedMetricError(NumericError):
    pass


class UnattainablePrecisionError(NumericError):
    pass


class ReliabilityError(NumericError):
    pass


class FoldError(NumericError):
    def __init__(self, detail: str, case_id: str):
        super().__init__(detail)
        self.case_id = case_id


class PipelineStageError(GleasonRiskError):
    def __init__(self, stage: str, cause: GleasonRiskError):
        super().__init__(f"stage '{stage}' failed: {cause.detail}")
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code

"""Case-level bootstrap confidence intervals.

Metrics receive a resampled table (a pandas DataFrame, or anything with ``take`` and ``len``)
and return a float; ``UndefinedMetricError`` / ``UndefinedStatisticError`` mark a replicate as
undefined. The full resample schedule is drawn up front, so thread count never changes results.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.cohort import cohort_frame
from core.config import settings
from core.errors import (
    DataError,
    ParameterError,
    ReliabilityError,
    UndefinedMetricError,
    UndefinedStatisticError,
)
from core.log import get_logger
from schemas import BootstrapResult, Cohort

logger = get_logger(__name__)

Metric = Callable[[pd.DataFrame], float]
Interval = Literal["percentile", "basic"]
REPLICATE_COLUMNS = ["replicate_index", "value_a", "value_b", "diff"]
_UNDEFINED = (UndefinedMetricError, UndefinedStatisticError)


def resample_schedule(n: int, n_resamples: int, seed: int) -> np.ndarray:
    """(n_resamples, n) row indices drawn with replacement, generated sequentially from ``seed``."""
    if n < 1:
        raise DataError("cannot resample an empty cohort")
    if n_resamples < 1:
        raise ParameterError("n_resamples must be at least 1")
    rng = np.random.default_rng(seed)
    return rng.integers(0, n, size=(n_resamples, n))


def _as_table(data):
    if isinstance(data, Cohort):
        return cohort_frame(data)
    return data


def _take(data, idx: np.ndarray):
    if isinstance(data, (pd.DataFrame, pd.Series)):
        return data.take(idx).reset_index(drop=True)
    return np.asarray(data)[idx]


def nearest_rank_interval(values: np.ndarray, alpha: float) -> Tuple[float, float]:
    """Order statistics at ranks ceil(alpha/2 * m) and ceil((1 - alpha/2) * m), 1-based."""
    v = np.sort(np.asarray(values, dtype=float))
    m = v.size
    lo_rank = max(1, math.ceil(alpha / 2 * m - 1e-9))
    hi_rank = min(m, max(1, math.ceil((1 - alpha / 2) * m - 1e-9)))
    return float(v[lo_rank - 1]), float(v[hi_rank - 1])


def _interval(values: np.ndarray, point: float, alpha: float, interval: Interval) -> Tuple[float, float]:
    lo, hi = nearest_rank_interval(values, alpha)
    if interval == "percentile":
        return lo, hi
    if interval == "basic":
        return 2 * point - hi, 2 * point - lo
    raise ParameterError(f"unknown interval {interval!r}")


def _evaluate(metrics: Sequence[Metric], data, schedule: np.ndarray, n_workers: int) -> np.ndarray:
    """Replicate values, shape (n_resamples, len(metrics)); NaN where any metric is undefined."""

    def one(r: int) -> List[float]:
        sample = _take(data, schedule[r])
        try:
            return [float(metric(sample)) for metric in metrics]
        except _UNDEFINED:
            return [math.nan] * len(metrics)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(one, range(schedule.shape[0])))
    else:
        rows = [one(r) for r in range(schedule.shape[0])]
    return np.array(rows, dtype=float).reshape(schedule.shape[0], len(metrics))


def _check_reliability(undefined: np.ndarray, n_resamples: int) -> None:
    limit = settings.BOOTSTRAP_MAX_UNDEFINED_FRACTION
    if undefined.size > limit * n_resamples:
        raise ReliabilityError(
            f"{undefined.size} of {n_resamples} bootstrap replicates were undefined (limit {limit:.0%})"
        )
    if undefined.size:
        logger.warning(f"⚠️ Skipped {undefined.size} undefined bootstrap replicates")


def bootstrap_ci(
    metric: Metric,
    data,
    n_resamples: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    interval: Interval = "percentile",
    n_workers: Optional[int] = None,
    keep_replicates: bool = False,
) -> BootstrapResult:
    data = _as_table(data)
    point = float(metric(data))
    schedule = resample_schedule(len(data), n_resamples, seed)
    workers = settings.N_WORKERS if n_workers is None else n_workers
    values = _evaluate([metric], data, schedule, workers)[:, 0]

    undefined = np.flatnonzero(np.isnan(values))
    _check_reliability(undefined, n_resamples)
    lo, hi = _interval(values[~np.isnan(values)], point, alpha, interval)
    return BootstrapResult(
        point_estimate=point,
        ci_lower=lo,
        ci_upper=hi,
        n_resamples=n_resamples,
        n_effective=int(n_resamples - undefined.size),
        n_undefined=int(undefined.size),
        undefined_replicates=tuple(int(r) for r in undefined),
        seed=seed,
        alpha=alpha,
        interval=interval,
        replicate_values=tuple(float(v) for v in values) if keep_replicates else None,
    )


def bootstrap_diff_ci(
    metric_a: Metric,
    metric_b: Metric,
    data,
    n_resamples: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    interval: Interval = "percentile",
    n_workers: Optional[int] = None,
    keep_replicates: bool = False,
) -> BootstrapResult:
    """CI for ``metric_a - metric_b``; both metrics see the same resampled rows in every replicate."""
    data = _as_table(data)
    point = float(metric_a(data)) - float(metric_b(data))
    schedule = resample_schedule(len(data), n_resamples, seed)
    workers = settings.N_WORKERS if n_workers is None else n_workers
    values = _evaluate([metric_a, metric_b], data, schedule, workers)
    diffs = values[:, 0] - values[:, 1]

    undefined = np.flatnonzero(np.isnan(diffs))
    _check_reliability(undefined, n_resamples)
    lo, hi = _interval(diffs[~np.isnan(diffs)], point, alpha, interval)
    return BootstrapResult(
        point_estimate=point,
        ci_lower=lo,
        ci_upper=hi,
        n_resamples=n_resamples,
        n_effective=int(n_resamples - undefined.size),
        n_undefined=int(undefined.size),
        undefined_replicates=tuple(int(r) for r in undefined),
        seed=seed,
        alpha=alpha,
        interval=interval,
        replicate_values=tuple(float(d) for d in diffs) if keep_replicates else None,
        replicate_pairs=tuple((float(a), float(b)) for a, b in values) if keep_replicates else None,
    )


def write_replicates_csv(result: BootstrapResult, path) -> None:
    if result.replicate_values is None:
        raise DataError("bootstrap result was computed without keep_replicates")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if result.replicate_pairs is not None:
        frame = pd.DataFrame(
            {
                "replicate_index": range(len(result.replicate_pairs)),
                "value_a": [a for a, _ in result.replicate_pairs],
                "value_b": [b for _, b in result.replicate_pairs],
                "diff": result.replicate_values,
            }
        )
    else:
        frame = pd.DataFrame(
            {
                "replicate_index": range(len(result.replicate_values)),
                "value_a": result.replicate_values,
                "value_b": [None] * len(result.replicate_values),
                "diff": [None] * len(result.replicate_values),
            }
        )
    frame[REPLICATE_COLUMNS].to_csv(path, index=False, lineterminator="\n")

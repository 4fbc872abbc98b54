from pathlib import Path
from typing import Literal, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from core.errors import DataError, EmptyCurveError, UndefinedStatisticError
from core.log import get_logger
from schemas import LogRankResult, SurvivalCurve

logger = get_logger(__name__)

CURVE_COLUMNS = ["time", "at_risk", "n_events", "survival", "ci_lower", "ci_upper"]


def event_table(times, events) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct event times with the number at risk and number of events at each.

    A subject censored at an event time is still at risk there (events precede censoring).
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    order = np.argsort(times, kind="mergesort")
    t_sorted = times[order]
    uniq, first = np.unique(t_sorted, return_index=True)
    at_risk = len(times) - first
    deaths = np.bincount(np.searchsorted(uniq, times[events]), minlength=len(uniq))
    has_event = deaths > 0
    return uniq[has_event], at_risk[has_event], deaths[has_event]


def kaplan_meier(
    times,
    events,
    alpha: float = 0.05,
    ci_method: Literal["log-log", "plain"] = "log-log",
) -> SurvivalCurve:
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    if times.size == 0:
        raise EmptyCurveError("cannot estimate a survival curve from zero subjects")
    if times.shape != events.shape:
        raise DataError("times and events must have the same length")
    if np.any(times <= 0) or not np.all(np.isfinite(times)):
        raise DataError("survival times must be positive and finite")

    t, n, d = event_table(times, events)
    survival = np.cumprod(1.0 - d / n)

    # Greenwood; the n == d term only occurs where survival drops to zero
    with np.errstate(divide="ignore", invalid="ignore"):
        greenwood = np.cumsum(np.where(n > d, d / (n * (n - d)), np.inf))
    z = stats.norm.ppf(1 - alpha / 2)

    if ci_method == "log-log":
        with np.errstate(divide="ignore", invalid="ignore"):
            log_s = np.log(survival)
            se_theta = np.sqrt(greenwood) / np.abs(log_s)
            lower = survival ** np.exp(z * se_theta)
            upper = survival ** np.exp(-z * se_theta)
    elif ci_method == "plain":
        with np.errstate(invalid="ignore"):
            half = z * survival * np.sqrt(greenwood)
        lower = np.clip(survival - half, 0.0, 1.0)
        upper = np.clip(survival + half, 0.0, 1.0)
    else:
        raise DataError(f"unknown ci_method {ci_method!r}")

    zero = survival <= 0.0
    survival = np.where(zero, 0.0, survival)
    lower = np.where(zero, 0.0, np.nan_to_num(lower, nan=0.0))
    upper = np.where(zero, 0.0, np.nan_to_num(upper, nan=1.0))
    lower = np.minimum(lower, survival)
    upper = np.maximum(upper, survival)

    return SurvivalCurve(
        event_times=tuple(float(x) for x in t),
        survival=tuple(float(x) for x in survival),
        at_risk=tuple(int(x) for x in n),
        n_events=tuple(int(x) for x in d),
        ci_lower=tuple(float(x) for x in lower),
        ci_upper=tuple(float(x) for x in upper),
        n_subjects=int(times.size),
        alpha=alpha,
        ci_method=ci_method,
    )


def survival_at(curve: SurvivalCurve, horizon: float) -> Tuple[float, float, float]:
    """Right-continuous step evaluation; (1, 1, 1) before the first event."""
    if horizon <= 0:
        raise DataError("horizon must be positive")
    k = int(np.searchsorted(np.asarray(curve.event_times), horizon, side="right")) - 1
    if k < 0:
        return 1.0, 1.0, 1.0
    return curve.survival[k], curve.ci_lower[k], curve.ci_upper[k]


def logrank(group_times: Sequence, group_events: Sequence, labels: Sequence[str] = ()) -> LogRankResult:
    """k-sample log-rank test with hypergeometric variance."""
    k = len(group_times)
    if k < 2 or len(group_events) != k:
        raise DataError("log-rank needs at least two groups with matching times and events")
    if any(len(g) == 0 for g in group_times):
        raise DataError("log-rank groups must be nonempty")

    times = np.concatenate([np.asarray(g, dtype=float) for g in group_times])
    events = np.concatenate([np.asarray(e, dtype=bool) for e in group_events])
    group = np.concatenate([np.full(len(g), i) for i, g in enumerate(group_times)])
    if not events.any():
        raise UndefinedStatisticError("log-rank statistic is undefined when every subject is censored")

    uniq = np.unique(times[events])
    # at risk per (time, group): subjects with time >= t
    at_risk = np.empty((len(uniq), k))
    deaths = np.empty((len(uniq), k))
    for g in range(k):
        tg = np.sort(times[group == g])
        at_risk[:, g] = len(tg) - np.searchsorted(tg, uniq, side="left")
        deaths[:, g] = np.bincount(
            np.searchsorted(uniq, times[(group == g) & events]), minlength=len(uniq)
        )
    n = at_risk.sum(axis=1)
    d = deaths.sum(axis=1)

    expected = (d[:, None] * at_risk / n[:, None]).sum(axis=0)
    observed = deaths.sum(axis=0)

    frac = at_risk / n[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(n > 1, d * (n - d) / (n - 1), 0.0)
    cov = np.einsum("t,tg,th->gh", scale, frac, -frac)
    cov[np.diag_indices(k)] += (scale[:, None] * frac).sum(axis=0)

    diff = (observed - expected)[:-1]
    v = cov[:-1, :-1]
    chi2 = float(diff @ np.linalg.pinv(v) @ diff)
    chi2 = max(chi2, 0.0)
    df = k - 1
    p_value = float(stats.chi2.sf(chi2, df))
    return LogRankResult(
        chi2=chi2,
        df=df,
        p_value=min(max(p_value, 0.0), 1.0),
        groups=tuple(labels) if labels else tuple(str(i) for i in range(k)),
        observed=tuple(float(x) for x in observed),
        expected=tuple(float(x) for x in expected),
    )


def export_curve_csv(curve: SurvivalCurve, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(
        {
            "time": curve.event_times,
            "at_risk": curve.at_risk,
            "n_events": curve.n_events,
            "survival": curve.survival,
            "ci_lower": curve.ci_lower,
            "ci_upper": curve.ci_upper,
        },
        columns=CURVE_COLUMNS,
    ).to_csv(path, index=False, lineterminator="\n")

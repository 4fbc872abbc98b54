"""Cox proportional-hazards regression on the log partial likelihood.

The objective is ``log PL(beta) - ridge/2 * ||beta||^2``, maximized by Newton steps
with step halving. Efron's tie correction is the default; Breslow is available and
gives identical results when event times are distinct.
"""

from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from core.config import settings
from core.errors import (
    ConvergenceError,
    DataError,
    DegenerateCovariateError,
    NotConvergedError,
    SeparationError,
)
from core.log import get_logger
from schemas import CoxFit, HazardRatio

logger = get_logger(__name__)

Ties = Literal["efron", "breslow"]


class CoxData:
    """Design sorted by time, centered, with its distinct-time grouping.

    Centering only shifts every linear predictor by the same constant, which the
    partial likelihood ignores; coefficients are unaffected.
    """

    def __init__(self, X_sorted: np.ndarray, T_sorted: np.ndarray, E_sorted: np.ndarray, order: np.ndarray):
        self.X = X_sorted
        self.T = T_sorted
        self.E = E_sorted
        self.order = order
        _, starts = np.unique(T_sorted, return_index=True)
        d = np.add.reduceat(E_sorted.astype(float), starts)
        self.group_starts = starts
        self.has_event = d > 0
        self.event_starts = starts[self.has_event]
        self.d = d[self.has_event]
        self.n_events = int(E_sorted.sum())

    @classmethod
    def build(cls, X, times, events) -> "CoxData":
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=bool)
        if X.shape[0] != times.shape[0] or times.shape != events.shape:
            raise DataError("X, times and events must have matching lengths")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(times))):
            raise DataError("design and times must be finite")
        order = np.argsort(times, kind="mergesort")
        Xs = X[order] - X.mean(axis=0)
        return cls(Xs, times[order], events[order], order)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def without(self, original_index: int) -> "CoxData":
        """Same data minus one subject (row index in the caller's original order)."""
        pos = int(np.flatnonzero(self.order == original_index)[0])
        keep = np.ones(self.n, dtype=bool)
        keep[pos] = False
        order = self.order[keep]
        order = order - (order > original_index)
        return CoxData(self.X[keep], self.T[keep], self.E[keep], order)


def _objective(data: CoxData, beta: np.ndarray, ties: Ties, ridge: float, need_info: bool = True):
    X, E = data.X, data.E
    eta = X @ beta
    shift = float(eta.max())
    w = np.exp(eta - shift)

    rs0 = np.cumsum(w[::-1])[::-1]
    wx = w[:, None] * X
    rs1 = np.cumsum(wx[::-1], axis=0)[::-1]
    starts = data.event_starts
    S0, S1 = rs0[starts], rs1[starts]

    we = w * E
    D0 = np.add.reduceat(we, data.group_starts)[data.has_event]
    D1 = np.add.reduceat(we[:, None] * X, data.group_starts, axis=0)[data.has_event]
    if need_info:
        wxx = wx[:, :, None] * X[:, None, :]
        S2 = np.cumsum(wxx[::-1], axis=0)[::-1][starts]
        D2 = np.add.reduceat(we[:, None, None] * X[:, :, None] * X[:, None, :], data.group_starts, axis=0)[
            data.has_event
        ]

    d = data.d
    loglik = float(eta[E].sum())
    grad = X[E].sum(axis=0)
    info = np.zeros((data.p, data.p))
    for l in range(int(d.max()) if d.size else 0):
        m = d > l
        frac = l / d[m] if ties == "efron" else np.zeros(int(m.sum()))
        phi = S0[m] - frac * D0[m]
        a = (S1[m] - frac[:, None] * D1[m]) / phi[:, None]
        loglik -= float(np.log(phi).sum()) + shift * int(m.sum())
        grad = grad - a.sum(axis=0)
        if need_info:
            B = (S2[m] - frac[:, None, None] * D2[m]) / phi[:, None, None]
            info += (B - a[:, :, None] * a[:, None, :]).sum(axis=0)

    unpenalized = loglik
    if ridge > 0:
        loglik -= 0.5 * ridge * float(beta @ beta)
        grad = grad - ridge * beta
        info = info + ridge * np.eye(data.p)
    return loglik, grad, info, unpenalized


def partial_likelihood(X, times, events, beta, ties: Ties = "efron", ridge: float = 0.0):
    """(objective, gradient, observed information) at ``beta``; objective is penalized when ridge > 0."""
    data = CoxData.build(X, times, events)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape != (data.p,):
        raise DataError(f"beta has {beta.size} entries, design has {data.p} columns")
    ll, grad, info, _ = _objective(data, beta, ties, ridge)
    return ll, grad, info


def _check_design(data: CoxData, names: Sequence[str]) -> None:
    if data.n < 2:
        raise DataError("Cox regression needs at least two subjects")
    if data.p < 1:
        raise DataError("Cox regression needs at least one covariate")
    if data.n_events == 0:
        raise DataError("Cox regression needs at least one event")
    constant = [names[k] for k in range(data.p) if np.ptp(data.X[:, k]) == 0]
    if constant:
        raise DegenerateCovariateError(f"covariate(s) constant across all rows: {', '.join(constant)}")


def fit_prepared(
    data: CoxData,
    ties: Ties = "efron",
    ridge: float = 0.0,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    names: Optional[Sequence[str]] = None,
    separation_bound: Optional[float] = None,
) -> CoxFit:
    tol = settings.COX_TOL if tol is None else tol
    max_iter = settings.COX_MAX_ITER if max_iter is None else max_iter
    bound = settings.COX_SEPARATION_BOUND if separation_bound is None else separation_bound
    names = tuple(names) if names is not None else tuple(f"x{k}" for k in range(data.p))
    if len(names) != data.p:
        raise DataError("names must match the number of covariates")
    if ties not in ("efron", "breslow"):
        raise DataError(f"unknown ties method {ties!r}")
    if ridge < 0:
        raise DataError("ridge must be nonnegative")
    _check_design(data, names)

    beta = np.zeros(data.p)
    ll, grad, info, unpen = _objective(data, beta, ties, ridge)
    null_ll = unpen
    converged = False
    iterations = 0
    while True:
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        if iterations >= max_iter:
            break
        try:
            delta = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise SeparationError("information matrix is singular; coefficients are not identified", names)
        step = delta
        for _ in range(60):
            candidate = beta + step
            ll_c, grad_c, info_c, unpen_c = _objective(data, candidate, ties, ridge)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            step = step / 2
        else:
            raise ConvergenceError("step halving could not improve the partial likelihood", beta)
        beta, ll, grad, info, unpen = candidate, ll_c, grad_c, info_c, unpen_c
        iterations += 1
        logger.debug(f"iteration {iterations}: loglik={ll:.8f} max|grad|={np.max(np.abs(grad)):.2e}")
        if ridge == 0 and np.any(np.abs(beta) > bound):
            offending = [names[k] for k in np.flatnonzero(np.abs(beta) > bound)]
            raise SeparationError(
                f"monotone likelihood: |beta| exceeded {bound:g} for {', '.join(offending)}", offending
            )

    if not converged:
        raise ConvergenceError(f"Newton iterations did not converge after {max_iter} steps", beta)

    eigvals, eigvecs = np.linalg.eigh(info)
    weak = eigvals < settings.COX_MIN_INFORMATION
    if np.any(weak):
        involved = np.any(np.abs(eigvecs[:, weak]) > 0.1, axis=1)
        offending = [names[k] for k in np.flatnonzero(involved)]
        raise SeparationError(
            f"non-identified coefficient(s) (risk sets uninformative or separation): {', '.join(offending)}",
            offending,
        )

    covariance = np.linalg.inv(info)
    covariance = (covariance + covariance.T) / 2
    return CoxFit(
        beta=tuple(float(b) for b in beta),
        covariance=tuple(tuple(float(v) for v in row) for row in covariance),
        log_likelihood=unpen,
        penalized_log_likelihood=ll,
        null_log_likelihood=null_ll,
        n_iterations=iterations,
        converged=True,
        gradient_max_norm=float(np.max(np.abs(grad))),
        ties_method=ties,
        ridge=float(ridge),
        names=names,
        n_subjects=data.n,
        n_events=data.n_events,
    )


def fit_cox(
    X,
    times,
    events,
    ties: Ties = "efron",
    ridge: float = 0.0,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    names: Optional[Sequence[str]] = None,
    separation_bound: Optional[float] = None,
) -> CoxFit:
    data = CoxData.build(X, times, events)
    return fit_prepared(data, ties=ties, ridge=ridge, tol=tol, max_iter=max_iter, names=names,
                        separation_bound=separation_bound)


def hazard_ratios(fit: CoxFit, scales: Optional[Sequence[float]] = None, alpha: float = 0.05) -> List[HazardRatio]:
    """Per-coefficient hazard ratios for ``scale`` covariate units with Wald CIs and p-values."""
    if not fit.converged:
        raise NotConvergedError("hazard ratios need a converged fit")
    scales = [1.0] * len(fit.beta) if scales is None else list(scales)
    if len(scales) != len(fit.beta):
        raise DataError("one scale per coefficient is required")
    z_crit = stats.norm.ppf(1 - alpha / 2)
    out = []
    for name, beta, se, scale in zip(fit.names, fit.beta, fit.se, scales):
        if se > 0:
            p = float(2 * stats.norm.sf(abs(beta / se)))
        else:
            p = 1.0 if beta == 0 else 0.0
        out.append(
            HazardRatio(
                name=name,
                hr=float(np.exp(scale * beta)),
                ci_lower=float(np.exp(scale * (beta - z_crit * se))),
                ci_upper=float(np.exp(scale * (beta + z_crit * se))),
                p_value=p,
                scale=scale,
                beta=beta,
                se=float(se),
            )
        )
    return out


def linear_predictor(fit: CoxFit, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (len(fit.beta),):
        raise DataError(f"covariate vector has shape {x.shape}, model expects ({len(fit.beta)},)")
    return float(np.dot(fit.coef, x))


def linear_predictors(fit: CoxFit, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(fit.beta):
        raise DataError(f"design has shape {X.shape}, model expects (n, {len(fit.beta)})")
    return X @ fit.coef


def _one_hot(groups, reference) -> Tuple[np.ndarray, List]:
    groups = np.asarray(groups)
    labels = sorted(set(groups.tolist()))
    if reference not in labels:
        raise DataError(f"reference group {reference!r} has no cases")
    others = [g for g in labels if g != reference]
    X = np.column_stack([(groups == g).astype(float) for g in others]) if others else np.empty((len(groups), 0))
    return X, others


def fit_univariable_groups(
    groups, times, events, reference=1, ridge: float = 0.0, ties: Ties = "efron", alpha: float = 0.05
) -> List[HazardRatio]:
    """Hazard ratio of every non-reference group against ``reference`` (one-hot coding)."""
    X, others = _one_hot(groups, reference)
    if not others:
        raise DataError("need at least one non-reference group")
    fit = fit_cox(X, times, events, ties=ties, ridge=ridge, names=[f"group_{g}" for g in others])
    return hazard_ratios(fit, alpha=alpha)


def grade_design(
    grade_feature,
    tstage_high=None,
    grade_coding: Literal["categorical", "ordinal"] = "categorical",
    reference=None,
) -> Tuple[np.ndarray, List[str]]:
    """Design for grade (one-hot against ``reference``, default the lowest level, or ordinal),
    optionally followed by a T3/T4 indicator column."""
    grade_feature = np.asarray(grade_feature)
    if len(set(grade_feature.tolist())) < 2:
        raise DegenerateCovariateError("grade must vary")
    if grade_coding == "categorical":
        reference = min(grade_feature.tolist()) if reference is None else reference
        X, others = _one_hot(grade_feature, reference)
        names = [f"grade_{g:g}" if isinstance(g, float) else f"grade_{g}" for g in others]
    elif grade_coding == "ordinal":
        X, names = grade_feature.astype(float)[:, None], ["grade"]
    else:
        raise DataError(f"unknown grade coding {grade_coding!r}")
    if tstage_high is not None:
        tstage = np.asarray(tstage_high, dtype=float)
        if np.ptp(tstage) == 0:
            raise DegenerateCovariateError("T-stage must vary")
        X = np.column_stack([X, tstage])
        names = names + ["tstage_high"]
    return X, names


def fit_multivariable(
    grade_feature,
    tstage_high,
    times,
    events,
    ridge: float = 0.02,
    grade_coding: Literal["categorical", "ordinal"] = "categorical",
    reference=1,
    ties: Ties = "efron",
) -> CoxFit:
    """Grade plus a T3/T4 indicator, ridge-penalized."""
    X, names = grade_design(grade_feature, tstage_high, grade_coding, reference)
    return fit_cox(X, times, events, ties=ties, ridge=ridge, names=names)


def fit_report(fit: CoxFit, scales: Optional[Sequence[float]] = None, alpha: float = 0.05) -> Dict[str, object]:
    hrs = hazard_ratios(fit, scales, alpha)
    return {
        "names": list(fit.names),
        "beta": list(fit.beta),
        "se": [h.se for h in hrs],
        "hr": [h.hr for h in hrs],
        "scale": [h.scale for h in hrs],
        "ci": [[h.ci_lower, h.ci_upper] for h in hrs],
        "p": [h.p_value for h in hrs],
        "loglik": fit.log_likelihood,
        "penalized_loglik": fit.penalized_log_likelihood,
        "null_loglik": fit.null_log_likelihood,
        "iterations": fit.n_iterations,
        "ties": fit.ties_method,
        "ridge": fit.ridge,
        "n": fit.n_subjects,
        "events": fit.n_events,
    }

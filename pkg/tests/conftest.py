"""Shared fixtures and brute-force oracles."""

import numpy as np
import pytest
from scipy import optimize

from core.cohort import make_simulation_params, simulate_cohort
from schemas import Case, Cohort


# --- Oracles -------------------------------------------------------------------------

def brute_force_c_index(scores, times, events):
    """O(n^2) pair enumeration: (concordant + 0.5 * tied) / comparable, or None."""
    s = np.asarray(scores, dtype=float)
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=bool)
    # i fails first and the pair is comparable
    first = (t[:, None] < t[None, :]) & e[:, None]
    first |= (t[:, None] == t[None, :]) & e[:, None] & ~e[None, :]
    comparable = int(first.sum())
    if comparable == 0:
        return None
    concordant = int((first & (s[:, None] > s[None, :])).sum())
    tied = int((first & (s[:, None] == s[None, :])).sum())
    return (concordant + 0.5 * tied) / comparable


def explicit_partial_loglik(X, times, events, beta, ties="efron"):
    """Log partial likelihood by looping over distinct event times."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    X = np.asarray(X, dtype=float).reshape(len(times), -1)
    eta = X @ np.atleast_1d(np.asarray(beta, dtype=float))
    ll = 0.0
    for t in np.unique(times[events]):
        dying = (times == t) & events
        at_risk = times >= t
        d = int(dying.sum())
        risk_sum = np.exp(eta[at_risk]).sum()
        tied_sum = np.exp(eta[dying]).sum()
        ll += eta[dying].sum()
        for l in range(d):
            frac = l / d if ties == "efron" else 0.0
            ll -= np.log(risk_sum - frac * tied_sum)
    return ll


def golden_section_beta(x, times, events, ties="efron", bounds=(-10.0, 10.0)):
    """1-D maximizer of the explicit partial likelihood: coarse grid, then golden section."""
    grid = np.linspace(bounds[0], bounds[1], 401)
    values = [explicit_partial_loglik(x, times, events, b, ties) for b in grid]
    k = int(np.argmax(values))
    if k in (0, len(grid) - 1):
        return float(grid[k])
    res = optimize.minimize_scalar(
        lambda b: -explicit_partial_loglik(x, times, events, b, ties),
        bracket=(grid[k - 1], grid[k], grid[k + 1]),
        method="golden",
        tol=1e-10,
    )
    return float(res.x)


def grid_polish_beta(X, times, events, ties="efron", half_width=5.0, steps=41):
    """2-D maximizer of the explicit partial likelihood: exhaustive grid, then Nelder-Mead polish."""
    axis = np.linspace(-half_width, half_width, steps)
    best, start = -np.inf, None
    for b0 in axis:
        for b1 in axis:
            value = explicit_partial_loglik(X, times, events, [b0, b1], ties)
            if value > best:
                best, start = value, np.array([b0, b1])
    res = optimize.minimize(
        lambda b: -explicit_partial_loglik(X, times, events, b, ties),
        start,
        method="Nelder-Mead",
        options={"xatol": 1e-9, "fatol": 1e-13, "maxiter": 4000},
    )
    return res.x


def exhaustive_threshold(scores, labels, target):
    """Smallest observed score t with precision(score >= t) >= target, or None."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    for t in np.unique(scores):
        sel = scores >= t
        if labels[sel].mean() >= target:
            return float(t)
    return None


def hand_grade_group(p3, p4, p5, min_share=5.0):
    """Primary/secondary Gleason pattern rule, written out case by case."""
    total = p3 + p4 + p5
    shares = {3: 100 * p3 / total, 4: 100 * p4 / total, 5: 100 * p5 / total}
    primary = max((5, 4, 3), key=lambda g: shares[g])
    rest = [g for g in (5, 4, 3) if g != primary]
    second = max(rest, key=lambda g: shares[g])
    if shares[second] >= min_share:
        secondary = second
    else:
        higher_present = [g for g in (3, 4, 5) if shares[g] > 0 and g > primary]
        secondary = max(higher_present) if higher_present else primary
    score = {(3, 3): 1, (3, 4): 2, (4, 3): 3}
    if (primary, secondary) in score:
        return score[(primary, secondary)]
    return 4 if primary + secondary == 8 else 5


# --- Builders ------------------------------------------------------------------------

def make_case(case_id="C001", **overrides):
    fields = dict(
        case_id=case_id,
        pct_gp3=60.0,
        pct_gp4=30.0,
        pct_gp5=10.0,
        tumor_present=True,
        pathologist_gg=2,
        t_category="T2",
        surgery_year=2005,
        followup_years=10.0,
        dss_event=False,
        os_event=False,
    )
    fields.update(overrides)
    return Case(**fields)


def make_cohort(cases, label="test"):
    return Cohort(cases=tuple(cases), label=label)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sim_cohort():
    """Small synthetic cohort; raised baseline hazard so folds and strata have events."""
    params = make_simulation_params(n_cases=400, seed=7, baseline_hazard=0.004)
    return simulate_cohort(params)

"""Harrell's C-index for right-censored outcomes.

A pair is comparable when the member with the shorter time had an event, or when
times tie and only one member had the event (that member fails first). The pair is
concordant when the earlier failure carries the strictly higher score; equal scores
count one half.
"""

from typing import Tuple

import numpy as np

from core.errors import DataError, UndefinedMetricError
from schemas import ConcordanceResult


def _preceding_counts(ranks: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """For each position p, how many earlier positions hold a smaller / equal rank.

    Bottom-up merge counting: at every level each right-half element is compared with
    the left half of its pair block through one global sorted key array.
    """
    n = ranks.size
    less = np.zeros(n, dtype=np.int64)
    equal = np.zeros(n, dtype=np.int64)
    if n < 2:
        return less, equal
    pos = np.arange(n, dtype=np.int64)
    width = int(ranks.max()) + 2
    half = 1
    while half < n:
        block = pos // (2 * half)
        in_left = (pos % (2 * half)) < half
        keys = block * width + ranks
        left_keys = np.sort(keys[in_left])
        right = ~in_left
        base = block[right] * width
        lo = np.searchsorted(left_keys, base, side="left")
        at = np.searchsorted(left_keys, keys[right], side="left")
        upto = np.searchsorted(left_keys, keys[right], side="right")
        less[right] += at - lo
        equal[right] += upto - at
        half *= 2
    return less, equal


def _pairs_within(keys: np.ndarray) -> int:
    _, counts = np.unique(keys, return_counts=True, axis=0)
    return int((counts * (counts - 1) // 2).sum())


def c_index(scores, times, events) -> ConcordanceResult:
    scores = np.asarray(scores, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    if not (scores.shape == times.shape == events.shape) or scores.ndim != 1:
        raise DataError("scores, times and events must be 1-D and equally long")
    if np.any(np.isnan(scores)) or np.any(np.isnan(times)):
        raise DataError("scores and times must not contain NaN")

    _, ranks = np.unique(scores, return_inverse=True)
    ranks = ranks.astype(np.int64).ravel()

    # later times first; at equal time censored before events; then ascending score
    order = np.lexsort((ranks, events, -times))
    less, equal = _preceding_counts(ranks[order])
    ev = events[order]
    positions = np.arange(times.size, dtype=np.int64)

    total = int(positions[ev].sum())
    n_less = int(less[ev].sum())
    n_equal = int(equal[ev].sum())

    # remove event pairs sharing a time: they precede each other in the order but are not comparable
    ev_times = times[events]
    ev_ranks = ranks[events]
    tied_total = _pairs_within(ev_times)
    tied_equal = _pairs_within(np.column_stack([ev_times, ev_ranks])) if ev_times.size else 0
    tied_less = tied_total - tied_equal

    comparable = total - tied_total
    concordant = n_less - tied_less
    tied_score = n_equal - tied_equal
    discordant = comparable - concordant - tied_score
    if comparable == 0:
        raise UndefinedMetricError("C-index is undefined: no comparable pairs")
    return ConcordanceResult(
        c_index=(concordant + 0.5 * tied_score) / comparable,
        n_concordant=concordant,
        n_discordant=discordant,
        n_tied_score=tied_score,
        n_comparable=comparable,
    )

"""Classification and correlation metrics for frozen-embedding probes."""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import numpy.typing as npt
from scipy import stats
from sklearn.metrics import f1_score

from histo_ssl.errors import DataError, ParameterError

# b + c at or above which McNemar uses the chi-squared approximation
MCNEMAR_EXACT_BELOW = 25


def _same_length(*arrays: npt.ArrayLike) -> Tuple[npt.NDArray, ...]:
    arrays = tuple(np.asarray(a) for a in arrays)
    lengths = {a.shape[0] for a in arrays}
    if len(lengths) != 1:
        raise ParameterError(f"inputs must have the same length, got {sorted(lengths)}")
    return arrays


def weighted_f1(preds: npt.ArrayLike, labels: npt.ArrayLike) -> float:
    """Per-class F1 weighted by class support; classes absent from the labels
    are left out."""
    preds, labels = _same_length(preds, labels)
    if labels.size == 0:
        raise ParameterError("weighted F1 needs at least one label")
    return float(
        f1_score(labels, preds, labels=np.unique(labels), average="weighted", zero_division=0)
    )


def accuracy(preds: npt.ArrayLike, labels: npt.ArrayLike) -> float:
    preds, labels = _same_length(preds, labels)
    if labels.size == 0:
        raise ParameterError("accuracy needs at least one label")
    return float(np.mean(preds == labels))


@dataclass(frozen=True)
class ContingencyTable:
    """Paired outcomes of two models on one test set"""

    b: int  # A right, B wrong
    c: int  # A wrong, B right
    both_right: int
    both_wrong: int

    @property
    def n(self) -> int:
        return self.b + self.c + self.both_right + self.both_wrong


def contingency(
    preds_a: npt.ArrayLike, preds_b: npt.ArrayLike, labels: npt.ArrayLike
) -> ContingencyTable:
    preds_a, preds_b, labels = _same_length(preds_a, preds_b, labels)
    right_a = preds_a == labels
    right_b = preds_b == labels
    return ContingencyTable(
        b=int(np.sum(right_a & ~right_b)),
        c=int(np.sum(~right_a & right_b)),
        both_right=int(np.sum(right_a & right_b)),
        both_wrong=int(np.sum(~right_a & ~right_b)),
    )


def mcnemar_from_counts(b: int, c: int, exact: Optional[bool] = None) -> Tuple[float, float]:
    """McNemar's test on the discordant counts.

    ``exact=None`` picks the continuity-corrected chi-squared statistic when
    b + c >= 25 and the exact two-sided binomial test otherwise (statistic
    min(b, c)). b + c = 0 gives p = 1. The continuity correction is clamped at
    zero, so b = c gives a statistic of 0 (p = 1) rather than 1 / n.
    """
    if b < 0 or c < 0:
        raise ParameterError(f"discordant counts must be >= 0, got b={b}, c={c}")
    n = b + c
    if n == 0:
        return 0.0, 1.0
    if exact is None:
        exact = n < MCNEMAR_EXACT_BELOW
    if exact:
        p = stats.binomtest(b, n, 0.5, alternative="two-sided").pvalue
        return float(min(b, c)), float(min(1.0, p))
    statistic = max(abs(b - c) - 1.0, 0.0) ** 2 / n
    return float(statistic), float(stats.chi2.sf(statistic, df=1))


def mcnemar(
    preds_a: npt.ArrayLike, preds_b: npt.ArrayLike, labels: npt.ArrayLike
) -> Tuple[float, float]:
    """(statistic, p) for whether two models differ on the same test set."""
    table = contingency(preds_a, preds_b, labels)
    return mcnemar_from_counts(table.b, table.c)


def pearson(x: npt.ArrayLike, y: npt.ArrayLike) -> float:
    x, y = _same_length(x, y)
    if x.shape[0] < 2:
        raise ParameterError(f"pearson needs at least 2 points, got {x.shape[0]}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DataError("correlation is undefined for a constant input")
    return float(stats.pearsonr(x.astype(np.float64), y.astype(np.float64)).statistic)

"""
Significance testing, outlier filtering and accuracy bookkeeping.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2, rankdata

from .exceptions import DataError

logger = logging.getLogger(__name__)

SIGNIFICANCE_LEVEL = 0.01
TUKEY_K = 1.5
# Largest number of group assignments the exact test will enumerate
EXACT_LIMIT = 2_000_000


@dataclass
class ConfusionMatrix:
    """Counts indexed by (actual, predicted) in class order."""

    classes: Tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        self.classes = tuple(str(c) for c in self.classes)
        self.counts = np.asarray(self.counts, dtype=int)
        c = len(self.classes)
        if self.counts.shape != (c, c):
            raise DataError(f"confusion matrix must be {c}x{c}, got shape {self.counts.shape}")
        if np.any(self.counts < 0):
            raise DataError("confusion matrix counts must be non-negative")

    @classmethod
    def from_predictions(cls, actual: Sequence, predicted: Sequence,
                         classes: Optional[Sequence[str]] = None) -> "ConfusionMatrix":
        actual = np.asarray(actual).astype(str)
        predicted = np.asarray(predicted).astype(str)
        if actual.shape != predicted.shape:
            raise DataError(f"{actual.size} labels but {predicted.size} predictions")
        if classes is None:
            classes = np.unique(np.concatenate([actual, predicted])).tolist()
        lookup = {c: i for i, c in enumerate(classes)}
        counts = np.zeros((len(classes), len(classes)), dtype=int)
        for a, p in zip(actual, predicted):
            counts[lookup[a], lookup[p]] += 1
        return cls(tuple(classes), counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        if self.total == 0:
            raise DataError("accuracy of an empty confusion matrix")
        return float(np.trace(self.counts) / self.total)

    def recall(self, cls: str) -> float:
        """Fraction of actual `cls` samples predicted as `cls`."""
        i = self.classes.index(str(cls))
        row = self.counts[i].sum()
        return float(self.counts[i, i] / row) if row else 0.0

    def recalls(self) -> Dict[str, float]:
        return {c: self.recall(c) for c in self.classes}

    def to_dict(self) -> Dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}


def accuracy(cm: ConfusionMatrix) -> float:
    return cm.accuracy()


@dataclass
class SignificanceVerdict:
    statistic: float
    p_value: float
    significant: bool
    medians: List[float]
    alpha: float = SIGNIFICANCE_LEVEL


def _check_groups(groups: Sequence[Sequence[float]]) -> List[np.ndarray]:
    if len(groups) < 2:
        raise DataError(f"Kruskal-Wallis needs at least 2 groups, got {len(groups)}")
    arrays = [np.asarray(g, dtype=float).ravel() for g in groups]
    if any(a.size == 0 for a in arrays):
        raise DataError("every group must be non-empty")
    if sum(a.size for a in arrays) < 3:
        raise DataError("Kruskal-Wallis needs at least 3 values in total")
    return arrays


def _h_statistic(ranks: np.ndarray, sizes: Sequence[int], tie_correction: float) -> float:
    n = ranks.size
    bounds = np.cumsum([0] + list(sizes))
    total = sum(ranks[bounds[i]:bounds[i + 1]].sum() ** 2 / sizes[i] for i in range(len(sizes)))
    h = 12.0 / (n * (n + 1)) * total - 3.0 * (n + 1)
    return max(h / tie_correction, 0.0)


def _tie_correction(values: np.ndarray) -> float:
    _, ties = np.unique(values, return_counts=True)
    n = values.size
    return 1.0 - float(np.sum(ties ** 3 - ties)) / (n ** 3 - n)


def kruskal_wallis(groups: Sequence[Sequence[float]], alpha: float = SIGNIFICANCE_LEVEL) -> SignificanceVerdict:
    """
    Kruskal-Wallis H test on midranks with tie correction.

    The p-value is the chi-square upper tail with (groups - 1) degrees of
    freedom. When every value is identical H is 0 and p is 1.
    """
    arrays = _check_groups(groups)
    pooled = np.concatenate(arrays)
    medians = [float(np.median(a)) for a in arrays]
    correction = _tie_correction(pooled)
    if correction <= 0:
        return SignificanceVerdict(0.0, 1.0, False, medians, alpha)
    h = _h_statistic(rankdata(pooled), [a.size for a in arrays], correction)
    p = float(min(max(chi2.sf(h, len(arrays) - 1), 0.0), 1.0))
    return SignificanceVerdict(float(h), p, p < alpha, medians, alpha)


def _assignments(n: int, sizes: Sequence[int]):
    """Every way to deal positions 0..n-1 into groups of the given sizes."""

    def deal(remaining: Tuple[int, ...], depth: int):
        if depth == len(sizes) - 1:
            yield [remaining]
            return
        for chosen in itertools.combinations(remaining, sizes[depth]):
            rest = tuple(i for i in remaining if i not in chosen)
            for tail in deal(rest, depth + 1):
                yield [chosen] + tail

    yield from deal(tuple(range(n)), 0)


def kruskal_wallis_exact(groups: Sequence[Sequence[float]], alpha: float = SIGNIFICANCE_LEVEL) -> SignificanceVerdict:
    """Kruskal-Wallis with the p-value from full permutation enumeration (small samples)."""
    arrays = _check_groups(groups)
    sizes = [a.size for a in arrays]
    pooled = np.concatenate(arrays)
    n = pooled.size
    medians = [float(np.median(a)) for a in arrays]
    count = math.factorial(n) // math.prod(math.factorial(s) for s in sizes)
    if count > EXACT_LIMIT:
        raise DataError(f"exact test would enumerate {count} assignments (limit {EXACT_LIMIT})")
    correction = _tie_correction(pooled)
    if correction <= 0:
        return SignificanceVerdict(0.0, 1.0, False, medians, alpha)

    ranks = rankdata(pooled)
    observed = _h_statistic(ranks, sizes, correction)
    at_least = 0
    total = 0
    for assignment in _assignments(n, sizes):
        permuted = np.concatenate([ranks[list(idx)] for idx in assignment])
        if _h_statistic(permuted, sizes, correction) >= observed - 1e-9:
            at_least += 1
        total += 1
    p = at_least / total
    return SignificanceVerdict(float(observed), p, p < alpha, medians, alpha)


@dataclass
class Comparison:
    """Verdict of a two-sample test plus which side ranks higher."""

    verdict: SignificanceVerdict
    direction: str

    @property
    def significant(self) -> bool:
        return self.verdict.significant

    @property
    def p_value(self) -> float:
        return self.verdict.p_value


def compare_samples(a: Sequence[float], b: Sequence[float], alpha: float = SIGNIFICANCE_LEVEL) -> Comparison:
    """Kruskal-Wallis on two samples; direction is 'higher', 'lower' or 'same' for a versus b."""
    verdict = kruskal_wallis([a, b], alpha)
    a = np.asarray(a, dtype=float)
    ranks = rankdata(np.concatenate([a, np.asarray(b, dtype=float)]))
    mean_a, mean_b = ranks[:a.size].mean(), ranks[a.size:].mean()
    if math.isclose(mean_a, mean_b):
        direction = "same"
    else:
        direction = "higher" if mean_a > mean_b else "lower"
    return Comparison(verdict, direction)


def quartiles(values: Sequence[float]) -> Tuple[float, float, float]:
    """(Q1, median, Q3) by linear interpolation."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DataError("quartiles of an empty sample")
    q1, q2, q3 = np.percentile(values, [25, 50, 75])
    return float(q1), float(q2), float(q3)


def tukey_mask(values: Sequence[float], k: float = TUKEY_K) -> np.ndarray:
    """
    Boolean mask of the values inside the fences, applied until nothing changes.

    A pass that would leave fewer than 4 survivors is not applied, so the
    surviving values are themselves a fixed point of the filter.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 4:
        raise DataError(f"Tukey filtering needs at least 4 values, got {values.size}")
    keep = np.ones(values.size, dtype=bool)
    while True:
        q1, _, q3 = quartiles(values[keep])
        spread = q3 - q1
        inside = (values >= q1 - k * spread) & (values <= q3 + k * spread)
        updated = keep & inside
        if updated.sum() == keep.sum() or updated.sum() < 4:
            break
        keep = updated
    return keep


def tukey_filter(values: Sequence[float], k: float = TUKEY_K) -> List[float]:
    """Drop values outside [Q1 - k*IQR, Q3 + k*IQR]; survivors keep their order."""
    values = np.asarray(values, dtype=float)
    return values[tukey_mask(values, k)].tolist()


def median(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DataError("median of an empty sample")
    return float(np.median(values))

"""Thresholding shrinkage weights into reject / accept decisions.

The threshold is the midpoint of the two cluster means of an exact 1-d
two-means split, found by scanning every split point of the sorted weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import as_dataset
from .estimators import NPMLESolution, kw_weight
from .gh import ShrinkageResult

FALLBACK_XI = 0.5


class DegenerateClusteringError(ValueError):
    """All weights are equal, so no two-cluster split exists."""


@dataclass(frozen=True)
class TestDecision:
    """Rejections at threshold ``xi``.

    ``fallback`` marks decisions made at ``FALLBACK_XI`` because the weights
    could not be clustered; ``clipped`` marks weights that were clipped to
    [0, 1] before clustering.
    """

    __test__ = False  # keep pytest from collecting this class

    xi: float
    reject: np.ndarray
    centers: tuple
    n_rejected: int
    fallback: bool = False
    clipped: bool = False


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def misclassified(self) -> int:
        return self.fp + self.fn


def split_sse(sorted_w: np.ndarray) -> np.ndarray:
    """Within-cluster SSE for every split ``k`` = size of the low cluster, 1..n-1."""
    x = sorted_w - sorted_w.mean()  # centering limits cancellation
    n = x.size
    k = np.arange(1, n)
    s = np.cumsum(x)[:-1]
    tot, tot2 = x.sum(), np.dot(x, x)
    return tot2 - s * s / k - (tot - s) ** 2 / (n - k)


def two_means_threshold(weights):
    """Globally optimal two-means split of 1-d weights.

    Returns ``(xi, (low_center, high_center))`` with ``xi`` the midpoint of
    the centers.  Only splits between distinct values are considered, so tied
    weights always land in the same cluster.
    """
    w = np.asarray(weights, dtype=float).ravel()
    if w.size < 2:
        raise DegenerateClusteringError("need at least two weights")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    x = np.sort(w)
    if x[0] == x[-1]:
        raise DegenerateClusteringError("degenerate clustering: all weights are equal")
    sse = split_sse(x)
    sse[x[:-1] == x[1:]] = np.inf
    k = int(np.argmin(sse)) + 1
    lo, hi = x[:k].mean(), x[k:].mean()
    return 0.5 * (lo + hi), (float(lo), float(hi))


def threshold_weights(weights, on_degenerate: str = "raise", clipped: bool = False) -> TestDecision:
    """Reject where the weight exceeds the two-means threshold."""
    w = np.asarray(weights, dtype=float)
    try:
        xi, centers = two_means_threshold(w)
        fallback = False
    except DegenerateClusteringError:
        if on_degenerate != "fallback":
            raise
        xi, centers, fallback = FALLBACK_XI, (float("nan"), float("nan")), True
    reject = w > xi
    return TestDecision(
        xi=float(xi), reject=reject, centers=centers, n_rejected=int(reject.sum()), fallback=fallback, clipped=clipped
    )


def decide(shr: ShrinkageResult, on_degenerate: str = "raise") -> TestDecision:
    """Reject H0_i when the pseudo inclusion probability 1 - E(kappa_i | y_i) exceeds xi."""
    return threshold_weights(shr.inclusion, on_degenerate)


def kw_decide(sol: NPMLESolution, counts, on_degenerate: str = "raise") -> TestDecision:
    """Two-means thresholding of the KW ratios P_G(y + 1) / P_G(y), clipped to [0, 1]."""
    y = as_dataset(counts).y
    w = kw_weight(sol, y)
    c = np.clip(w, 0.0, 1.0)
    return threshold_weights(c, on_degenerate, clipped=bool(np.any(c != w)))


def confusion(decision: TestDecision, truth) -> ConfusionCounts:
    """Confusion counts of the decision against true non-null labels."""
    r = np.asarray(decision.reject, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if r.shape != t.shape:
        raise ValueError(f"decision has {r.size} entries, truth has {t.size}")
    return ConfusionCounts(
        tp=int(np.sum(r & t)), fp=int(np.sum(r & ~t)), tn=int(np.sum(~r & ~t)), fn=int(np.sum(~r & t))
    )

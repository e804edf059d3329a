"""Learning-to-rank objective: 0-1 rank, base-2 logistic surrogate, per-unit
loss and its exact per-score gradients.

All of the surrogate math is base-2 throughout: sigma(z) = log2(1 + 2^-z) and
d sigma / dz = -2^-z / (1 + 2^-z), with no ln 2 factor anywhere.  The gradient
helpers use saturating stable forms so scores of any magnitude never overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_LN2 = math.log(2.0)


@dataclass(frozen=True)
class UnitScores:
    """Similarity scores of one ranking unit: the positive pair's score and
    one score per sampled mismatch reference."""

    positive_score: float
    negative_scores: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "negative_scores", tuple(float(s) for s in self.negative_scores))
        object.__setattr__(self, "positive_score", float(self.positive_score))
        if len(self.negative_scores) < 1:
            raise ValueError("a ranking unit needs at least one negative score")
        if not math.isfinite(self.positive_score) or not all(
                math.isfinite(s) for s in self.negative_scores):
            raise ValueError("unit scores must be finite")


@dataclass(frozen=True)
class UnitGrads:
    """Loss gradients w.r.t. the scores of one unit; d_positive is minus the
    sum of d_negatives by construction."""

    d_positive: float
    d_negatives: tuple[float, ...]


def surrogate_sigma(z: float) -> float:
    """sigma(z) = log2(1 + 2^-z), overflow-free for any finite z.

    For z << 0 the identity sigma(z) = -z + log2(1 + 2^z) is used.
    """
    z = float(z)
    if not math.isfinite(z):
        raise ValueError(f"surrogate input must be finite, got {z}")
    if z >= 0:
        return math.log1p(2.0 ** (-z)) / _LN2
    return -z + math.log1p(2.0 ** z) / _LN2


def stable_delta_ratio(d: float) -> float:
    """delta / (1 + delta) for delta = 2^d, i.e. 1 / (1 + 2^-d), in (0, 1).

    Saturates cleanly to 0.0 / 1.0 at extreme d instead of overflowing.
    """
    d = float(d)
    if not math.isfinite(d):
        raise ValueError(f"delta-ratio input must be finite, got {d}")
    if d >= 0:
        return 1.0 / (1.0 + 2.0 ** (-d))
    e = 2.0 ** d
    return e / (1.0 + e)


def zero_one_rank(positive_score: float, gallery_scores) -> int:
    """Number of gallery scores strictly greater than the positive score.

    Ties are not counted (strict inequality); an empty gallery gives 0.
    """
    pos = float(positive_score)
    gallery = np.asarray(list(gallery_scores), dtype=float)
    if not math.isfinite(pos) or (gallery.size and not np.all(np.isfinite(gallery))):
        raise ValueError("rank inputs must be finite")
    return int(np.count_nonzero(gallery > pos))


def unit_loss(s: UnitScores) -> float:
    """sum over references of sigma(positive - negative)."""
    return sum(surrogate_sigma(s.positive_score - neg) for neg in s.negative_scores)


def unit_grad(s: UnitScores) -> UnitGrads:
    """Exact gradients of unit_loss w.r.t. each score.

    d_negative[j] = 1 / (1 + 2^(positive - negative_j)), each in (0, 1);
    d_positive = -sum_j d_negative[j].
    """
    d_neg = tuple(stable_delta_ratio(neg - s.positive_score) for neg in s.negative_scores)
    return UnitGrads(d_positive=-sum(d_neg), d_negatives=d_neg)


def batch_loss(units) -> float:
    """Sum of unit losses over a non-empty batch."""
    units = list(units)
    if not units:
        raise ValueError("batch_loss requires at least one unit")
    return sum(unit_loss(u) for u in units)

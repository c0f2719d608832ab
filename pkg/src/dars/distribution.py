"""Class-frequency counting, KL divergence, and desired pseudo-label counts.

The labeling engine needs three quantitative pieces: how pixels distribute
over classes in a reference set, how far two such distributions are apart,
and how many pixels of each class a labeling budget should produce so the
pseudo-label distribution matches the reference exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import EmptyDistributionError, ShapeError
from .tensor_store import IGNORE, LabelMap, ProbabilityVolume

#: smoothing mass added per class when a reported KL must stay finite
KL_EPSILON = 1e-12


def round_half_up(x: float) -> int:
    """Deterministic scalar rounding; ties go up, never to even."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ClassDistribution:
    """Per-class pixel counts with normalized frequencies."""

    counts: np.ndarray  # int64, length C
    total: int
    freqs: np.ndarray  # float64, sums to 1

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> "ClassDistribution":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 1:
            raise ShapeError(f"counts must be 1-D, got shape {counts.shape}")
        if (counts < 0).any():
            raise ShapeError("negative class counts")
        total = int(counts.sum())
        if total == 0:
            raise EmptyDistributionError("no countable pixels")
        return cls(counts=counts, total=total, freqs=counts / total)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    def merged(self, other: "ClassDistribution") -> "ClassDistribution":
        """Associative merge for sharded counting."""
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge distributions over different C")
        return ClassDistribution.from_counts(self.counts + other.counts)

    def to_json_obj(self) -> dict:
        return {
            "counts": [int(c) for c in self.counts],
            "freqs": [float(f) for f in self.freqs],
            "total": self.total,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ClassDistribution":
        return cls.from_counts(np.asarray(obj["counts"], dtype=np.int64))


@dataclass(frozen=True)
class DesiredCounts:
    """Integer per-class pixel budget for one labeling run."""

    n: np.ndarray  # int64, length C
    alpha: float  # labeling ratio in percent
    total_pixels: int

    @property
    def budget(self) -> int:
        return int(self.n.sum())


def label_frequencies(labels: Iterable[LabelMap], num_classes: int) -> ClassDistribution:
    """Count pixels per class over a set of label maps, skipping ignore pixels."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for lm in labels:
        if lm.num_classes != num_classes:
            raise ShapeError(
                f"label map has C={lm.num_classes}, expected {num_classes}"
            )
        flat = lm.values.ravel()
        counts += np.bincount(flat[flat != IGNORE], minlength=num_classes)
    return ClassDistribution.from_counts(counts)


def pred_frequencies(probs: Iterable[ProbabilityVolume]) -> ClassDistribution:
    """Distribution of argmax predictions; ties resolve to the lower class index."""
    counts: np.ndarray | None = None
    for pv in probs:
        if counts is None:
            counts = np.zeros(pv.num_classes, dtype=np.int64)
        elif pv.num_classes != len(counts):
            raise ShapeError("probability volumes disagree on C")
        pred = pv.values.argmax(axis=0).ravel()
        counts += np.bincount(pred, minlength=len(counts))
    if counts is None:
        raise EmptyDistributionError("no probability volumes supplied")
    return ClassDistribution.from_counts(counts)


def _freqs_of(d) -> np.ndarray:
    if isinstance(d, ClassDistribution):
        return d.freqs
    arr = np.asarray(d, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"frequency vector must be 1-D, got {arr.shape}")
    return arr


def kl_divergence(p, q, smooth: bool = False) -> float:
    """KL(p || q) in nats over class frequencies.

    Zero-probability p classes contribute nothing. A class with p > 0 and
    q == 0 makes the result +inf unless smooth=True, which re-normalizes q
    after adding KL_EPSILON to every class. Smoothing is a reporting
    convenience only; the labeling pipeline never relies on it.
    """
    pf, qf = _freqs_of(p), _freqs_of(q)
    if pf.shape != qf.shape:
        raise ShapeError(f"shape mismatch {pf.shape} vs {qf.shape}")
    if smooth:
        qf = qf + KL_EPSILON
        qf = qf / qf.sum()
    support = pf > 0
    if np.any(support & (qf == 0)):
        return float("inf")
    ps = pf[support]
    qs = qf[support]
    return float(np.sum(ps * (np.log(ps) - np.log(qs))))


def desired_counts(target, alpha: float, total_pixels: int) -> DesiredCounts:
    """Turn a target distribution and labeling ratio into integer pixel counts.

    The real-valued targets alpha/100 * total_pixels * r_j are rounded by the
    largest-remainder method so the per-class counts sum exactly to the
    rounded budget. Remainder ties break toward the lower class index, and a
    class with zero target frequency never receives pixels.
    """
    if not (0.0 < alpha <= 100.0):
        raise ShapeError(f"alpha {alpha} outside (0, 100]")
    if total_pixels <= 0:
        raise ShapeError("total_pixels must be positive")
    freqs = _freqs_of(target)
    raw = (alpha / 100.0) * total_pixels * freqs
    budget = round_half_up((alpha / 100.0) * total_pixels)
    base = np.floor(raw).astype(np.int64)
    extras = budget - int(base.sum())
    if extras > 0:
        remainders = raw - base
        # stable sort on (-remainder) keeps lower indices first among ties
        order = np.argsort(-remainders, kind="stable")
        base[order[:extras]] += 1
    elif extras < 0:
        # only possible when float error pushes a raw value past its floor;
        # shave from the smallest remainders, higher index first among ties
        remainders = raw - base
        order = np.argsort(remainders, kind="stable")
        take = [j for j in order if base[j] > 0][: -extras]
        base[take] -= 1
    return DesiredCounts(n=base, alpha=float(alpha), total_pixels=int(total_pixels))

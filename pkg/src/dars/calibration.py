"""Temperature scaling: sharpen or soften softmax confidences without moving argmax.

Dividing logits by a scalar T > 1 flattens the per-pixel distribution,
T < 1 sharpens it. The per-pixel argmax never changes, so this only shifts
which pixels clear a confidence threshold, not what class they would get.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyDistributionError, NumericError, ShapeError
from .tensor_store import IGNORE, LabelMap, LogitVolume, ProbabilityVolume

LOG_T_LO = math.log(0.05)
LOG_T_HI = math.log(20.0)
LOG_T_TOL = 1e-3


@dataclass(frozen=True)
class Temperature:
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value > 0):
            raise NumericError(f"temperature {self.value} must be positive and finite")


def softmax_channels(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Stable softmax over axis 0 of a C×H×W array, computed in float64."""
    z = logits.astype(np.float64) / temperature
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def apply_temperature(logits: LogitVolume, temperature: Temperature | float) -> ProbabilityVolume:
    """softmax(z / T) with max-subtraction; output stored as float32."""
    t = temperature.value if isinstance(temperature, Temperature) else float(temperature)
    if not (math.isfinite(t) and t > 0):
        raise NumericError(f"temperature {t} must be positive and finite")
    if not np.isfinite(logits.values).all():
        raise NumericError("non-finite logits")
    probs = softmax_channels(logits.values, t)
    return ProbabilityVolume(np.clip(probs, 0.0, 1.0).astype(np.float32))


def _gather_pixels(
    logits: Sequence[LogitVolume], labels: Sequence[LabelMap]
) -> tuple[np.ndarray, np.ndarray]:
    """Flatten all non-ignore pixels into (N×C logits, N labels)."""
    if len(logits) != len(labels):
        raise ShapeError("logit/label sequences differ in length")
    zs, ys = [], []
    for lv, lm in zip(logits, labels):
        if lv.values.shape[1:] != lm.values.shape:
            raise ShapeError(
                f"logits {lv.values.shape} do not align with labels {lm.values.shape}"
            )
        mask = lm.values.ravel() != IGNORE
        if not mask.any():
            continue
        z = lv.values.reshape(lv.num_classes, -1).T[mask]
        zs.append(z.astype(np.float64))
        ys.append(lm.values.ravel()[mask].astype(np.int64))
    if not zs:
        raise EmptyDistributionError("no labeled pixels to fit on")
    return np.concatenate(zs), np.concatenate(ys)


def _nll(z: np.ndarray, y: np.ndarray, temperature: float) -> float:
    """Mean cross-entropy of softmax(z/T) against y."""
    zt = z / temperature
    zmax = zt.max(axis=1)
    lse = zmax + np.log(np.exp(zt - zmax[:, None]).sum(axis=1))
    return float(np.mean(lse - zt[np.arange(len(y)), y]))


def mean_nll(
    logits: Sequence[LogitVolume],
    labels: Sequence[LabelMap],
    temperature: Temperature | float = 1.0,
) -> float:
    """Mean cross-entropy of apply_temperature(logits, T) against labels."""
    t = temperature.value if isinstance(temperature, Temperature) else float(temperature)
    z, y = _gather_pixels(logits, labels)
    return _nll(z, y, t)


def fit_temperature(
    logits: Sequence[LogitVolume], labels: Sequence[LabelMap]
) -> Temperature:
    """Fit T by golden-section search on log T, minimizing mean cross-entropy.

    The search covers T in [0.05, 20] to 1e-3 absolute tolerance in
    log-space. T=1 is kept whenever the search result does not beat it, so
    calibrating never hurts the fitting set.
    """
    z, y = _gather_pixels(logits, labels)

    def f(u: float) -> float:
        return _nll(z, y, math.exp(u))

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = LOG_T_LO, LOG_T_HI
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > LOG_T_TOL:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    t_hat = math.exp(0.5 * (a + b))
    if _nll(z, y, 1.0) <= _nll(z, y, t_hat):
        t_hat = 1.0
    return Temperature(t_hat)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dars.calibration import Temperature, apply_temperature, fit_temperature, mean_nll, softmax_channels
from dars.errors import EmptyDistributionError, NumericError
from dars.tensor_store import IGNORE, LabelMap, LogitVolume


def _logits(arr):
    return LogitVolume(np.asarray(arr, dtype=np.float32))


def test_t1_equals_plain_softmax(rng):
    z = rng.normal(size=(4, 3, 5)).astype(np.float32)
    out = apply_temperature(_logits(z), 1.0)
    ref = softmax_channels(z)
    assert np.allclose(out.values, ref, atol=1e-7)


def test_hand_value_t2():
    out = apply_temperature(_logits([[[2.0]], [[0.0]]]), 2.0)
    # softmax([1, 0])
    assert out.values[0, 0, 0] == pytest.approx(0.731059, abs=1e-5)
    assert out.values[1, 0, 0] == pytest.approx(0.268941, abs=1e-5)


def test_huge_temperature_is_uniform(rng):
    z = rng.normal(scale=5.0, size=(6, 2, 2)).astype(np.float32)
    out = apply_temperature(_logits(z), 1e6)
    assert np.abs(out.values - 1 / 6).max() < 1e-4


def test_channel_sums_tight(rng):
    z = rng.normal(scale=10.0, size=(20, 8, 8)).astype(np.float32)
    out = apply_temperature(_logits(z), 0.25)
    sums = out.values.sum(axis=0, dtype=np.float64)
    assert np.abs(sums - 1.0).max() < 1e-6


def test_nonfinite_logits_rejected(rng):
    lv = _logits(rng.normal(size=(2, 2, 2)))
    lv.values[0, 0, 0] = np.inf  # bypasses construction-time validation
    with pytest.raises(NumericError):
        apply_temperature(lv, 1.0)
    with pytest.raises(NumericError):
        Temperature(0.0)
    with pytest.raises(NumericError):
        apply_temperature(_logits(np.zeros((2, 1, 1))), -1.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), t=st.floats(0.05, 20.0))
def test_argmax_invariance_property(seed, t):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=3.0, size=(5, 3, 3)).astype(np.float32)
    before = z.argmax(axis=0)
    after = apply_temperature(_logits(z), t).values.argmax(axis=0)
    assert np.array_equal(before, after)


def _calibrated_fixture(scale: float, seed: int = 5, n: int = 120, c: int = 4):
    """Logits equal to scale * log(true per-pixel posterior); labels drawn from it."""
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(c, 2.0), size=n * n)  # (N, C)
    labels = (p.cumsum(axis=1) > rng.random((n * n, 1))).argmax(axis=1)
    z = scale * np.log(p).T.reshape(c, n, n).astype(np.float32)
    lv = LogitVolume(z)
    lm = LabelMap(labels.reshape(n, n).astype(np.uint8), c)
    return [lv], [lm]


def _sweep_oracle(logits, labels):
    """Grid NLL sweep, the independent check on the golden-section fit."""
    ts = np.exp(np.linspace(math.log(0.05), math.log(20.0), 400))
    nlls = [mean_nll(logits, labels, t) for t in ts]
    return ts[int(np.argmin(nlls))], min(nlls)


def test_fit_recovers_unit_temperature():
    logits, labels = _calibrated_fixture(scale=1.0)
    t = fit_temperature(logits, labels)
    assert 0.95 <= t.value <= 1.05
    t_grid, nll_grid = _sweep_oracle(logits, labels)
    assert mean_nll(logits, labels, t) <= nll_grid + 1e-9
    assert 0.95 <= t_grid <= 1.05


def test_fit_recovers_doubled_scale():
    logits, labels = _calibrated_fixture(scale=2.0)
    t = fit_temperature(logits, labels)
    assert 1.9 <= t.value <= 2.1
    t_grid, _ = _sweep_oracle(logits, labels)
    assert 1.9 <= t_grid <= 2.1


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.3, 5.0), seed=st.integers(0, 10**6))
def test_fit_never_hurts_nll(scale, seed):
    logits, labels = _calibrated_fixture(scale=scale, seed=seed, n=40)
    t = fit_temperature(logits, labels)
    assert mean_nll(logits, labels, t) <= mean_nll(logits, labels, 1.0)


def test_fit_requires_labeled_pixels():
    lv = LogitVolume(np.zeros((3, 2, 2), dtype=np.float32))
    lm = LabelMap(np.full((2, 2), IGNORE, dtype=np.uint8), 3)
    with pytest.raises(EmptyDistributionError):
        fit_temperature([lv], [lm])


def test_ignore_pixels_excluded_from_fit(rng):
    z = rng.normal(size=(3, 4, 4)).astype(np.float32)
    labels = rng.integers(0, 3, size=(4, 4)).astype(np.uint8)
    lm_full = LabelMap(labels, 3)
    masked = labels.copy()
    masked[0] = IGNORE
    lm_masked = LabelMap(masked, 3)
    # fitting on the masked map must equal fitting on the submap without row 0
    sub = LabelMap(labels[1:].copy(), 3)
    sub_z = LogitVolume(z[:, 1:].copy())
    t_masked = fit_temperature([LogitVolume(z)], [lm_masked])
    t_sub = fit_temperature([sub_z], [sub])
    assert t_masked.value == pytest.approx(t_sub.value, abs=1e-12)

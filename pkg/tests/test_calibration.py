import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import isotonic_exhaustive, onset_exhaustive, threshold_exhaustive
from wearcast.calibration import (TAU_GRID, CalibrationBundle, IsotonicMap, MetricCalibration,
                                  fit_isotonic, fit_onset_shift, fit_sign_thresholds, pava,
                                  predict_sign, shift_forecast, sign_calls)
from wearcast.constants import WINDOWS, window_label
from wearcast.model import QuantileForecast


def forecast_from_median(median, targets=("bbi",)):
    median = np.asarray(median, dtype=float)
    v = np.stack([median - 1, median, median + 1], axis=-1)[:, None]
    return QuantileForecast(targets, (0.1, 0.5, 0.9), v, np.zeros(v.shape[:-1]))


def identity_bundle(shift=0, tau=2.5):
    maps = {window_label(w): IsotonicMap() for w in WINDOWS}
    return CalibrationBundle({"bbi": MetricCalibration(shift, maps, tau)})


class TestIsotonic:
    def test_three_point_instance(self):
        np.testing.assert_array_equal(pava([2, 1, 3]), [1.5, 1.5, 3.0])
        m = fit_isotonic([1, 2, 3], [2, 1, 3])
        np.testing.assert_array_equal(m(np.array([1.0, 2.0, 3.0])), [1.5, 1.5, 3.0])

    def test_monotone_data_reproduced(self):
        m = fit_isotonic([1, 2, 3, 4], [0.5, 1.0, 4.0, 9.0])
        np.testing.assert_array_equal(m(np.array([1.0, 2.0, 3.0, 4.0])), [0.5, 1.0, 4.0, 9.0])

    def test_constant_actuals(self):
        m = fit_isotonic(np.random.default_rng(0).normal(size=20), np.full(20, 3.0))
        np.testing.assert_array_equal(m(np.linspace(-5, 5, 11)), 3.0)

    def test_too_few_pairs_identity(self, caplog):
        m = fit_isotonic([1.0, np.nan], [2.0, 3.0])
        assert m.x is None and m(np.array([4.0]))[0] == 4.0
        assert "identity" in caplog.text

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=12),
           st.lists(st.floats(0.1, 5), min_size=12, max_size=12))
    @settings(max_examples=60, deadline=None)
    def test_pava_matches_exhaustive(self, y, w):
        w = w[:len(y)]
        np.testing.assert_allclose(pava(y, w), isotonic_exhaustive(y, w), atol=1e-8)

    @given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-20, 20)), st.integers(0, 2**31),
           st.floats(-30, 30), st.floats(0, 10))
    @settings(max_examples=60, deadline=None)
    def test_map_monotone(self, pred, seed, a, gap):
        actual = np.random.default_rng(seed).normal(0, 5, len(pred)) + pred
        m = fit_isotonic(pred, actual)
        lo, hi = m(np.array([a, a + gap]))
        assert lo <= hi
        if m.x is not None:
            assert (np.diff(m.y) >= 0).all()

    def test_serialization(self):
        m = fit_isotonic([1, 2, 3], [2, 1, 3])
        back = IsotonicMap.from_dict(m.to_dict())
        np.testing.assert_array_equal(back.x, m.x)
        np.testing.assert_array_equal(back.y, m.y)


class TestOnsetShift:
    def test_recovers_delay(self):
        rng = np.random.default_rng(0)
        f = np.cumsum(rng.normal(size=(20, 120)), axis=1)
        actual = shift_forecast(f, 3)
        assert fit_onset_shift(f, actual) == 3

    def test_identity_and_constant(self):
        f = np.random.default_rng(1).normal(size=(5, 120))
        assert fit_onset_shift(f, f) == 0
        assert fit_onset_shift(np.full((3, 120), 2.0), np.full((3, 120), 5.0)) == 0

    def test_shift_semantics(self):
        raw = np.arange(10.0)[None]
        out = shift_forecast(raw, 2)
        assert np.isnan(out[0, :2]).all()
        np.testing.assert_array_equal(out[0, 2:], raw[0, :8])

    @given(st.integers(0, 2**31), st.integers(0, 15))
    @settings(max_examples=20, deadline=None)
    def test_matches_exhaustive(self, seed, d):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(4, 40))
        actual = shift_forecast(f, d) + rng.normal(0, 0.5, f.shape)
        actual[rng.random(actual.shape) < 0.1] = np.nan
        assert fit_onset_shift(f, actual) == onset_exhaustive(f, actual, range(16))


class TestThresholds:
    def test_examples(self):
        assert fit_sign_thresholds([5.0, -5.0], [1, -1]) == 0.1
        assert fit_sign_thresholds([0.0, 0.0], [1, -1]) == 0.1
        assert fit_sign_thresholds([0.3, -4.0], [-1, -1]) == pytest.approx(0.4)

    def test_no_eligible_default(self):
        assert fit_sign_thresholds([1.0, 2.0], [0, 0], default=2.5) == 2.5

    @given(st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_matches_exhaustive(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 60))
        v = np.round(rng.normal(0, 4, n), 1)
        s = rng.choice([-1, 0, 1], n)
        expected = threshold_exhaustive(v, s, TAU_GRID)
        got = fit_sign_thresholds(v, s)
        if expected is None:
            assert got == 1.0
        else:
            assert got == expected
        # argmax does not depend on grid order
        assert fit_sign_thresholds(v, s, grid=TAU_GRID[::-1]) == got


class TestPredictSign:
    def test_threshold_rule(self):
        s = predict_sign(forecast_from_median(np.r_[3.0, -2.4, np.zeros(118)][None]), identity_bundle())
        assert s["bbi"].sign[0, 0] == 1 and s["bbi"].sign[0, 1] == 0

    def test_shift_invalidates_head(self):
        med = np.arange(120.0)[None]
        s = predict_sign(forecast_from_median(med), identity_bundle(shift=2))
        assert not s["bbi"].valid[0, :2].any()
        np.testing.assert_array_equal(s["bbi"].values[0, 2:], med[0, :118])

    @given(arrays(np.float64, 120, elements=st.floats(-20, 20)), st.integers(0, 119), st.floats(0, 10))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_median(self, med, k, bump):
        bundle = identity_bundle(tau=2.5)
        a = predict_sign(forecast_from_median(med[None]), bundle)["bbi"].sign[0, k]
        med2 = med.copy()
        med2[k] += bump
        b = predict_sign(forecast_from_median(med2[None]), bundle)["bbi"].sign[0, k]
        assert b >= a
        assert sign_calls(med[k], 2.5) == a

    def test_bundle_round_trip(self, tmp_path):
        b = identity_bundle(shift=3, tau=1.2)
        b.metrics["bbi"].maps["0-15"] = fit_isotonic([1, 2, 3], [2, 1, 3])
        b.save(tmp_path / "c.json")
        back = CalibrationBundle.load(tmp_path / "c.json")
        assert back.to_dict() == b.to_dict()

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import sign_reference
from wearcast.constants import EPSILON, HORIZON, METRICS
from wearcast.features import FEATURE_NAMES, FeatureFrame
from wearcast.ingest import TagRecord
from wearcast.labeling import (AnchoredExample, WindowSet, actual_sign, build_example,
                               compute_baseline, inclusion_check, make_examples, percent_change,
                               read_examples, screen_metric, split_leak_safe, window_problems,
                               write_examples)


def frame_and_panel(n=600, start=0, value=None):
    values = np.ones((n, len(FEATURE_NAMES)))
    frame = FeatureFrame("U01", start, values)
    base = {"rmssd": 40.0, "hr": 60.0, "bbi": 1000.0}
    panel = {m: np.full(n, base[m] if value is None else value) for m in METRICS}
    return frame, panel


def example(user, t1, key=None, t0=None):
    tag = TagRecord(user, "x", "Other", t1 - 10 if t0 is None else t0, t1, None, key or f"{user}:{t1}")
    z = np.zeros((len(METRICS), HORIZON))
    return AnchoredExample(user, tag, {}, np.zeros((90, 1)), z, z.astype(np.int8))


class TestBaseline:
    def test_constant(self):
        assert compute_baseline(np.full(40, 60.0), 35) == 60.0

    def test_even_median(self):
        assert compute_baseline(np.arange(1, 31, dtype=float), 30) == 15.5

    def test_too_few_valid(self):
        v = np.full(30, 60.0)
        v[:7] = np.nan
        assert compute_baseline(v, 30) is None
        v[6] = 60.0
        assert compute_baseline(v, 30) == 60.0

    def test_before_series_start_is_invalid(self):
        assert compute_baseline(np.full(40, 1.0), 20) is None

    @given(arrays(np.float64, 30, elements=st.floats(1, 300)), st.randoms())
    def test_permutation_invariant(self, v, rnd):
        w = list(v)
        rnd.shuffle(w)
        assert compute_baseline(v, 30) == compute_baseline(np.array(w), 30)


class TestPercentChange:
    def test_examples(self):
        assert percent_change(50.0, 50.0) == 0.0
        assert percent_change(55.0, 50.0) == pytest.approx(10.0)
        assert percent_change(0.001, 0.0) == pytest.approx(100000.0)

    @given(st.floats(1e-6, 1e4) | st.floats(-1e4, -1e-6), st.floats(-1e3, 1e3))
    def test_antisymmetric(self, base, d):
        assert percent_change(base + d, base) == pytest.approx(-percent_change(base - d, base), rel=1e-9, abs=1e-9)


class TestSign:
    def test_examples(self):
        assert actual_sign(2.5, "rmssd") == 1
        assert actual_sign(-0.99, "hr") == 0
        assert actual_sign(-1.0, "bbi") == -1

    @given(st.floats(-20, 20), st.sampled_from(METRICS))
    def test_reference(self, d, m):
        assert actual_sign(d, m) == sign_reference(d, EPSILON[m])


class TestInclusion:
    def test_coverage(self):
        valid = np.ones(HORIZON, dtype=bool)
        valid[:8] = False  # 7 of 15 valid
        assert "coverage_0_15" in window_problems(valid, np.ones(HORIZON, dtype=bool))
        valid[7] = True
        assert not window_problems(valid, np.ones(HORIZON, dtype=bool))

    def test_rmssd_clipped(self):
        np.testing.assert_array_equal(screen_metric([350.0, 0.5, np.nan], "rmssd")[:2], [300.0, 1.0])

    def test_hr_invalidated(self):
        assert np.isnan(screen_metric([25.0, 60.0], "hr")[0])

    def test_long_gap(self):
        valid = np.ones(HORIZON, dtype=bool)
        valid[35:46] = False
        assert window_problems(valid, np.ones(HORIZON, dtype=bool)) == ["gap_30_60"]
        valid[35] = True
        assert window_problems(valid, np.ones(HORIZON, dtype=bool)) == []

    def test_missing_baseline_reason(self):
        delta = np.zeros((3, HORIZON))
        reasons = inclusion_check({"rmssd": 1.0, "hr": None, "bbi": 1.0}, delta, np.ones(HORIZON, bool))
        assert reasons == ["hr:baseline"]

    def test_window_partition(self):
        ws = WindowSet()
        for k in range(HORIZON):
            assert sum(a <= k < b for a, b in ws.windows) == 1
        assert ws.overall == (0, 120)
        with pytest.raises(ValueError):
            WindowSet(((0, 15), (20, 120)))


class TestBuildExample:
    def test_clean(self):
        frame, panel = frame_and_panel()
        ex, reasons = build_example(frame, panel, TagRecord("U01", "x", "Other", 200, 230))
        assert not reasons
        assert ex.delta.shape == (3, HORIZON) and ex.valid.all()
        assert ex.context.shape == (90, len(FEATURE_NAMES))
        assert (ex.sign == 0).all()

    def test_sixty_minutes_of_post_data(self):
        frame, panel = frame_and_panel(n=290)
        ex, reasons = build_example(frame, panel, TagRecord("U01", "x", "Other", 200, 230))
        assert not reasons
        assert ex.valid[:, :60].all() and not ex.valid[:, 60:].any()

    def test_overlapping_tags(self):
        frame, panel = frame_and_panel()
        tags = [TagRecord("U01", "a", "Other", 200, 260, None, "U01:0"),
                TagRecord("U01", "b", "Rest & Recovery", 230, 250, None, "U01:1")]
        exs, rej = make_examples({"U01": frame}, {"U01": panel}, tags)
        assert len(exs) == 2 and not rej

    def test_signs_from_effect(self):
        frame, panel = frame_and_panel()
        panel["bbi"][230:260] = 1020.0
        ex, _ = build_example(frame, panel, TagRecord("U01", "x", "Other", 200, 230))
        assert (ex.sign[2, :30] == 1).all() and (ex.sign[2, 30:] == 0).all()

    def test_custom_epsilon(self):
        frame, panel = frame_and_panel()
        panel["bbi"][230:260] = 1020.0
        ex, _ = build_example(frame, panel, TagRecord("U01", "x", "Other", 200, 230),
                              epsilon={"rmssd": 2.5, "hr": 1.0, "bbi": 5.0})
        assert (ex.sign[2] == 0).all()

    def test_persistence(self, tmp_path):
        frame, panel = frame_and_panel()
        exs, rej = make_examples({"U01": frame}, {"U01": panel},
                                 [TagRecord("U01", "x", "Other", 200, 230, None, "U01:0")])
        write_examples(exs, rej, tmp_path)
        back, meta = read_examples(tmp_path)
        assert back[0].key == "U01:0" and back[0].tag == exs[0].tag
        np.testing.assert_array_equal(back[0].delta, exs[0].delta)


class TestSplit:
    def test_ten(self):
        a = split_leak_safe([example("u", 100 * i) for i in range(10)])
        labels = [a[f"u:{100 * i}"] for i in range(10)]
        assert labels == ["train"] * 6 + ["validation"] * 2 + ["test"] * 2

    def test_two_all_train(self):
        a = split_leak_safe([example("u", 100), example("u", 200)])
        assert set(a.values()) == {"train"}

    def test_tied_end_times(self):
        exs = [example("u", 100 * min(i, 8), key=f"u:{i}") for i in range(10)]
        a = split_leak_safe(exs)
        test_ends = [e.tag.t1 for e in exs if a[e.key] == "test"]
        other_ends = [e.tag.t1 for e in exs if a[e.key] != "test"]
        assert not test_ends or min(test_ends) > max(other_ends)


end_lists = st.dictionaries(st.sampled_from("abcd"), st.lists(st.integers(0, 50), min_size=1, max_size=25),
                            min_size=1)


@given(end_lists)
@settings(max_examples=200)
def test_leak_safety(ends):
    exs = [example(u, t, key=f"{u}:{i}") for u, ts in ends.items() for i, t in enumerate(ts)]
    a = split_leak_safe(exs)
    for u in ends:
        mine = [e for e in exs if e.user_id == u]
        test = [e.tag.t1 for e in mine if a[e.key] == "test"]
        rest = [e.tag.t1 for e in mine if a[e.key] != "test"]
        val = [e.tag.t1 for e in mine if a[e.key] == "validation"]
        train = [e.tag.t1 for e in mine if a[e.key] == "train"]
        if test and rest:
            assert min(test) > max(rest)
        if val and train:
            assert min(val) > max(train)

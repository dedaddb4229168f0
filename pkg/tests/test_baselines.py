import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgp_atttcn import baselines, data
from mgp_atttcn.errors import InputError

from . import oracles


def series_from_obs(obs, m=2, pid="p"):
    times = np.array([t for t, _, _ in obs], dtype=float)
    feats = np.array([f for _, f, _ in obs], dtype=int)
    vals = np.array([v for _, _, v in obs], dtype=float)
    return data.IrregularSeries(pid, times, feats, vals, np.zeros(0), 0, 0)


class TestHourlyImpute:
    def test_same_hour_mean(self):
        s = series_from_obs([(-0.2, 0, 3.2), (-0.7, 0, 3.8)], m=1)
        mat = baselines.hourly_impute(s, 4, 1)
        assert mat.values[0, -1] == pytest.approx(3.5)
        assert mat.presence[0, -1] == 1.0

    def test_gaps_carry_forward(self):
        s = series_from_obs([(-6.5, 0, 2.0), (-0.5, 0, 5.0)], m=1)
        mat = baselines.hourly_impute(s, 7, 1)
        # loop oracle: hour k = floor(-t); carry from older hours forward
        assert mat.values[0].tolist() == [2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 5.0]
        assert mat.presence[0].tolist() == [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]

    def test_no_gaps_after_first_observation(self):
        rng = np.random.default_rng(0)
        s = series_from_obs(
            [(-float(rng.uniform(0, 20)), int(rng.integers(0, 2)), float(rng.normal())) for _ in range(30)]
        )
        mat = baselines.hourly_impute(s, 25, 2)
        for f in range(2):
            observed = np.nonzero(mat.presence[f])[0]
            if observed.size == 0:
                continue
            first = observed[0]
            for col in range(first + 1, 25):
                if not mat.presence[f, col]:
                    assert mat.values[f, col] == mat.values[f, col - 1]

    def test_zeros_before_first_observation(self):
        s = series_from_obs([(-1.5, 0, 4.0)], m=1)
        mat = baselines.hourly_impute(s, 5, 1)
        assert mat.values[0].tolist() == [0.0, 0.0, 0.0, 4.0, 4.0]

    def test_long_history_truncated(self):
        obs = [(-float(h) - 0.5, 0, float(h)) for h in range(30)]
        s = series_from_obs(obs, m=1)
        mat = baselines.hourly_impute(s, 25, 1)
        assert mat.values.shape == (1, 25)
        assert mat.values[0, -1] == 0.0  # hour 0 value
        assert mat.values[0, 0] == 24.0  # oldest kept hour

    def test_empty_series(self):
        s = series_from_obs([], m=2)
        mat = baselines.hourly_impute(s, 6, 2)
        assert not mat.values.any() and not mat.presence.any()


class TestTripletCorrelation:
    def test_two_point_symmetric(self):
        assert baselines.triplet_correlation([-1, 1], [-1, 1], [-1, 1]) == 0.0

    def test_constant_argument_zero(self):
        assert baselines.triplet_correlation([1, 1, 1], [0, 1, 2], [3, 1, 0]) == 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x, y, z = rng.normal(size=(3, 6))
            got = baselines.triplet_correlation(x, y, z)
            want = oracles.loop_triplet_correlation(x.tolist(), y.tolist(), z.tolist())
            assert got == pytest.approx(want, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            baselines.triplet_correlation([1, 2], [1, 2, 3], [1, 2, 3])

    @settings(max_examples=40, deadline=None)
    @given(
        shift=st.floats(-50, 50),
        scale=st.floats(0.01, 100),
        seed=st.integers(0, 10_000),
    )
    def test_shift_and_positive_scale_invariance(self, shift, scale, seed):
        rng = np.random.default_rng(seed)
        x, y, z = rng.normal(size=(3, 8))
        base = baselines.triplet_correlation(x, y, z)
        shifted = baselines.triplet_correlation(x + shift, y, z)
        scaled = baselines.triplet_correlation(x * scale, y, z)
        assert shifted == pytest.approx(base, abs=1e-9)
        assert scaled == pytest.approx(base, abs=1e-9)


class TestDiscretize:
    def test_above_upper_tercile(self):
        assert baselines.discretize(np.array([4.0]), [-3, -1, 1, 3]).tolist() == [1]

    def test_boundary_maps_to_middle(self):
        thr = baselines.tercile_thresholds([1.0, 2.0, 3.0])
        assert baselines.code_with_thresholds(np.array([thr.hi, thr.lo]), thr).tolist() == [0, 0]

    def test_empty_population_all_zero(self):
        assert baselines.discretize(np.array([5.0, -5.0]), np.zeros(4)).tolist() == [0, 0]

    def test_band_counts_match_sort_partition_oracle(self):
        rng = np.random.default_rng(2)
        population = rng.normal(size=200)
        values = rng.normal(size=500)
        codes = baselines.discretize(values, population)
        want = np.array([oracles.tercile_code(v, population.tolist()) for v in values])
        assert np.array_equal(codes, want)


class TestInsightVector:
    def _matrices(self, rng, n_patients=4, m=4, n=10):
        return [
            baselines.HourlyMatrix(rng.normal(size=(m, n)), np.ones((m, n)))
            for _ in range(n_patients)
        ]

    def test_length_formula_25_9(self):
        assert baselines.n_insight_features(25, 9) == 2760

    def test_length_formula_random_shapes(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(6, 30))
            m = int(rng.integers(3, 10))
            want = (n - 5) * (2 * m + math.comb(m, 2) + math.comb(m, 3))
            assert baselines.n_insight_features(n, m) == want
            mats = self._matrices(rng, n_patients=1, m=m, n=n)
            thresholds = baselines.fit_insight_thresholds(mats)
            vec = baselines.insight_vector(mats[0], thresholds)
            assert vec.vector.shape == (want,)

    def test_constant_matrix_codes_zero(self):
        mat = baselines.HourlyMatrix(np.full((3, 8), 2.5), np.ones((3, 8)))
        thresholds = baselines.fit_insight_thresholds([mat])
        vec = baselines.insight_vector(mat, thresholds).vector
        per_window = 2 * 3 + 3 + 1
        for w in range(8 - 5):
            window = vec[w * per_window : (w + 1) * per_window]
            assert np.allclose(window[:3], 2.5)  # means
            assert np.all(window[3:] == 0)  # codes

    def test_matches_naive_recomputation(self):
        rng = np.random.default_rng(4)
        mats = self._matrices(rng, n_patients=10, m=4, n=12)
        thresholds = baselines.fit_insight_thresholds(mats)

        m, n = 4, 12
        diff_pops = {i: [] for i in range(m)}
        pair_pops = {k: [] for k in itertools.combinations(range(m), 2)}
        trip_pops = {k: [] for k in itertools.combinations(range(m), 3)}
        for mat in mats:
            for w in range(n - 5):
                window = mat.values[:, w : w + 6]
                for i in range(m):
                    diff_pops[i].append(window[i, -1] - window[i, 0])
                for i, j in pair_pops:
                    pair_pops[(i, j)].append(oracles.loop_pearson(window[i].tolist(), window[j].tolist()))
                for i, j, k in trip_pops:
                    trip_pops[(i, j, k)].append(
                        oracles.loop_triplet_correlation(window[i].tolist(), window[j].tolist(), window[k].tolist())
                    )
        for mat in mats:
            got = baselines.insight_vector(mat, thresholds).vector
            want = oracles.naive_insight_vector(mat.values, diff_pops, pair_pops, trip_pops)
            assert np.allclose(got, want, atol=1e-12)

    def test_names_align_with_vector(self):
        names = baselines.insight_feature_names(10, 3)
        assert len(names) == baselines.n_insight_features(10, 3)
        assert names[0] == "w00_mean_f0"
        assert names[3] == "w00_diff_f0"

    def test_window_too_short(self):
        mat = baselines.HourlyMatrix(np.zeros((3, 5)), np.zeros((3, 5)))
        thresholds = baselines.InsightThresholds({}, {}, {})
        with pytest.raises(InputError):
            baselines.insight_vector(mat, thresholds)


class TestInsightFilter:
    def test_requires_recent_observation_per_feature(self):
        s = series_from_obs([(-1.0, 0, 1.0), (-9.0, 1, 2.0)], m=2)
        assert baselines.insight_filter(s, [0])
        assert not baselines.insight_filter(s, [0, 1])  # feature 1 too old
        assert baselines.insight_filter(s, [0, 1], lookback_hours=10.0)


class TestRidgeLogisticRegression:
    def test_separable_reaches_auroc_one(self):
        rng = np.random.default_rng(5)
        x = np.concatenate([rng.normal(-2, 0.3, size=(30, 2)), rng.normal(2, 0.3, size=(30, 2))])
        y = np.array([0] * 30 + [1] * 30)
        clf = baselines.ridge_logreg_fit(x, y, l2=1e-4)
        assert oracles.auroc_pairs(clf.predict_proba(x), y) == 1.0

    def test_huge_l2_collapses_to_prior(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(40, 3))
        y = np.array([1] * 10 + [0] * 30)
        clf = baselines.ridge_logreg_fit(x, y, l2=1e9)
        assert np.max(np.abs(clf.weights)) < 1e-6
        assert np.allclose(clf.predict_proba(x), 0.25, atol=1e-3)

    def test_gradient_zero_at_optimum_by_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(50, 3))
        true_w = np.array([1.0, -2.0, 0.5])
        y = (rng.uniform(size=50) < 1 / (1 + np.exp(-x @ true_w))).astype(float)
        l2 = 0.1
        clf = baselines.ridge_logreg_fit(x, y, l2=l2)
        assert clf.converged

        def objective(w, b):
            z = x @ w + b
            return float(np.mean(np.logaddexp(0, z) - y * z) + 0.5 * l2 * w @ w)

        eps = 1e-6
        for i in range(3):
            up, down = clf.weights.copy(), clf.weights.copy()
            up[i] += eps
            down[i] -= eps
            grad = (objective(up, clf.intercept) - objective(down, clf.intercept)) / (2 * eps)
            assert abs(grad) < 1e-5
        grad_b = (objective(clf.weights, clf.intercept + eps) - objective(clf.weights, clf.intercept - eps)) / (2 * eps)
        assert abs(grad_b) < 1e-5

    def test_warns_when_not_converged(self):
        x = np.array([[0.0], [1.0]])
        y = np.array([0.0, 1.0])
        with pytest.warns(UserWarning, match="gradient norm"):
            baselines.RidgeLogisticRegression(l2=0.0, max_iter=2, tol=1e-14).fit(x, y)

    def test_single_class_rejected(self):
        with pytest.raises(InputError):
            baselines.ridge_logreg_fit(np.zeros((3, 2)), np.ones(3), l2=0.1)

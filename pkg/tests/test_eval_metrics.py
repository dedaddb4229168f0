import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgp_atttcn import eval_metrics as em
from mgp_atttcn.errors import UndefinedMetricError

from . import oracles


class TestAuroc:
    def test_perfect_pair(self):
        assert em.auroc([0.1, 0.9], [0, 1]) == 1.0

    def test_all_ties_half(self):
        assert em.auroc([0.3, 0.3, 0.3, 0.3], [0, 1, 0, 1]) == 0.5

    def test_four_point_hand_case(self):
        assert em.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_matches_pair_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(3, 12))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = np.round(rng.normal(size=n), 1)  # rounding forces ties
            assert em.auroc(scores, labels) == pytest.approx(
                oracles.auroc_pairs(scores, labels), abs=1e-12
            )

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetricError):
            em.auroc([0.1, 0.2], [1, 1])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_monotone_transform_invariance_and_flip(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 20))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.normal(size=n)
        base = em.auroc(scores, labels)
        assert em.auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert em.auroc(3 * scores + 7, labels) == pytest.approx(base, abs=1e-12)
        assert em.auroc(-scores, labels) == pytest.approx(1 - base, abs=1e-12)


class TestAupr:
    def test_perfect_ranking(self):
        assert em.aupr([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_constant_scores_equal_prevalence(self):
        labels = [1, 0, 0, 0, 1]
        assert em.aupr([0.4] * 5, labels) == pytest.approx(2 / 5)

    def test_four_point_hand_case(self):
        scores = [0.9, 0.7, 0.6, 0.2]
        labels = [1, 0, 1, 0]
        # thresholds 0.9, 0.7, 0.6, 0.2 -> P=1, 1/2, 2/3, 1/2; R=1/2, 1/2, 1, 1
        want = 0.5 * 1.0 + 0.0 * 0.5 + 0.5 * (2 / 3) + 0.0 * 0.5
        assert em.aupr(scores, labels) == pytest.approx(want, abs=1e-12)
        assert em.aupr(scores, labels) == pytest.approx(oracles.aupr_enum(scores, labels), abs=1e-12)

    def test_matches_threshold_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            n = int(rng.integers(3, 12))
            labels = rng.integers(0, 2, size=n)
            if labels.sum() == 0:
                labels[0] = 1
            scores = np.round(rng.normal(size=n), 1)
            assert em.aupr(scores, labels) == pytest.approx(
                oracles.aupr_enum(scores, labels), abs=1e-12
            )

    def test_reversed_perfect_matches_oracle(self):
        scores = [0.9, 0.8, 0.2, 0.1]
        labels = [0, 0, 1, 1]
        assert em.aupr(scores, labels) == pytest.approx(oracles.aupr_enum(scores, labels), abs=1e-12)

    def test_no_positives_rejected(self):
        with pytest.raises(UndefinedMetricError):
            em.aupr([0.1, 0.2], [0, 0])


class TestBootstrap:
    def test_deterministic(self):
        rng = np.random.default_rng(2)
        scores = rng.normal(size=40)
        labels = rng.integers(0, 2, size=40)
        a = em.bootstrap(em.auroc, scores, labels, n=50, seed=9)
        b = em.bootstrap(em.auroc, scores, labels, n=50, seed=9)
        c = em.bootstrap(em.auroc, scores, labels, n=50, seed=10)
        assert a == b
        assert a != c

    def test_std_shrinks_with_dataset_size(self):
        rng = np.random.default_rng(3)

        def dataset(n):
            labels = np.array([0, 1] * (n // 2))
            scores = rng.normal(size=n) + labels
            return scores, labels

        _, std_small = em.bootstrap(em.auroc, *dataset(40), n=200, seed=1)
        _, std_large = em.bootstrap(em.auroc, *dataset(640), n=200, seed=1)
        # ~ 1/sqrt(size): a factor-16 size increase should shrink std ~4x
        assert std_large < std_small / 2

    def test_degenerate_resamples_redrawn(self):
        scores = np.array([0.2, 0.9, 0.4])
        labels = np.array([0, 1, 0])  # single-class resamples are common
        mean, std = em.bootstrap(em.auroc, scores, labels, n=30, seed=4)
        assert 0.0 <= mean <= 1.0 and std >= 0.0

    def test_needs_two_resamples(self):
        with pytest.raises(UndefinedMetricError):
            em.bootstrap(em.auroc, [0.1, 0.9], [0, 1], n=1, seed=0)


class TestMetricReport:
    def test_rows_cover_all_horizons_with_nulls(self):
        rng = np.random.default_rng(5)
        scores = rng.uniform(size=30)
        labels = np.array([0, 1] * 15)
        horizons = np.array([0] * 20 + [3] * 10)
        rows = em.metric_report(scores, labels, horizons, n_boot=20, seed=0)
        assert [r["horizon"] for r in rows] == list(range(7))
        by_h = {r["horizon"]: r for r in rows}
        assert by_h[0]["auroc"] is not None and by_h[3]["auroc"] is not None
        for h in (1, 2, 4, 5, 6):
            assert by_h[h]["auroc"] is None and by_h[h]["n_cases"] == 0
        assert by_h[0]["n_cases"] + by_h[0]["n_controls"] == 20
        assert all(r["format_version"] == 1 for r in rows)

    def test_single_class_horizon_reports_null_auroc(self):
        scores = np.array([0.2, 0.4, 0.6])
        labels = np.array([1, 1, 1])
        horizons = np.zeros(3, dtype=int)
        rows = em.metric_report(scores, labels, horizons, n_boot=10, seed=1)
        assert rows[0]["auroc"] is None
        assert rows[0]["aupr"] is not None  # defined with positives only

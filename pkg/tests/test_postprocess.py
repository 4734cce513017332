"""Score normalization, QMF, fusion, calibration and metrics tests."""

import itertools

import numpy as np
import pytest

from ivpipe.errors import ConfigError, DataError
from ivpipe.postprocess import (
    CalibrationMap,
    CohortStats,
    DetMetrics,
    apply_qmf,
    compute_metrics,
    det_points,
    error_rates,
    fuse,
    snorm,
    snorm_from_stats,
    train_calibration,
)


class TestSnorm:
    def test_paper_minus_cancels_with_identical_cohorts(self):
        cohort = [0.0, 1.0, 2.0, 3.0]
        for s in (-5.0, 0.0, 7.5):
            assert snorm(s, cohort, cohort, mode="paper-minus") == pytest.approx(0.0, abs=1e-12)

    def test_sum_mode_with_identical_cohorts_is_plain_znorm(self):
        cohort = [-1.0, 1.0]  # mean 0, std 1
        for s in (-2.0, 0.5, 3.0):
            assert snorm(s, cohort, cohort, mode="sum") == pytest.approx(s, abs=1e-12)

    def test_hand_arithmetic(self):
        # mu1=0 sigma1=1, mu2=1 sigma2=2, s=3 -> 0.5*[3 + 1] = 2
        enrol_cohort = [-1.0, 1.0]
        test_cohort = [-1.0, 3.0]
        assert snorm(3.0, enrol_cohort, test_cohort, mode="sum") == pytest.approx(2.0, abs=1e-12)

    def test_small_cohort_rejected(self):
        with pytest.raises(DataError):
            snorm(1.0, [0.5], [0.0, 1.0])

    def test_affine_invariance_of_sum_mode(self, rng):
        raw = 1.7
        enrol_cohort = rng.normal(size=50)
        test_cohort = rng.normal(size=50) + 0.5
        base = snorm(raw, enrol_cohort, test_cohort, mode="sum")
        a, b = 2.5, -3.0
        shifted = snorm(a * raw + b, a * enrol_cohort + b, a * test_cohort + b, mode="sum")
        assert shifted == pytest.approx(base, abs=1e-10)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            snorm_from_stats(1.0, CohortStats(0.0, 1.0, 0.0, 1.0, 5), mode="bogus")


class TestQmf:
    def test_25_seconds_gives_minus_one(self):
        assert apply_qmf(0.0, 25.0) == pytest.approx(-1.0, abs=1e-12)

    def test_zero_duration_rejected(self):
        with pytest.raises(DataError):
            apply_qmf(1.0, 0.0)

    def test_strictly_decreasing_in_duration(self):
        assert apply_qmf(0.0, 9.0) == pytest.approx(-0.6, abs=1e-12)
        assert apply_qmf(0.0, 36.0) == pytest.approx(-1.2, abs=1e-12)
        assert apply_qmf(0.0, 9.0) > apply_qmf(0.0, 36.0)

    def test_preserves_order_at_equal_duration(self, rng):
        scores = rng.normal(size=20)
        shifted = [apply_qmf(s, 16.0) for s in scores]
        assert np.array_equal(np.argsort(scores), np.argsort(shifted))


class TestFuse:
    def test_zero_second_system_is_identity(self):
        a = {("m1", "t1"): 1.5, ("m1", "t2"): -0.5}
        b = {k: 0.0 for k in a}
        assert fuse(a, b) == a

    def test_self_fusion_doubles(self):
        a = {("m1", "t1"): 1.5, ("m2", "t1"): 2.0}
        out = fuse(a, a)
        assert out[("m1", "t1")] == pytest.approx(3.0)

    def test_disjoint_trials_rejected(self):
        with pytest.raises(DataError):
            fuse({("m1", "t1"): 1.0}, {("m1", "t2"): 1.0})


def brute_force_metrics(scores, labels, p_tar):
    """Exhaustive sweep over every threshold position."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    tar, non = scores[labels], scores[~labels]
    candidates = np.concatenate([[-np.inf], np.sort(np.unique(scores)), [np.inf]])
    best = np.inf
    for theta in candidates:
        p_miss = np.mean(tar < theta)
        p_fa = np.mean(non >= theta)
        cdet = p_tar * p_miss + (1 - p_tar) * p_fa
        best = min(best, cdet)
    return best


class TestMetrics:
    def test_perfect_separation(self):
        scores = [1.0, 2.0, 3.0, -1.0, -2.0, -3.0]
        labels = [True] * 3 + [False] * 3
        m = compute_metrics(scores, labels, p_tar=0.01)
        assert m.eer == pytest.approx(0.0, abs=1e-12)
        assert m.min_cdet == pytest.approx(0.0, abs=1e-12)

    def test_random_scores_give_chance_eer(self, rng):
        scores = rng.normal(size=10000)
        labels = rng.random(10000) < 0.5
        m = compute_metrics(scores, labels, p_tar=0.01)
        assert abs(m.eer - 0.5) < 0.02

    def test_six_trial_hand_case_matches_exhaustive_sweep(self):
        scores = np.array([2.1, 0.4, -0.3, 1.2, -1.5, 0.1])
        labels = np.array([True, True, False, True, False, False])
        for p_tar in (0.0001, 0.01, 0.3):
            m = compute_metrics(scores, labels, p_tar=p_tar)
            assert m.min_cdet == pytest.approx(brute_force_metrics(scores, labels, p_tar), abs=1e-15)

    def test_matches_exhaustive_sweep_up_to_20_trials(self, rng):
        for trial_count in (5, 11, 20):
            scores = rng.normal(size=trial_count)
            labels = np.zeros(trial_count, dtype=bool)
            labels[: trial_count // 2 + 1] = True
            m = compute_metrics(scores, labels, p_tar=0.05)
            assert m.min_cdet == pytest.approx(
                brute_force_metrics(scores, labels, 0.05), abs=1e-15
            )

    def test_min_cdet_never_exceeds_act_cdet(self, rng):
        for _ in range(20):
            scores = rng.normal(size=100)
            labels = rng.random(100) < 0.3
            if labels.all() or not labels.any():
                continue
            m = compute_metrics(scores, labels, p_tar=0.01)
            assert m.min_cdet <= m.act_cdet + 1e-15

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            compute_metrics([1.0, 2.0], [True, True], p_tar=0.01)

    def test_eer_interpolation_crossing(self):
        # One swapped pair among clean scores: EER sits strictly between points.
        scores = [3.0, 2.0, -0.5, 1.0, -2.0, -3.0]
        labels = [True, True, True, False, False, False]
        m = compute_metrics(scores, labels, p_tar=0.01)
        assert 0.0 < m.eer <= 1.0 / 3.0 + 1e-12

    def test_det_points_monotone(self, rng):
        scores = rng.normal(size=200)
        labels = rng.random(200) < 0.5
        pts = det_points(scores, labels)
        assert np.all(np.diff(pts[:, 0]) >= 0)  # p_miss grows with threshold
        assert np.all(np.diff(pts[:, 1]) <= 0)  # p_fa shrinks


class TestCalibration:
    def llr_scores(self, rng, n, separation=4.0):
        spread = np.sqrt(2.0 * separation)
        tar = rng.normal(separation, spread, size=n)
        non = rng.normal(-separation, spread, size=n)
        scores = np.concatenate([tar, non])
        labels = np.array([True] * n + [False] * n)
        return scores, labels

    def test_perfect_llrs_recover_identity(self, rng):
        scores, labels = self.llr_scores(rng, 50000)
        cal = train_calibration(scores, labels, p_tar=0.01)
        assert 0.95 <= cal.a <= 1.05
        assert abs(cal.b) <= 0.05

    def test_scaled_scores_halve_a(self, rng):
        scores, labels = self.llr_scores(rng, 20000)
        cal1 = train_calibration(scores, labels, p_tar=0.01)
        cal2 = train_calibration(2.0 * scores, labels, p_tar=0.01)
        assert cal2.a == pytest.approx(cal1.a / 2.0, rel=0.05)
        llr1 = cal1.apply(scores)
        llr2 = cal2.apply(2.0 * scores)
        np.testing.assert_allclose(llr1, llr2, atol=1e-6)

    def test_secondary_prior_accepted(self, rng):
        scores, labels = self.llr_scores(rng, 5000)
        cal = train_calibration(scores, labels, p_tar=0.001)
        assert cal.p_tar == 0.001
        assert cal.a > 0

    def test_separable_scores_capped_with_warning(self, caplog):
        scores = np.array([5.0, 6.0, 7.0, -5.0, -6.0, -7.0])
        labels = [True] * 3 + [False] * 3
        with caplog.at_level("WARNING"):
            cal = train_calibration(scores, labels, p_tar=0.01)
        assert "separable" in caplog.text
        assert cal.a == pytest.approx(1e3)

    def test_order_preserving_keeps_eer_and_min_cdet(self, rng):
        scores, labels = self.llr_scores(rng, 2000, separation=2.0)
        cal = train_calibration(scores, labels, p_tar=0.01)
        before = compute_metrics(scores, labels, p_tar=0.01)
        after = compute_metrics(cal.apply(scores), labels, p_tar=0.01)
        assert after.eer == pytest.approx(before.eer, abs=1e-12)
        assert after.min_cdet == pytest.approx(before.min_cdet, abs=1e-12)

    def test_gradient_is_small_at_solution(self, rng):
        scores, labels = self.llr_scores(rng, 5000)
        cal = train_calibration(scores, labels, p_tar=0.01)
        p = 0.01
        tar = scores[labels]
        non = scores[~labels]
        offset = np.log(p / (1 - p))
        zt = cal.a * tar + cal.b + offset
        zn = cal.a * non + cal.b + offset
        st = 1 / (1 + np.exp(zt))
        sn = 1 / (1 + np.exp(-zn))
        ga = -(p / tar.size) * (st * tar).sum() + ((1 - p) / non.size) * (sn * non).sum()
        gb = -(p / tar.size) * st.sum() + ((1 - p) / non.size) * sn.sum()
        assert np.hypot(ga, gb) < 1e-8

    def test_scale_must_be_positive(self):
        with pytest.raises(DataError):
            CalibrationMap(a=-1.0, b=0.0, p_tar=0.01)


class TestDetMetricsType:
    def test_invariant_enforced(self):
        with pytest.raises(DataError):
            DetMetrics(eer=0.1, min_cdet=0.5, act_cdet=0.4, threshold_min=0.0, p_tar=0.01)

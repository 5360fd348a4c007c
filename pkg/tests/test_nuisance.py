import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from shortcut_audit import metrics, nuisance
from shortcut_audit.nuisance import UnivariateGmm


def gauss(mean, var):
    return UnivariateGmm(np.array([1.0]), np.array([float(mean)]), np.array([float(var)]))


class TestFitGmm:
    def test_single_component_is_moments(self):
        x = np.random.default_rng(0).normal(3, 2, 200)
        g = nuisance.fit_gmm(x, 1)
        assert g.means[0] == pytest.approx(x.mean(), abs=1e-12)
        assert g.variances[0] == pytest.approx(x.var(), rel=1e-12)

    def test_two_clusters(self):
        rng = np.random.default_rng(1)
        x = np.concatenate([rng.normal(0, 0.1, 300), rng.normal(10, 0.1, 300)])
        g = nuisance.fit_gmm(x, 2)
        order = np.argsort(g.means)
        np.testing.assert_allclose(g.means[order], [0, 10], atol=0.05)
        np.testing.assert_allclose(g.weights[order], [0.5, 0.5], atol=0.01)

    def test_constant_values(self):
        g = nuisance.fit_gmm(np.full(40, 2.5), 2)
        assert np.all(np.isfinite(g.means)) and np.all(g.variances == g.variance_floor)
        assert g.variance_floor == 1e-12

    def test_too_few_points(self):
        with pytest.raises(nuisance.TooFewPointsError):
            nuisance.fit_gmm(np.arange(19.0), 2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_monotone_em_and_valid_params(self, seed, k):
        rng = np.random.default_rng(seed)
        x = np.concatenate([rng.normal(0, 1, 60), rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 2), 60)])
        g = nuisance.fit_gmm(x, k)
        assert np.all(np.diff(g.log_likelihoods) >= -1e-12)
        assert abs(g.weights.sum() - 1.0) < 1e-10
        assert np.all(g.variances >= g.variance_floor)
        assert g.variance_floor == pytest.approx(1e-6 * x.var())

    def test_deterministic(self):
        x = np.random.default_rng(3).normal(size=100)
        a, b = nuisance.fit_gmm(x, 3), nuisance.fit_gmm(x, 3)
        np.testing.assert_array_equal(a.means, b.means)


class TestLlr:
    def test_identical_models(self):
        g = nuisance.fit_gmm(np.random.default_rng(0).normal(size=50), 2)
        np.testing.assert_array_equal(nuisance.llr(np.linspace(-3, 3, 7), g, g), 0.0)

    def test_hand_values(self):
        pos, neg = gauss(1, 1), gauss(-1, 1)
        assert nuisance.llr(0.0, pos, neg) == pytest.approx(0.0, abs=1e-15)
        assert nuisance.llr(1.0, pos, neg) == pytest.approx(2.0, abs=1e-12)

    def test_matches_scipy_mixture(self):
        g = UnivariateGmm(np.array([0.3, 0.7]), np.array([-1.0, 2.0]), np.array([0.5, 1.5]))
        w = np.linspace(-4, 4, 9)
        ref = np.log(0.3 * norm.pdf(w, -1, math.sqrt(0.5)) + 0.7 * norm.pdf(w, 2, math.sqrt(1.5)))
        np.testing.assert_allclose(g.log_density(w), ref, rtol=1e-12)

    def test_far_tail_is_finite(self):
        assert math.isfinite(nuisance.llr(1e4, gauss(1, 1), gauss(-1, 1)))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-50, 50), st.floats(-3, 3), st.floats(0.1, 3), st.floats(-3, 3), st.floats(0.1, 3))
    def test_antisymmetry(self, w, m1, v1, m2, v2):
        a, b = gauss(m1, v1), gauss(m2, v2)
        assert nuisance.llr(w, a, b) == -nuisance.llr(w, b, a)


class TestSummary:
    def test_hand_means(self):
        s = nuisance.fit_nuisance_summary([(-1, 0), (1, 0), (1, 1), (3, 1)])
        assert (s.mu_ell, s.d_ell) == (0.0, 2.0)
        assert s.sigma2_ell == pytest.approx(2.0)  # (1+1+1+1)/(4-2)

    def test_equal_means(self):
        assert nuisance.fit_nuisance_summary([(0, 0), (2, 0), (0, 1), (2, 1)]).d_ell == 0.0

    def test_one_class(self):
        with pytest.raises(metrics.OneClassError):
            nuisance.fit_nuisance_summary([(0, 1), (2, 1)])

    def test_shift(self):
        rng = np.random.default_rng(0)
        pairs = [(v, int(y)) for v, y in zip(rng.normal(size=50), rng.integers(0, 2, 50))]
        a = nuisance.fit_nuisance_summary(pairs)
        b = nuisance.fit_nuisance_summary([(v + 4.0, y) for v, y in pairs])
        assert b.mu_ell == pytest.approx(a.mu_ell + 4.0)
        assert b.d_ell == pytest.approx(a.d_ell, abs=1e-12)
        assert b.sigma2_ell == pytest.approx(a.sigma2_ell, rel=1e-12)


class TestGaussianEer:
    def test_values(self):
        assert nuisance.gaussian_eer(0.0) == 0.5
        assert nuisance.gaussian_eer(1.430) == pytest.approx(norm.cdf(-0.715), abs=1e-12)
        assert nuisance.gaussian_eer(1.430) == pytest.approx(0.2373, abs=1e-4)
        assert nuisance.gaussian_eer(40.0) == pytest.approx(norm.cdf(-20.0), rel=1e-12)
        assert nuisance.gaussian_eer(-1.0) > 0.5

    def test_symmetry_and_monotone(self):
        d = np.linspace(-8, 8, 1000)
        e = np.array([nuisance.gaussian_eer(v) for v in d])
        assert np.all(np.diff(e) < 0)
        np.testing.assert_allclose(e + e[::-1], 1.0, atol=1e-15)

    def test_sigma_scaling(self):
        rng = np.random.default_rng(5)
        mu, d, sigma = 0.3, 1.2, 2.0
        n = 100_000
        e = metrics.eer_from_classes(rng.normal(mu + d, sigma, n // 2), rng.normal(mu, sigma, n // 2))
        assert abs(e - nuisance.gaussian_eer(d / sigma)) <= 0.01


class TestPipeline:
    def test_score_dataset(self, small_corpus, tmp_path):
        m, _ = small_corpus
        scores = nuisance.score_dataset(m, "snr_db")
        assert len(scores) == 40
        assert [s.id for s in scores] == sorted(s.id for s in scores)
        nuisance.save_scores(scores, tmp_path / "s.csv")
        assert (tmp_path / "s.csv").read_text().startswith("id,y_cls,feature_value,llr\n")

    def test_single_eval_item(self, small_corpus):
        m, _ = small_corpus
        keep = [it for it in m.items if it.split == 0] + [next(it for it in m.items if it.split == 1)]
        assert len(nuisance.score_dataset(m.with_items(keep), "nonspeech_proportion")) == 1

    def test_precomputed_features_used(self, small_corpus):
        m, _ = small_corpus
        rng = np.random.default_rng(0)
        features = {it.id: float(rng.normal() + 5 * it.class_label) for it in m.items}
        scores = nuisance.score_dataset(m, "snr_db", features=features)
        assert metrics.eer([s.llr for s in scores], [s.y_cls for s in scores]) < 0.05

    def test_missing_audio_lists_files(self, small_corpus, tmp_path):
        m, _ = small_corpus
        from shortcut_audit.manifest import AudioItem
        broken = [AudioItem(it.id, tmp_path / f"gone_{it.id}.wav", it.class_label, it.split)
                  if k < 2 else it for k, it in enumerate(m.items)]
        with pytest.raises(nuisance.FeatureExtractionError) as err:
            nuisance.score_dataset(m.with_items(broken), "snr_db")
        assert len(err.value.failures) == 2
        assert "gone_" in str(err.value)

    def test_summary_file(self, tmp_path):
        s = nuisance.NuisanceGaussianSummary(0.0, 1.43, 1.0)
        nuisance.save_summary(s, 0.25, tmp_path / "sum.csv")
        header, row = (tmp_path / "sum.csv").read_text().splitlines()
        assert header == "mu_ell,d_ell,sigma2_ell,gaussian_eer,empirical_eer"
        assert float(row.split(",")[3]) == pytest.approx(0.2373, abs=1e-4)

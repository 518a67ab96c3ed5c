import logging

import numpy as np
import pytest

from ktm.core.errors import DimensionError, InvalidArgumentError
from ktm.services.bridge import (
    DirichletBelief,
    GaussianBelief,
    beta_to_gaussian_2d,
    dirichlet_rows_to_gaussian,
    dirichlet_to_gaussian,
    full_inverse_hessian,
    gaussian_rows_to_dirichlet,
    gaussian_to_dirichlet,
    softmax,
)


class TestSoftmax:
    def test_uniform_for_zero(self):
        """Test zero input gives the uniform vector"""
        np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), np.full(3, 1 / 3), atol=1e-15)

    def test_hand_value(self):
        """Test (ln 2, 0, 0) maps to (0.5, 0.25, 0.25)"""
        np.testing.assert_allclose(softmax([np.log(2.0), 0.0, 0.0]), [0.5, 0.25, 0.25], atol=1e-15)

    def test_shift_invariance(self):
        """Test adding a constant leaves the result unchanged"""
        rng = np.random.default_rng(1)
        y = rng.normal(size=7)
        for c in (-30.0, -1.5, 0.7, 30.0):
            np.testing.assert_allclose(softmax(y + c), softmax(y), atol=1e-14)

    def test_large_inputs_do_not_overflow(self):
        """Test huge coordinates stay finite and normalized"""
        p = softmax([1000.0, 999.0, -1000.0])
        assert np.all(np.isfinite(p))
        assert abs(p.sum() - 1.0) < 1e-12

    def test_non_finite_rejected(self):
        """Test non-finite input raises"""
        with pytest.raises(InvalidArgumentError):
            softmax([0.0, np.inf, 1.0])


class TestDirichletToGaussian:
    def test_symmetric_three(self):
        """Test alpha = (1,1,1) gives zero mean and variance 2/3"""
        g = dirichlet_to_gaussian(DirichletBelief(alpha=np.ones(3)))
        np.testing.assert_allclose(g.mean, 0.0, atol=1e-15)
        np.testing.assert_allclose(g.variance, 2 / 3, rtol=1e-15)

    def test_symmetric_ten(self):
        """Test alpha = 1 with K = 10 gives variance 0.9"""
        g = dirichlet_to_gaussian(DirichletBelief(alpha=np.ones(10)))
        np.testing.assert_allclose(g.variance, 0.9, rtol=1e-14)

    def test_mean_is_centred(self):
        """Test the mode sums to zero"""
        rng = np.random.default_rng(2)
        alpha = rng.uniform(0.05, 100, size=12)
        g = dirichlet_to_gaussian(DirichletBelief(alpha=alpha))
        assert abs(g.mean.sum()) < 1e-9 * 12

    def test_mode_matches_dirichlet_mean(self):
        """Test softmax of the mode equals alpha / sum(alpha)"""
        rng = np.random.default_rng(3)
        alpha = rng.uniform(0.05, 100, size=9)
        g = dirichlet_to_gaussian(DirichletBelief(alpha=alpha))
        np.testing.assert_allclose(softmax(g.mean), alpha / alpha.sum(), atol=1e-12)

    def test_variance_decreases_with_alpha(self):
        """Test raising one alpha entry lowers its variance"""
        alpha = np.array([0.5, 2.0, 3.0, 1.0])
        before = dirichlet_to_gaussian(DirichletBelief(alpha=alpha)).variance
        alpha[1] += 0.5
        after = dirichlet_to_gaussian(DirichletBelief(alpha=alpha)).variance
        assert after[1] < before[1]

    def test_two_categories_rejected(self):
        """Test K = 2 points to the Beta special case"""
        with pytest.raises(DimensionError, match="beta_to_gaussian_2d"):
            dirichlet_to_gaussian(DirichletBelief(alpha=np.ones(2)))

    def test_non_positive_alpha_rejected(self):
        """Test non-positive parameters are invalid"""
        with pytest.raises(InvalidArgumentError):
            DirichletBelief(alpha=np.array([1.0, 0.0, 2.0]))


class TestGaussianToDirichlet:
    def test_inverse_example(self):
        """Test zero mean with variance 2/3 gives alpha = 1"""
        d = gaussian_to_dirichlet(GaussianBelief(mean=np.zeros(3), variance=np.full(3, 2 / 3)))
        np.testing.assert_allclose(d.alpha, 1.0, rtol=1e-14)
        assert d.clamped == 0

    def test_symmetric_output(self):
        """Test a symmetric Gaussian maps to a symmetric Dirichlet"""
        d = gaussian_to_dirichlet(GaussianBelief(mean=np.zeros(6), variance=np.full(6, 0.37)))
        assert np.ptp(d.alpha) < 1e-14 * d.alpha[0]

    @pytest.mark.parametrize("K", [3, 5, 10, 50])
    def test_round_trip(self, K):
        """Test the inverse recovers alpha to relative 1e-10 on 1000 draws"""
        rng = np.random.default_rng(K)
        for _ in range(1000):
            alpha = rng.uniform(0.05, 100, size=K)
            back = gaussian_to_dirichlet(dirichlet_to_gaussian(DirichletBelief(alpha=alpha)))
            np.testing.assert_allclose(back.alpha, alpha, rtol=1e-10)

    def test_round_trip_all_dimensions(self):
        """Test the round trip for every K from 3 to 64"""
        rng = np.random.default_rng(64)
        for K in range(3, 65):
            alpha = rng.uniform(0.05, 100, size=K)
            back = gaussian_to_dirichlet(dirichlet_to_gaussian(DirichletBelief(alpha=alpha)))
            np.testing.assert_allclose(back.alpha, alpha, rtol=1e-10)

    def test_clamping_is_counted(self, caplog):
        """Test non-finite parameters are floored and counted"""
        g = GaussianBelief(mean=np.array([800.0, -400.0, -400.0]), variance=np.array([1e-300, 1.0, 1.0]))
        with caplog.at_level(logging.WARNING, logger="ktm.services.bridge"):
            d = gaussian_to_dirichlet(g, alpha_floor=1e-8)
        assert d.clamped == 1
        assert d.alpha[0] == 1e-8
        assert "Clamped" in caplog.text


class TestFullInverseHessian:
    def test_symmetric_three(self):
        """Test alpha = 1, K = 3 gives 2/3 on and -1/3 off the diagonal"""
        m = full_inverse_hessian(DirichletBelief(alpha=np.ones(3))).matrix
        expected = np.full((3, 3), -1 / 3)
        np.fill_diagonal(expected, 2 / 3)
        np.testing.assert_allclose(m, expected, atol=1e-15)

    def test_diagonal_matches_bridge(self):
        """Test the diagonal equals the bridge variances exactly"""
        rng = np.random.default_rng(5)
        d = DirichletBelief(alpha=rng.uniform(0.05, 100, size=11))
        cov = full_inverse_hessian(d)
        np.testing.assert_array_equal(cov.diagonal, dirichlet_to_gaussian(d).variance)
        np.testing.assert_allclose(cov.matrix, cov.matrix.T, atol=1e-12)

    def test_row_sums_vanish_for_symmetric_alpha(self):
        """Test rows sum to zero for symmetric alpha"""
        for K in (3, 10, 50):
            m = full_inverse_hessian(DirichletBelief(alpha=np.full(K, 2.0))).matrix
            assert np.abs(m.sum(axis=1)).max() < 1e-12


class TestBetaToGaussian:
    @pytest.mark.parametrize("a, b, mu, var", [
        (2.0, 1.2, 0.5, 1.3),
        (0.5, 0.9, -0.6, 3.1),
        (3.0, 4.0, -0.3, 0.6),
    ])
    def test_reference_values(self, a, b, mu, var):
        """Test the logit-line Laplace fit on reference Beta parameters"""
        got_mu, got_var = beta_to_gaussian_2d(a, b)
        assert abs(got_mu - mu) <= 0.05
        assert abs(got_var - var) <= 0.05

    def test_rejects_non_positive(self):
        """Test non-positive Beta parameters raise"""
        with pytest.raises(InvalidArgumentError):
            beta_to_gaussian_2d(0.0, 1.0)


class TestRowForms:
    def test_rows_match_single_maps(self):
        """Test the row-wise maps agree with the per-belief maps"""
        rng = np.random.default_rng(6)
        alpha = rng.uniform(0.1, 20, size=(5, 4))
        means, variances = dirichlet_rows_to_gaussian(alpha)
        for d in range(5):
            g = dirichlet_to_gaussian(DirichletBelief(alpha=alpha[d]))
            np.testing.assert_allclose(means[d], g.mean, rtol=1e-13, atol=1e-14)
            np.testing.assert_allclose(variances[d], g.variance, rtol=1e-14)
        back, clamped = gaussian_rows_to_dirichlet(means, variances)
        assert clamped == 0
        np.testing.assert_allclose(back, alpha, rtol=1e-10)

import numpy as np
import pytest

from layerseg.lowrank import (
    ConvergenceError,
    LowRankGaussian,
    RankOneSum,
    SingularConditionalError,
    UnivariateGaussian,
    conditional,
    gaussian_product,
    neighbor_conditional,
    precision_solve,
    sample,
)

from oracles import dense_conditional, gaussian_product_quadrature


def make_gaussian(dim, rank, seed, noise=0.5):
    rng = np.random.default_rng(seed)
    return LowRankGaussian(
        rng.standard_normal(dim), rng.standard_normal((dim, rank)), noise
    )


class TestConditional:
    def test_2x2_schur_example(self):
        # Sigma = [[2,1],[1,2]] fits exactly as W = [1,1]^T, sigma2 = 1
        g = LowRankGaussian(np.zeros(2), np.array([[1.0], [1.0]]), 1.0)
        assert np.allclose(g.dense_cov(), [[2.0, 1.0], [1.0, 2.0]])
        cond = conditional(g, [1], [1.0])
        assert cond.mean[0] == pytest.approx(0.5, abs=1e-12)
        assert cond.cov[0, 0] == pytest.approx(1.5, abs=1e-12)

    def test_isotropic_independence(self):
        g = LowRankGaussian(np.arange(5.0), np.zeros((5, 2)), 0.3)
        cond = conditional(g, [0, 4], [10.0, -10.0])
        assert np.allclose(cond.mean, [1.0, 2.0, 3.0])
        assert np.allclose(cond.cov, 0.3 * np.eye(3))

    def test_matches_dense_inversion_oracle(self):
        g = make_gaussian(6, 2, seed=1)
        obs = np.array([0, 3, 5])
        vals = np.array([0.4, -1.2, 2.0])
        cond = conditional(g, obs, vals)
        m0, c0 = dense_conditional(g.mean, g.dense_cov(), obs, vals)
        assert np.allclose(cond.mean, m0, atol=1e-10)
        assert np.allclose(cond.cov, c0, atol=1e-10)

    def test_random_instances_against_dense(self):
        rng = np.random.default_rng(7)
        for trial in range(25):
            dim = int(rng.integers(3, 21))
            rank = int(rng.integers(0, min(6, dim)))
            g = make_gaussian(dim, rank, seed=100 + trial, noise=0.2 + rng.random())
            n_obs = int(rng.integers(1, dim))
            obs = rng.choice(dim, size=n_obs, replace=False)
            vals = rng.standard_normal(n_obs)
            cond = conditional(g, obs, vals)
            m0, c0 = dense_conditional(g.mean, g.dense_cov(), obs, vals)
            scale = max(np.max(np.abs(m0)), 1.0)
            assert np.max(np.abs(cond.mean - m0)) / scale < 1e-9
            assert np.max(np.abs(cond.cov - c0)) / max(np.max(np.abs(c0)), 1.0) < 1e-9

    def test_index_out_of_range(self):
        g = make_gaussian(4, 1, seed=2)
        with pytest.raises(IndexError):
            conditional(g, [4], [0.0])

    def test_conditioning_everything_rejected(self):
        g = make_gaussian(3, 1, seed=3)
        with pytest.raises(ValueError):
            conditional(g, [0, 1, 2], [0.0, 0.0, 0.0])


class TestNeighborConditional:
    def test_independent_pair_keeps_prior_mean(self):
        g = LowRankGaussian(np.array([1.0, 5.0]), np.zeros((2, 1)), 2.0)
        nb = neighbor_conditional(g, 0, 1, value_prev=100.0)
        assert nb.mean == pytest.approx(5.0)
        assert nb.variance == pytest.approx(2.0)

    def test_bivariate_schur_example(self):
        # Sigma = [[1, .5], [.5, 1]]
        w = np.array([[np.sqrt(0.5)], [np.sqrt(0.5)]])
        g = LowRankGaussian(np.zeros(2), w, 0.5)
        nb = neighbor_conditional(g, 0, 1, value_prev=2.0)
        assert nb.mean == pytest.approx(1.0, abs=1e-12)
        assert nb.variance == pytest.approx(0.75, abs=1e-12)

    def test_consistency_with_conditional(self):
        g = make_gaussian(6, 2, seed=11)
        value = 1.7
        nb = neighbor_conditional(g, 2, 4, value)
        # conditional() on the pair marginal must agree
        pair_cov = g.marginal_pair_cov(2, 4)
        m0, c0 = dense_conditional(
            np.array([g.mean[2], g.mean[4]]), pair_cov, [0], [value]
        )
        assert nb.mean == pytest.approx(m0[0], abs=1e-10)
        assert nb.variance == pytest.approx(c0[0, 0], abs=1e-10)

    def test_degenerate_pair_rejected(self):
        w = np.array([[1.0], [1.0]])
        g = LowRankGaussian(np.zeros(2), w * 1e7, 1e-3)
        with pytest.raises(SingularConditionalError):
            neighbor_conditional(g, 0, 1, 0.0)


class TestGaussianProduct:
    def test_symmetric_standard_normals(self):
        prod, _ = gaussian_product(UnivariateGaussian(0, 1), UnivariateGaussian(0, 1))
        assert prod.mean == pytest.approx(0.0)
        assert prod.variance == pytest.approx(0.5)

    def test_against_quadrature_oracle(self):
        prod, log_scale = gaussian_product(
            UnivariateGaussian(0, 1), UnivariateGaussian(2, 1)
        )
        m0, v0, lz0 = gaussian_product_quadrature(0, 1, 2, 1)
        assert prod.mean == pytest.approx(m0, abs=1e-8)
        assert prod.variance == pytest.approx(v0, abs=1e-7)
        assert log_scale == pytest.approx(lz0, abs=1e-9)

    def test_commutative(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = UnivariateGaussian(rng.standard_normal() * 3, rng.random() + 0.05)
            b = UnivariateGaussian(rng.standard_normal() * 3, rng.random() + 0.05)
            p1, s1 = gaussian_product(a, b)
            p2, s2 = gaussian_product(b, a)
            assert p1.mean == p2.mean and p1.variance == p2.variance and s1 == s2


class TestPrecisionSolve:
    def test_inverts_forward_map(self):
        g = make_gaussian(10, 3, seed=21)
        v = np.random.default_rng(0).standard_normal(10)
        rhs = g.precision_matvec(v)
        x = precision_solve(g, None, rhs, tol=1e-12)
        assert np.allclose(x, v, atol=1e-9)

    def test_matches_dense_oracle(self):
        g = make_gaussian(8, 2, seed=22, noise=0.7)
        rng = np.random.default_rng(1)
        extra = rng.standard_normal((8, 8))
        extra = 0.1 * extra @ extra.T
        rhs = rng.standard_normal(8)
        x = precision_solve(g, extra, rhs, tol=1e-12)
        k_dense = np.linalg.inv(g.dense_cov())
        x0 = np.linalg.solve(k_dense + extra, rhs)
        assert np.max(np.abs(x - x0)) / np.max(np.abs(x0)) < 1e-8

    def test_zero_rhs(self):
        g = make_gaussian(5, 1, seed=23)
        assert np.array_equal(precision_solve(g, None, np.zeros(5)), np.zeros(5))

    def test_residual_contract(self):
        rng = np.random.default_rng(9)
        for trial in range(10):
            g = make_gaussian(12, 3, seed=300 + trial, noise=0.1 + rng.random())
            vecs = rng.standard_normal((4, 12))
            extra = RankOneSum(vecs, rng.random(4))
            rhs = rng.standard_normal(12)
            tol = 1e-9
            x = precision_solve(g, extra, rhs, tol=tol)
            res = np.linalg.norm(
                g.precision_matvec(x) + extra.matvec(x) - rhs
            ) / np.linalg.norm(rhs)
            assert res <= tol

    def test_iteration_cap_reported(self):
        g = make_gaussian(30, 5, seed=31, noise=1e-6)
        rhs = np.random.default_rng(2).standard_normal(30)
        with pytest.raises(ConvergenceError) as exc:
            precision_solve(g, None, rhs, tol=1e-14, max_iter=2)
        assert exc.value.residual is not None


class TestSample:
    def test_deterministic_given_seed(self):
        g = make_gaussian(7, 2, seed=41)
        assert np.array_equal(sample(g, 50, 123), sample(g, 50, 123))

    def test_isotropic_mean_recovery(self):
        dim, n = 6, 100_000
        g = LowRankGaussian(np.full(dim, 2.5), np.zeros((dim, 1)), 0.09)
        draws = sample(g, n, 99)
        tol = 4.0 * 0.3 / np.sqrt(n)
        assert np.max(np.abs(draws.mean(axis=0) - 2.5)) < tol

    def test_covariance_recovery(self):
        g = make_gaussian(10, 2, seed=43, noise=0.4)
        draws = sample(g, 100_000, 7)
        emp = np.cov(draws, rowvar=False)
        target = g.dense_cov()
        err = np.linalg.norm(emp - target) / np.linalg.norm(target)
        assert err < 0.05

    def test_count_validation(self):
        g = make_gaussian(3, 1, seed=44)
        with pytest.raises(ValueError):
            sample(g, 0, 1)


class TestInvariants:
    def test_construction_validation(self):
        with pytest.raises(ValueError):
            LowRankGaussian(np.zeros(3), np.zeros((3, 1)), 0.0)
        with pytest.raises(ValueError):
            LowRankGaussian(np.zeros(3), np.zeros((2, 1)), 1.0)
        with pytest.raises(ValueError):
            LowRankGaussian(np.zeros(3), np.zeros((3, 4)), 1.0)

    def test_implied_covariance_is_spd(self):
        g = make_gaussian(12, 4, seed=51)
        np.linalg.cholesky(g.dense_cov())

    def test_logpdf_matches_dense(self):
        g = make_gaussian(9, 3, seed=52)
        x = np.random.default_rng(3).standard_normal(9)
        from scipy.stats import multivariate_normal

        ref = multivariate_normal(g.mean, g.dense_cov()).logpdf(x)
        assert g.logpdf(x) == pytest.approx(ref, rel=1e-10)

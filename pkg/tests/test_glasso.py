import numpy as np
import pytest

from layerseg.glasso import glasso_objective, graphical_lasso, kkt_residual
from layerseg.lowrank import ConvergenceError

from oracles import glasso_projected_gradient, random_spd
from oracles import glasso_objective as oracle_objective


class TestUnpenalized:
    def test_alpha_zero_returns_inverse(self):
        s = random_spd(6, seed=1)
        k = graphical_lasso(s, 0.0)
        assert np.max(np.abs(k - np.linalg.inv(s))) < 1e-6

    def test_alpha_zero_requires_pd(self):
        s = np.ones((3, 3))
        with pytest.raises(ValueError):
            graphical_lasso(s, 0.0)


class TestTwoByTwo:
    def test_large_alpha_soft_threshold_exact(self):
        s = np.array([[1.0, 0.4], [0.4, 1.0]])
        k = graphical_lasso(s, alpha=0.5)
        assert k[0, 1] == 0.0 and k[1, 0] == 0.0
        assert abs(k[0, 0] - 1.0) < 1e-10 and abs(k[1, 1] - 1.0) < 1e-10

    def test_moderate_alpha_analytic(self):
        # analytic 2x2: W_offdiag = S_offdiag - alpha * sign, diagonal kept
        s = np.array([[2.0, 0.8], [0.8, 1.5]])
        alpha = 0.3
        k = graphical_lasso(s, alpha, tol=1e-10)
        w = np.array([[2.0, 0.5], [0.5, 1.5]])
        assert np.max(np.abs(k - np.linalg.inv(w))) < 1e-8


class TestKkt:
    def test_kkt_residual_within_tol_random(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            p = int(rng.integers(5, 21))
            s = random_spd(p, seed=trial, cond=5.0)
            off = np.abs(s - np.diag(np.diag(s)))
            alpha = 0.3 * off.max()
            k = graphical_lasso(s, alpha, tol=1e-5)
            assert kkt_residual(s, k, alpha) <= 1e-5
            np.linalg.cholesky(k)  # symmetric positive definite

    def test_objective_beats_projected_gradient_oracle(self):
        s = random_spd(5, seed=42, cond=4.0)
        alpha = 0.1
        k = graphical_lasso(s, alpha, tol=1e-7)
        k_pg = glasso_projected_gradient(s, alpha)
        mine = glasso_objective(s, k, alpha)
        theirs = oracle_objective(s, k_pg, alpha)
        assert mine <= theirs + 1e-6

    def test_objective_beats_unpenalized_inverse(self):
        s = random_spd(7, seed=3)
        alpha = 0.15
        k = graphical_lasso(s, alpha)
        baseline = glasso_objective(s, np.linalg.inv(s), alpha)
        assert glasso_objective(s, k, alpha) <= baseline + 1e-10


class TestSparsity:
    def test_sparsity_monotone_in_alpha(self):
        s = random_spd(8, seed=11, cond=8.0)
        nnz_prev = None
        for alpha in [0.01, 0.05, 0.1, 0.3, 1.0]:
            k = graphical_lasso(s, alpha, tol=1e-6)
            nnz = int(np.count_nonzero(k) - k.shape[0])
            if nnz_prev is not None:
                assert nnz <= nnz_prev
            nnz_prev = nnz

    def test_huge_alpha_diagonal(self):
        s = random_spd(5, seed=12)
        k = graphical_lasso(s, alpha=100.0)
        off = k - np.diag(np.diag(k))
        assert np.all(off == 0.0)
        assert np.allclose(np.diag(k), 1.0 / np.diag(s))


class TestValidation:
    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            graphical_lasso(np.array([[1.0, 0.5], [0.2, 1.0]]), 0.1)

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            graphical_lasso(np.eye(3), -0.1)

    def test_nonconvergence_reports_residual(self):
        s = random_spd(10, seed=13, cond=50.0)
        with pytest.raises(ConvergenceError) as exc:
            graphical_lasso(s, alpha=1e-4, tol=1e-14, max_iter=1)
        assert exc.value.residual is not None

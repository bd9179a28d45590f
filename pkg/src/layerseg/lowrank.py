"""Gaussian algebra on low-rank-plus-diagonal covariances.

A ``LowRankGaussian`` represents N(mean, W W^T + sigma2 I) and every
operation here works through the factors via the Woodbury identity

    (W W^T + sigma2 I)^{-1} = (1/sigma2) (I - W M^{-1} W^T),
    M = sigma2 I_q + W^T W,

so nothing ever materializes a D x D matrix. Conditioning follows the
standard Gaussian rule: for a query block Q and observed block A,

    cov(Q | A)  = (K_QQ)^{-1}
    mean(Q | A) = mean_Q - cov(Q|A) K_QA (x_A - mean_A)

with the precision blocks K_QQ, K_QA read off the Woodbury form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

VARIANCE_FLOOR = 1e-12


class SingularConditionalError(np.linalg.LinAlgError):
    """Query-block precision was not positive definite."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class UnivariateGaussian:
    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0.0:
            raise ValueError(f"variance must be positive, got {self.variance}")

    def logpdf(self, x: float) -> float:
        return -0.5 * np.log(2.0 * np.pi * self.variance) - (x - self.mean) ** 2 / (
            2.0 * self.variance
        )


@dataclass(frozen=True)
class DenseGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} vs mean size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def logpdf(self, x: np.ndarray) -> float:
        d = np.asarray(x, dtype=np.float64) - self.mean
        cho = sla.cho_factor(self.cov, lower=True)
        quad = d @ sla.cho_solve(cho, d)
        logdet = 2.0 * np.sum(np.log(np.diag(cho[0])))
        return -0.5 * (self.mean.size * np.log(2.0 * np.pi) + logdet + quad)


class LowRankGaussian:
    """Immutable N(mean, W W^T + sigma2 I) with cached Woodbury factors."""

    def __init__(self, mean, factors, noise_variance):
        self.mean = np.asarray(mean, dtype=np.float64).copy()
        self.factors = np.asarray(factors, dtype=np.float64).copy()
        if self.factors.ndim != 2 or self.factors.shape[0] != self.mean.size:
            raise ValueError(
                f"factor matrix {self.factors.shape} incompatible with dim {self.mean.size}"
            )
        if not np.all(np.isfinite(self.factors)) or not np.all(np.isfinite(self.mean)):
            raise ValueError("mean and factors must be finite")
        if not noise_variance > 0.0:
            raise ValueError(f"noise variance must be positive, got {noise_variance}")
        if self.factors.shape[1] > self.mean.size:
            raise ValueError("latent rank exceeds dimension")
        self.noise_variance = float(noise_variance)
        self.mean.flags.writeable = False
        self.factors.flags.writeable = False
        q = self.factors.shape[1]
        m_small = self.noise_variance * np.eye(q) + self.factors.T @ self.factors
        self._m_cho = sla.cho_factor(m_small, lower=True) if q else None
        self._m_small = m_small

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def rank(self) -> int:
        return self.factors.shape[1]

    # -- covariance / precision actions ------------------------------------

    def cov_matvec(self, x: np.ndarray) -> np.ndarray:
        return self.factors @ (self.factors.T @ x) + self.noise_variance * x

    def precision_matvec(self, x: np.ndarray) -> np.ndarray:
        if self.rank == 0:
            return x / self.noise_variance
        t = sla.cho_solve(self._m_cho, self.factors.T @ x)
        return (x - self.factors @ t) / self.noise_variance

    def solve_m(self, y: np.ndarray) -> np.ndarray:
        """Solve (sigma2 I_q + W^T W) t = y."""
        if self.rank == 0:
            return np.zeros_like(y)
        return sla.cho_solve(self._m_cho, y)

    def dense_cov(self) -> np.ndarray:
        return self.factors @ self.factors.T + self.noise_variance * np.eye(self.dim)

    def logdet_cov(self) -> float:
        if self.rank == 0:
            return self.dim * np.log(self.noise_variance)
        logdet_m = 2.0 * np.sum(np.log(np.diag(self._m_cho[0])))
        return (self.dim - self.rank) * np.log(self.noise_variance) + logdet_m

    def logpdf(self, x: np.ndarray) -> float:
        d = np.asarray(x, dtype=np.float64) - self.mean
        quad = d @ self.precision_matvec(d)
        return -0.5 * (self.dim * np.log(2.0 * np.pi) + self.logdet_cov() + quad)

    def precision_block(self, idx: np.ndarray) -> np.ndarray:
        """Dense precision block K[idx, idx] (idx small)."""
        idx = np.asarray(idx, dtype=np.intp)
        w_q = self.factors[idx]
        block = np.eye(idx.size)
        if self.rank:
            block = block - w_q @ self.solve_m(w_q.T)
        return block / self.noise_variance

    def marginal_pair_cov(self, i: int, k: int) -> np.ndarray:
        """2x2 prior covariance of coordinates (i, k)."""
        w = self.factors[[i, k]]
        return w @ w.T + self.noise_variance * np.eye(2)


def conditional(g: LowRankGaussian, observed_idx, observed_values) -> DenseGaussian:
    """Condition on coordinates ``observed_idx``; returns the complement block.

    Cost is polynomial in the latent rank and the query-block size; the full
    precision matrix is never formed.
    """
    observed_idx = np.asarray(observed_idx, dtype=np.intp)
    observed_values = np.asarray(observed_values, dtype=np.float64)
    if observed_idx.size != observed_values.size:
        raise ValueError("observed index/value length mismatch")
    if observed_idx.size and (
        observed_idx.min() < 0 or observed_idx.max() >= g.dim
    ):
        raise IndexError(f"observed index out of range 0..{g.dim - 1}")
    if np.unique(observed_idx).size != observed_idx.size:
        raise ValueError("observed indices must be unique")

    mask = np.ones(g.dim, dtype=bool)
    mask[observed_idx] = False
    query_idx = np.nonzero(mask)[0]
    if query_idx.size == 0:
        raise ValueError("conditioning on every coordinate leaves nothing to query")

    k_qq = g.precision_block(query_idx)
    try:
        cho = sla.cho_factor(k_qq, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularConditionalError(
            f"query-block precision of size {query_idx.size} is not positive definite"
        ) from exc
    cov = sla.cho_solve(cho, np.eye(query_idx.size))
    cov = 0.5 * (cov + cov.T)

    mean = g.mean[query_idx].copy()
    if g.rank and observed_idx.size:
        delta = observed_values - g.mean[observed_idx]
        t = g.solve_m(g.factors[observed_idx].T @ delta)
        k_qa_delta = -(g.factors[query_idx] @ t) / g.noise_variance
        mean -= cov @ k_qa_delta
    return DenseGaussian(mean, cov)


def neighbor_conditional(
    g: LowRankGaussian, index_prev: int, index: int, value_prev: float
) -> UnivariateGaussian:
    """Condition the bivariate prior marginal of (index_prev, index) on the first."""
    if index_prev == index:
        raise ValueError("neighbor indices must differ")
    pair_cov = g.marginal_pair_cov(index_prev, index)
    var_prev = pair_cov[0, 0]
    cross = pair_cov[0, 1]
    corr2 = cross * cross / (var_prev * pair_cov[1, 1])
    if corr2 >= 1.0 - 1e-12:
        raise SingularConditionalError(
            f"degenerate bivariate marginal for pair ({index_prev}, {index}): "
            f"correlation^2 = {corr2:.17g}"
        )
    rho = cross / var_prev
    mean = g.mean[index] + rho * (value_prev - g.mean[index_prev])
    var = pair_cov[1, 1] - cross * rho
    return UnivariateGaussian(mean, max(var, VARIANCE_FLOOR))


def gaussian_product(a: UnivariateGaussian, b: UnivariateGaussian):
    """Normalized product of two univariate Gaussian densities.

    Returns ``(UnivariateGaussian, log_scale)`` where ``log_scale`` is the
    log of the normalizing constant, i.e. log of the convolution value
    N(a.mean; b.mean, a.variance + b.variance).
    """
    va = max(a.variance, VARIANCE_FLOOR)
    vb = max(b.variance, VARIANCE_FLOOR)
    prec = 1.0 / va + 1.0 / vb
    var = 1.0 / prec
    mean = var * (a.mean / va + b.mean / vb)
    vsum = va + vb
    log_scale = -0.5 * np.log(2.0 * np.pi * vsum) - (a.mean - b.mean) ** 2 / (2.0 * vsum)
    return UnivariateGaussian(mean, var), float(log_scale)


def precision_solve(
    g: LowRankGaussian,
    extra_precision,
    rhs: np.ndarray,
    tol: float = 1e-8,
    max_iter: int | None = None,
) -> np.ndarray:
    """Solve (K + P) x = rhs by unpreconditioned conjugate gradient.

    ``extra_precision`` may be None, a dense symmetric PSD matrix, or any
    object with a ``matvec(x)`` method (e.g. a sum of rank-one terms).
    Matrix-vector products with K go through the Woodbury factors. Raises
    :class:`ConvergenceError` if the relative residual has not reached
    ``tol`` within ``max_iter`` (default ``10 * dim``) iterations.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape != (g.dim,):
        raise ValueError(f"rhs shape {rhs.shape}, expected ({g.dim},)")
    if extra_precision is None:
        apply_extra = lambda x: 0.0
    elif hasattr(extra_precision, "matvec"):
        apply_extra = extra_precision.matvec
    else:
        mat = np.asarray(extra_precision, dtype=np.float64)
        apply_extra = lambda x: mat @ x

    def operator(x):
        return g.precision_matvec(x) + apply_extra(x)

    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        return np.zeros(g.dim)
    if max_iter is None:
        max_iter = 10 * g.dim

    x = np.zeros(g.dim)
    r = rhs.copy()
    p = r.copy()
    rs = r @ r
    for _ in range(max_iter):
        if np.sqrt(rs) <= tol * rhs_norm:
            # accept only if the true residual honors the contract
            true_r = rhs - operator(x)
            rs = true_r @ true_r
            if np.sqrt(rs) <= tol * rhs_norm:
                return x
            r = true_r
            p = r.copy()
        ap = operator(p)
        denom = p @ ap
        if denom <= 0.0:
            raise ConvergenceError(
                f"operator not positive definite (p^T A p = {denom:.3e})",
                residual=np.sqrt(rs) / rhs_norm,
            )
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    res = np.linalg.norm(operator(x) - rhs) / rhs_norm
    if res <= tol:
        return x
    raise ConvergenceError(
        f"conjugate gradient did not reach tol={tol:.1e} in {max_iter} iterations",
        residual=res,
    )


def sample(g: LowRankGaussian, count: int, rng_seed) -> np.ndarray:
    """Draw ``count`` rows of W s + mean + eps, deterministic given the seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    latent = rng.standard_normal((count, g.rank))
    eps = rng.standard_normal((count, g.dim))
    return latent @ g.factors.T + g.mean + np.sqrt(g.noise_variance) * eps


class RankOneSum:
    """Symmetric PSD operator  sum_i w_i v_i v_i^T  kept in factored form."""

    def __init__(self, vectors: np.ndarray, weights: np.ndarray):
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.vectors.ndim != 2 or self.weights.shape != (self.vectors.shape[0],):
            raise ValueError("vectors must be (r, D) with matching weights (r,)")
        if np.any(self.weights < 0.0):
            warnings.warn("negative rank-one weights make the operator indefinite")

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.vectors.T @ (self.weights * (self.vectors @ x))

    def dense(self) -> np.ndarray:
        return (self.vectors * self.weights[:, None]).T @ self.vectors

"""Cross-column coupling machinery between the discrete chains and q_b.

For each column j the conditional p(b_col_j | rest) has mean
``mu_j - Gamma_j (b_rest - mu_rest)`` with ``Gamma_j`` the rows of
``Sigma_cond K_{j,rest}``. Through the Woodbury form of the precision those
rows are structured:

    gamma_k = a_k W^T  with the column's own block replaced by zeros,
    A_j = -(1/sigma2) Sigma_cond W_j M^{-1}    (n_boundaries x q).

Everything the inference needs from these rows is precomputed here once per
segmentation (they depend only on the prior):

* expected conditional means under q_b (linear in the posterior mean),
* quadratic forms gamma Sigma_bar gamma^T (via a posterior-covariance
  operator, never a dense D x D product),
* the precision augmentation P_tilde = sum gamma^T gamma / v and the linear
  term p_tilde feeding the closed-form q_b update,
* neighbor-chain conditionals p(b_k | b_{k-1}) within each column.

Two interchangeable posterior-covariance representations are provided:
``SigmaDense`` materializes (K + P)^{-1} (guarded desk scale) and
``SigmaStructured`` keeps it in block-diagonal-plus-low-rank Woodbury form
for large stacks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .lowrank import VARIANCE_FLOOR, LowRankGaussian, precision_solve
from .shape import ShapePrior

DENSE_SIZE_LIMIT = 4096


class DenseSizeError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnCoupling:
    a_mat: np.ndarray  # (N_b, q)
    g_mat: np.ndarray  # (N_b, N_b), A_j W_j^T
    sigma_cond: np.ndarray  # (N_b, N_b) uninflated conditional covariance
    v: np.ndarray  # (N_b,) inflated conditional variances, floored
    mu_col: np.ndarray  # (N_b,) prior means of this column
    nb_intercept: np.ndarray  # (N_b-1,)
    nb_rho: np.ndarray  # (N_b-1,)
    nb_var: np.ndarray  # (N_b-1,) floored


class PriorCoupling:
    """Prior-derived, q_c/q_b-independent context shared across iterations."""

    def __init__(self, prior: ShapePrior):
        self.prior = prior
        g = prior.gaussian
        geom = prior.geometry
        n_b = geom.n_boundaries
        self.n_b = n_b
        self.n_cols = geom.n_cols
        self.dim = g.dim
        self.inflation = prior.variance_inflation

        floored = 0
        cols = []
        w = g.factors
        for j in range(geom.n_cols):
            block = prior.column_indices(j)
            w_j = w[block]
            k_jj = g.precision_block(block)
            try:
                cho = sla.cho_factor(k_jj, lower=True)
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(
                    f"column {j}: conditional precision block not PD"
                ) from exc
            sigma_cond = sla.cho_solve(cho, np.eye(n_b))
            sigma_cond = 0.5 * (sigma_cond + sigma_cond.T)
            a_mat = -(sigma_cond @ g.solve_m(w_j.T).T) / g.noise_variance
            g_mat = a_mat @ w_j.T
            v = self.inflation * np.diag(sigma_cond).copy()
            low = v < VARIANCE_FLOOR
            floored += int(np.count_nonzero(low))
            v[low] = VARIANCE_FLOOR

            pair_cov = w_j @ w_j.T + g.noise_variance * np.eye(n_b)
            mu_col = g.mean[block]
            nb_rho = np.zeros(max(n_b - 1, 0))
            nb_var = np.zeros(max(n_b - 1, 0))
            nb_intercept = np.zeros(max(n_b - 1, 0))
            for k in range(1, n_b):
                var_prev = pair_cov[k - 1, k - 1]
                cross = pair_cov[k, k - 1]
                rho = cross / var_prev
                nb_rho[k - 1] = rho
                var = pair_cov[k, k] - cross * rho
                if var < VARIANCE_FLOOR:
                    floored += 1
                    var = VARIANCE_FLOOR
                nb_var[k - 1] = var
                nb_intercept[k - 1] = mu_col[k] - rho * mu_col[k - 1]
            cols.append(
                ColumnCoupling(
                    a_mat=a_mat,
                    g_mat=g_mat,
                    sigma_cond=sigma_cond,
                    v=v,
                    mu_col=mu_col,
                    nb_intercept=nb_intercept,
                    nb_rho=nb_rho,
                    nb_var=nb_var,
                )
            )
        if floored:
            warnings.warn(
                f"{floored} conditional variances hit the {VARIANCE_FLOOR} floor"
            )
        self.columns = cols
        self.v_flat = np.concatenate([c.v for c in cols])
        self._sigma_cache: dict = {}
        # per-column constants dropped from the stored tables (see tables.py)
        self.log_norm_const = sum(
            -0.5 * float(np.sum(np.log(2.0 * np.pi * c.v)))
            - 0.5 * float(np.sum(np.log(2.0 * np.pi * c.nb_var)))
            for c in cols
        )
        self._gamma_dense = None

    # -- gamma actions -------------------------------------------------------

    def block(self, j: int) -> np.ndarray:
        return self.prior.column_indices(j)

    def gamma_dense(self) -> np.ndarray:
        """All gamma rows stacked (D x D); desk-scale only."""
        if self._gamma_dense is None:
            if self.dim > DENSE_SIZE_LIMIT:
                raise DenseSizeError(
                    f"dense coupling refused for dimension {self.dim} > {DENSE_SIZE_LIMIT}"
                )
            w_t = self.prior.gaussian.factors.T
            gamma = np.zeros((self.dim, self.dim))
            for j, col in enumerate(self.columns):
                rows = self.block(j)
                gamma[rows] = col.a_mat @ w_t
                gamma[np.ix_(rows, rows)] = 0.0
            self._gamma_dense = gamma
        return self._gamma_dense

    def gamma_matvec(self, x: np.ndarray) -> np.ndarray:
        """Gamma @ x without materializing Gamma."""
        t = self.prior.gaussian.factors.T @ x
        out = np.empty(self.dim)
        for j, col in enumerate(self.columns):
            rows = self.block(j)
            out[rows] = col.a_mat @ t - col.g_mat @ x[rows]
        return out

    def gamma_rmatvec(self, z: np.ndarray) -> np.ndarray:
        """Gamma^T @ z without materializing Gamma."""
        acc = np.zeros(self.prior.gaussian.rank)
        out = np.empty(self.dim)
        for j, col in enumerate(self.columns):
            rows = self.block(j)
            acc += col.a_mat.T @ z[rows]
            out[rows] = -(col.g_mat.T @ z[rows])
        return out + self.prior.gaussian.factors @ acc

    def expected_cond_means(self, mu_bar: np.ndarray) -> np.ndarray:
        """(M, N_b) expectation of the conditional means under q_b."""
        d = mu_bar - self.prior.gaussian.mean
        t = self.prior.gaussian.factors.T @ d
        out = np.empty((self.n_cols, self.n_b))
        for j, col in enumerate(self.columns):
            rows = self.block(j)
            out[j] = col.mu_col - col.a_mat @ t + col.g_mat @ d[rows]
        return out

    def gamma_variances(self, sigma_ops: "SigmaOps") -> np.ndarray:
        """(M, N_b) quadratic forms gamma_k Sigma_bar gamma_k^T."""
        w = self.prior.gaussian.factors
        sw = sigma_ops.matmat(w)  # (D, q)
        g1 = w.T @ sw
        out = np.empty((self.n_cols, self.n_b))
        for j, col in enumerate(self.columns):
            rows = self.block(j)
            g2 = sw[rows].T  # (q, N_b) = W^T Sigma[:, block]
            g3 = sigma_ops.diag_block(rows)
            a, h = col.a_mat, col.g_mat
            term1 = np.einsum("kq,qr,kr->k", a, g1, a)
            term2 = np.einsum("kq,qn,kn->k", a, g2, h)
            term3 = np.einsum("kn,nm,km->k", h, g3, h)
            out[j] = term1 - 2.0 * term2 + term3
        return out

    # -- precision augmentation ------------------------------------------------

    def p_tilde(self, expected_rows: np.ndarray) -> np.ndarray:
        """p~ = Gamma^T diag(1/v) (E_qc[c] - mu), expected_rows is (N_b, M)."""
        resid = expected_rows.flatten(order="F") - self.prior.gaussian.mean
        return self.gamma_rmatvec(resid / self.v_flat)

    def p_tilde_matvec(self, x: np.ndarray) -> np.ndarray:
        """P~ @ x = Gamma^T diag(1/v) Gamma x."""
        return self.gamma_rmatvec(self.gamma_matvec(x) / self.v_flat)

    def p_tilde_dense(self) -> np.ndarray:
        gamma = self.gamma_dense()
        return gamma.T @ (gamma / self.v_flat[:, None])


class PrecisionAugment:
    """P~ (operator form) and p~ for the q_b update."""

    def __init__(self, coupling: PriorCoupling, p_vec: np.ndarray):
        self.coupling = coupling
        self.p_vec = np.asarray(p_vec, dtype=np.float64)
        if not np.all(np.isfinite(self.p_vec)):
            raise ValueError("p~ must be finite")

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.coupling.p_tilde_matvec(x)

    def dense(self) -> np.ndarray:
        return self.coupling.p_tilde_dense()


# ---------------------------------------------------------------------------
# posterior covariance representations
# ---------------------------------------------------------------------------


class SigmaDense:
    """Materialized (K + P~)^{-1} with a Cholesky factor of the precision."""

    def __init__(self, precision: np.ndarray):
        self.precision = 0.5 * (precision + precision.T)
        self._cho = sla.cho_factor(self.precision, lower=True)
        cov = sla.cho_solve(self._cho, np.eye(precision.shape[0]))
        self.cov = 0.5 * (cov + cov.T)

    def matmat(self, x: np.ndarray) -> np.ndarray:
        return self.cov @ x

    def diag_block(self, rows: np.ndarray) -> np.ndarray:
        return self.cov[np.ix_(rows, rows)]

    def trace(self) -> float:
        return float(np.trace(self.cov))

    def logdet(self) -> float:
        return -2.0 * float(np.sum(np.log(np.diag(self._cho[0]))))

    def dense(self) -> np.ndarray:
        return self.cov


class SigmaStructured:
    """(Blk + U C U^T)^{-1} kept in Woodbury form.

    K + P~ decomposes exactly as a block-diagonal part (per-column
    n_boundaries blocks) plus a symmetric rank-2q correction built from the
    prior factors; see the module docstring of this file.
    """

    def __init__(self, coupling: PriorCoupling, prior_scale: float = 1.0):
        g = coupling.prior.gaussian
        n_b = coupling.n_b
        q = g.rank
        dim = coupling.dim
        s2 = g.noise_variance * prior_scale

        blocks = np.empty((coupling.n_cols, n_b, n_b))
        s_small = np.zeros((q, q))
        t_mat = np.empty((dim, q))  # T^T, block rows (G_j^T D_j A_j)
        for j, col in enumerate(coupling.columns):
            d_j = 1.0 / col.v
            blocks[j] = np.eye(n_b) / s2 + col.g_mat.T @ (d_j[:, None] * col.g_mat)
            s_small += col.a_mat.T @ (d_j[:, None] * col.a_mat)
            t_mat[coupling.block(j)] = col.g_mat.T @ (d_j[:, None] * col.a_mat)
        if q:
            m_inv = g.solve_m(np.eye(q))
            s_small -= m_inv / s2

        self.n_b = n_b
        self.blocks_cho = [sla.cho_factor(b, lower=True) for b in blocks]
        self.block_of = coupling.block
        self.n_cols = coupling.n_cols
        self.dim = dim

        u_mat = np.concatenate([g.factors, t_mat], axis=1)  # (D, 2q)
        c_inv = np.zeros((2 * q, 2 * q))
        c_inv[:q, q:] = -np.eye(q)
        c_inv[q:, :q] = -np.eye(q)
        c_inv[q:, q:] = -s_small
        self.c_mat = np.zeros((2 * q, 2 * q))
        self.c_mat[:q, :q] = s_small
        self.c_mat[:q, q:] = -np.eye(q)
        self.c_mat[q:, :q] = -np.eye(q)

        v_mat = np.empty_like(u_mat)
        for j in range(self.n_cols):
            rows = self.block_of(j)
            v_mat[rows] = sla.cho_solve(self.blocks_cho[j], u_mat[rows])
        self.u_mat = u_mat
        self.v_mat = v_mat
        self.z_mat = c_inv + u_mat.T @ v_mat
        self._z_lu = sla.lu_factor(self.z_mat) if q else None

    def _blk_solve(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        for j in range(self.n_cols):
            rows = self.block_of(j)
            out[rows] = sla.cho_solve(self.blocks_cho[j], x[rows])
        return out

    def matmat(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        w = self._blk_solve(x)
        if self._z_lu is None:
            return w
        return w - self.v_mat @ sla.lu_solve(self._z_lu, self.u_mat.T @ w)

    def diag_block(self, rows: np.ndarray) -> np.ndarray:
        j = rows[0] // self.n_b
        blk_inv = sla.cho_solve(self.blocks_cho[j], np.eye(self.n_b))
        if self._z_lu is None:
            return blk_inv
        v_rows = self.v_mat[rows]
        return blk_inv - v_rows @ sla.lu_solve(self._z_lu, v_rows.T)

    def trace(self) -> float:
        total = 0.0
        for j in range(self.n_cols):
            total += float(np.trace(sla.cho_solve(self.blocks_cho[j], np.eye(self.n_b))))
        if self._z_lu is not None:
            total -= float(np.sum(self.v_mat * sla.lu_solve(self._z_lu, self.v_mat.T).T))
        return total

    def logdet(self) -> float:
        """log det Sigma = -log det (Blk + U C U^T)."""
        logdet_blk = sum(
            2.0 * float(np.sum(np.log(np.diag(cho[0])))) for cho in self.blocks_cho
        )
        if self._z_lu is None:
            return -logdet_blk
        sign_c, logdet_c = np.linalg.slogdet(self.c_mat)
        sign_z, logdet_z = np.linalg.slogdet(self.z_mat)
        if sign_c * sign_z <= 0:
            raise np.linalg.LinAlgError("structured logdet sign inconsistency")
        return -(logdet_blk + logdet_c + logdet_z)

    def dense(self) -> np.ndarray:
        if self.dim > DENSE_SIZE_LIMIT:
            raise DenseSizeError("refusing to materialize large structured covariance")
        return self.matmat(np.eye(self.dim))


SigmaOps = SigmaDense | SigmaStructured


class GaussianPosterior:
    """q_b = N(mean, Sigma_bar) with Sigma_bar behind a query interface."""

    def __init__(self, mean: np.ndarray, sigma: SigmaOps):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.sigma = sigma

    @property
    def covariance(self) -> np.ndarray:
        return self.sigma.dense()


def build_coupling(prior: ShapePrior) -> PriorCoupling:
    return PriorCoupling(prior)


def build_augment(prior_or_coupling, qc) -> PrecisionAugment:
    """Assemble P~ and p~ from the current singleton expectations E_qc[c].

    ``qc`` is a discrete posterior (anything exposing ``expected_rows()``)
    or the raw (N_b, M) expectation array. P~ never depends on q_c; only p~
    does.
    """
    coupling = (
        prior_or_coupling
        if isinstance(prior_or_coupling, PriorCoupling)
        else PriorCoupling(prior_or_coupling)
    )
    expected = qc.expected_rows() if hasattr(qc, "expected_rows") else np.asarray(qc)
    return PrecisionAugment(coupling, coupling.p_tilde(expected))


def optimize_qb(
    prior_or_coupling,
    augment: PrecisionAugment,
    cg_tol: float = 1e-8,
    mode: str = "auto",
    prior_scale: float = 1.0,
) -> GaussianPosterior:
    """Closed-form q_b update: Sigma = (K + P~)^{-1}, mu = mean - Sigma p~.

    The mean solve runs conjugate gradient against the factored operator;
    the covariance is materialized densely at desk scale or kept in
    structured Woodbury form (``mode`` in {"auto", "dense", "structured"}).
    ``prior_scale`` > 1 swaps the prior covariance for its inflated version
    inside the objective (config option; default leaves the prior alone).
    """
    coupling = augment.coupling if augment is not None else None
    if coupling is None:
        coupling = (
            prior_or_coupling
            if isinstance(prior_or_coupling, PriorCoupling)
            else PriorCoupling(prior_or_coupling)
        )
    prior = coupling.prior
    if mode == "auto":
        mode = "dense" if coupling.dim <= DENSE_SIZE_LIMIT else "structured"
    cache_key = (mode, prior_scale)
    sigma = coupling._sigma_cache.get(cache_key)
    if sigma is None:
        # K + P~ never depends on q_c or q_b, so the covariance is built once
        if mode == "dense":
            if coupling.dim > DENSE_SIZE_LIMIT:
                raise DenseSizeError(
                    f"dense q_b refused for dimension {coupling.dim} > {DENSE_SIZE_LIMIT}"
                )
            k_dense = _dense_precision(prior, prior_scale)
            sigma = SigmaDense(k_dense + augment.dense())
        elif mode == "structured":
            sigma = SigmaStructured(coupling, prior_scale)
        else:
            raise ValueError(f"unknown sigma mode {mode!r}")
        coupling._sigma_cache[cache_key] = sigma

    g_eff = prior.gaussian
    if prior_scale != 1.0:
        g_eff = LowRankGaussian(
            g_eff.mean,
            g_eff.factors * np.sqrt(prior_scale),
            g_eff.noise_variance * prior_scale,
        )
    if np.any(augment.p_vec):
        shift = precision_solve(g_eff, augment, augment.p_vec, tol=cg_tol)
        mean = prior.gaussian.mean - shift
    else:
        mean = prior.gaussian.mean.copy()
    return GaussianPosterior(mean, sigma)


def _dense_precision(prior: ShapePrior, prior_scale: float = 1.0) -> np.ndarray:
    g = prior.gaussian
    if g.rank == 0:
        return np.eye(g.dim) / (g.noise_variance * prior_scale)
    w_m = g.solve_m(g.factors.T)
    return (np.eye(g.dim) - g.factors @ w_m) / (g.noise_variance * prior_scale)

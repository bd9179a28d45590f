"""Global Gaussian shape prior over all boundary heights.

The prior is a probabilistic-PCA Gaussian on the column-major flattening of
an (n_boundaries, n_cols) boundary field: covariance W W^T + sigma2 I with
the maximum-likelihood solution W = U_q (L_q - sigma2 I)^{1/2},
sigma2 = mean of the discarded eigenvalue spectrum. Fitting works on the
n x n Gram matrix of the centered training fields so dimension never enters
cubically.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundaryField, GeometryError, ScanGeometry
from .lowrank import DenseGaussian, LowRankGaussian, UnivariateGaussian
from .lowrank import conditional as lowrank_conditional
from .lowrank import neighbor_conditional as lowrank_neighbor_conditional

SIGMA2_FLOOR = 1e-12


@dataclass(frozen=True)
class ShapePrior:
    gaussian: LowRankGaussian
    geometry: ScanGeometry
    q_ppca: int
    variance_inflation: float = 10.0
    fit_warnings: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.gaussian.dim != self.geometry.boundary_dim:
            raise GeometryError(
                f"prior dimension {self.gaussian.dim} != geometry "
                f"boundary dim {self.geometry.boundary_dim}"
            )
        if not self.variance_inflation > 0.0:
            raise ValueError("variance inflation must be positive")

    # -- indexing helpers ----------------------------------------------------

    def column_indices(self, j: int) -> np.ndarray:
        n_b = self.geometry.n_boundaries
        return np.arange(j * n_b, (j + 1) * n_b, dtype=np.intp)

    def flat_index(self, k: int, j: int) -> int:
        """Flat coordinate of boundary k (1-based) in column j (0-based)."""
        return j * self.geometry.n_boundaries + (k - 1)

    def mean_field(self) -> BoundaryField:
        return BoundaryField.from_flat(self.gaussian.mean, self.geometry)

    # -- queries ---------------------------------------------------------------

    def column_conditional(self, j: int, b_rest: np.ndarray) -> DenseGaussian:
        """p(b_col_j | rest), covariance scaled by the variance inflation.

        ``b_rest`` holds the boundary values of all other columns in flat
        (column-major) order with column j removed. The conditional mean is
        computed from the unscaled prior; only the covariance is inflated,
        which is the knob balancing appearance against shape.
        """
        b_rest = np.asarray(b_rest, dtype=np.float64)
        n_b = self.geometry.n_boundaries
        if b_rest.shape != (self.gaussian.dim - n_b,):
            raise ValueError(
                f"b_rest shape {b_rest.shape}, expected ({self.gaussian.dim - n_b},)"
            )
        if not np.all(np.isfinite(b_rest)):
            raise ValueError("b_rest must be finite")
        cols = self.column_indices(j)
        mask = np.ones(self.gaussian.dim, dtype=bool)
        mask[cols] = False
        observed_idx = np.nonzero(mask)[0]
        base = lowrank_conditional(self.gaussian, observed_idx, b_rest)
        return DenseGaussian(base.mean, self.variance_inflation * base.cov)

    def neighbor_conditional(self, k: int, j: int, value_prev: float) -> UnivariateGaussian:
        """p(b_{k,j} | b_{k-1,j}) from the prior's bivariate marginal, k >= 2."""
        if k < 2:
            raise ValueError("neighbor conditional needs k >= 2")
        if k > self.geometry.n_boundaries:
            raise ValueError(f"boundary index {k} out of range")
        return lowrank_neighbor_conditional(
            self.gaussian, self.flat_index(k - 1, j), self.flat_index(k, j), value_prev
        )


def fit_ppca(
    training: list[BoundaryField],
    q_ppca: int,
    variance_inflation: float = 10.0,
) -> ShapePrior:
    """Maximum-likelihood PPCA fit of the shape prior from labeled fields.

    Training fields must share one geometry and be strictly ordered down
    every column; violating fields are rejected, not repaired. When the
    empirical covariance has fewer than ``q_ppca`` strictly positive
    eigenvalues the rank is truncated and a warning is attached to the
    returned prior.
    """
    if q_ppca < 1:
        raise ValueError("q_ppca must be >= 1")
    if len(training) < 2:
        raise ValueError("need at least two training fields")
    geometry = training[0].geometry
    for i, fld in enumerate(training):
        if fld.geometry != geometry:
            raise GeometryError(f"training field {i} has inconsistent geometry")
        fld.require_ordered()

    dim = geometry.boundary_dim
    if q_ppca > dim - 1:
        raise ValueError(f"q_ppca={q_ppca} exceeds dimension-1 ({dim - 1})")

    data = np.stack([fld.flat() for fld in training])  # (n, D)
    n = data.shape[0]
    mu = data.mean(axis=0)
    centered = data - mu

    # eigenpairs of the empirical covariance X^T X / (n-1) via the Gram matrix
    gram = centered @ centered.T / (n - 1)
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]

    positive = evals > max(1e-12 * max(evals[0], 0.0), 0.0)
    n_positive = int(np.count_nonzero(positive))
    notes = []
    q_eff = q_ppca
    if n_positive < q_ppca:
        q_eff = max(n_positive, 0)
        notes.append(
            f"q_ppca truncated from {q_ppca} to {q_eff}: "
            f"only {n_positive} positive eigenvalues"
        )
        warnings.warn(notes[-1])

    total_var = float(np.trace(gram))  # == trace of the big covariance
    kept = evals[:q_eff] if q_eff else np.zeros(0)
    sigma2 = (total_var - float(np.sum(kept))) / (dim - q_eff) if dim > q_eff else 0.0
    sigma2 = max(sigma2, SIGMA2_FLOOR)

    if q_eff:
        # lift Gram eigenvectors to data space: u_i = X^T v_i / sqrt((n-1) l_i)
        basis = centered.T @ (evecs[:, :q_eff] / np.sqrt((n - 1) * kept))
        scale = np.sqrt(np.maximum(kept - sigma2, 0.0))
        factors = basis * scale
    else:
        factors = np.zeros((dim, q_ppca))  # degenerate data: keep requested width

    return ShapePrior(
        gaussian=LowRankGaussian(mu, factors, sigma2),
        geometry=geometry,
        q_ppca=factors.shape[1],
        variance_inflation=variance_inflation,
        fit_warnings=tuple(notes),
    )


def save(prior: ShapePrior, path) -> None:
    from . import io

    io.save_shape_prior(prior, path)


def load(path) -> ShapePrior:
    from . import io

    return io.load_shape_prior(path)

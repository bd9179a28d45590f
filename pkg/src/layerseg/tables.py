"""Column-wise chain tables: appearance terms and shape-induced terms.

Data tables sum per-pixel class log-probabilities between/at candidate
boundary rows; shape tables hold the q_b-expectation of the log conditional
densities p(c_1 | b) and p(c_k | c_{k-1}, b) evaluated on the integer row
grid (crudest quadrature rule: the density at the midpoint).

Stored entries keep every (m, n)-dependent term. Terms constant across a
table - the Gaussian log-normalizers and the q_b-variance quadratic
gamma Sigma_bar gamma^T / (2 v) - are dropped here and reconstituted
analytically in the objective (they never move the chain marginals).
Forbidden cells (n <= m) are -inf, enforcing the ordering constraint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .coupling import GaussianPosterior, PriorCoupling
from .shape import ShapePrior

NEG_INF = -np.inf
DEFAULT_SPARSITY_THRESHOLD = 1e-12


@dataclass(frozen=True)
class DataTables:
    psi_first: np.ndarray  # (N,)
    psis: np.ndarray  # (N_b-1, N, N)
    psi_last: np.ndarray  # (N,)


@dataclass(frozen=True)
class ShapeTables:
    omega_first: np.ndarray  # (N,)
    omegas: np.ndarray  # (N_b-1, N, N)
    dropped_constant: float  # sum over k of the entry-constant terms
    gamma_variances: np.ndarray  # (N_b,) gamma Sigma gamma^T per boundary


@dataclass(frozen=True)
class CombinedTables:
    theta_first: np.ndarray
    thetas: np.ndarray
    theta_last: np.ndarray


def build_data_tables(
    class_table: np.ndarray,
    beta_layer: int,
    beta_transition: int,
    n_boundaries: int,
) -> DataTables:
    """Appearance tables for one column from its (N, 2 N_b + 1) class table.

    Interior layer sums run over rows strictly between the two boundaries and
    are evaluated with prefix sums; the transition term attaches to the row
    of the upper boundary of the pair.
    """
    class_table = np.asarray(class_table, dtype=np.float64)
    n_classes = 2 * n_boundaries + 1
    if class_table.ndim != 2 or class_table.shape[1] != n_classes:
        raise ValueError(
            f"class table {class_table.shape} incompatible with "
            f"{n_boundaries} boundaries"
        )
    layer_logp = class_table[:, : n_boundaries + 1]
    transition_logp = class_table[:, n_boundaries + 1 :]
    psi_first, psis, psi_last = _kernels.psi_tables(
        layer_logp, transition_logp, float(beta_layer), float(beta_transition)
    )
    return DataTables(psi_first, psis, psi_last)


def shape_tables_from_context(
    coupling: PriorCoupling,
    j: int,
    n_rows: int,
    cond_means: np.ndarray,
    variances: np.ndarray,
) -> ShapeTables:
    """Shape tables for column j given precomputed q_b-dependent quantities.

    ``cond_means`` is the q_b-expectation of the conditional means,
    ``variances`` the quadratic forms gamma Sigma_bar gamma^T (both (N_b,)).
    """
    col = coupling.columns[j]
    omega_first, omegas = _kernels.omega_tables(
        n_rows,
        np.asarray(cond_means, dtype=np.float64),
        col.v,
        col.nb_intercept,
        col.nb_rho,
        col.nb_var,
    )
    const = (
        -0.5 * float(np.sum(np.log(2.0 * np.pi * col.v)))
        - 0.5 * float(np.sum(np.log(2.0 * np.pi * col.nb_var)))
        - float(np.sum(variances / (2.0 * col.v)))
    )
    return ShapeTables(omega_first, omegas, const, np.asarray(variances, dtype=float))


def build_shape_tables(
    prior: ShapePrior,
    qb: GaussianPosterior,
    j: int,
    n_rows: int,
    coupling: PriorCoupling | None = None,
) -> ShapeTables:
    """Shape tables for column j under the current q_b.

    Convenience wrapper that derives the coupling context from the prior;
    the inference loop builds the context once and reuses it.
    """
    if coupling is None:
        coupling = PriorCoupling(prior)
    cond_means = coupling.expected_cond_means(qb.mean)[j]
    variances = coupling.gamma_variances(qb.sigma)[j]
    return shape_tables_from_context(coupling, j, n_rows, cond_means, variances)


def uniform_shape_tables(coupling: PriorCoupling, j: int, n_rows: int) -> ShapeTables:
    """Initialization variant: global conditionals set to uniform.

    Only the neighbor term p(b_k | b_{k-1}) survives; omega_first is
    constant (zero) and the dropped constant omits the global factors.
    """
    col = coupling.columns[j]
    n_b = coupling.n_b
    omega_first = np.zeros(n_rows)
    rows = np.arange(1.0, n_rows + 1.0)
    omegas = np.full((max(n_b - 1, 0), n_rows, n_rows), NEG_INF)
    mask = rows[None, :] > rows[:, None]
    for k in range(1, n_b):
        mu_nb = col.nb_intercept[k - 1] + col.nb_rho[k - 1] * rows
        table = -((rows[None, :] - mu_nb[:, None]) ** 2) / (2.0 * col.nb_var[k - 1])
        omegas[k - 1] = np.where(mask, table, NEG_INF)
    const = -0.5 * float(np.sum(np.log(2.0 * np.pi * col.nb_var)))
    return ShapeTables(omega_first, omegas, const, np.zeros(n_b))


def combine(
    data: DataTables,
    shape: ShapeTables,
    sparsity_threshold: float = DEFAULT_SPARSITY_THRESHOLD,
) -> CombinedTables:
    """theta = psi + omega elementwise; -inf propagates.

    After combination, pairwise entries whose exponential falls below
    ``sparsity_threshold`` times the row maximum are treated as structural
    zeros (set to -inf), which the chain solver exploits; the marginals it
    returns are exact for the thresholded tables.
    """
    theta_first = data.psi_first + shape.omega_first
    theta_last = data.psi_last.copy()
    with np.errstate(invalid="ignore"):
        thetas = data.psis + shape.omegas
    # -inf + -inf stays -inf; nothing else can produce nan here
    if sparsity_threshold > 0.0 and thetas.size:
        cut = np.log(sparsity_threshold)
        row_max = np.max(thetas, axis=2, keepdims=True)
        with np.errstate(invalid="ignore"):
            mask = thetas < row_max + cut
        thetas = np.where(mask, NEG_INF, thetas)
    return CombinedTables(theta_first, thetas, theta_last)

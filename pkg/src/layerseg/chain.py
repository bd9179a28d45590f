"""Exact sum-product inference on the per-column boundary chains.

Each column is a chain over K = n_boundaries ordered discrete boundary rows
with node potential theta_first, pairwise potentials Theta_k (forbidden
n <= m cells at -inf) and node potential theta_last on the final boundary.
Forward-backward message passing in log-space (max-subtraction inside every
logsumexp) yields the exact singleton and pairwise marginals, which are the
global optimum of the convex per-column subproblem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tables import CombinedTables

NEG_INF = -np.inf


class InfeasibleColumnError(RuntimeError):
    def __init__(self, k: int, j: int):
        super().__init__(
            f"no feasible boundary configuration at boundary k={k}, column j={j}"
        )
        self.k = k
        self.j = j


@dataclass
class DiscretePosterior:
    """Chain marginals for every column.

    ``singles`` is (M, N_b, N); ``pairs`` is (M, N_b-1, N, N) supported on
    n > m. Log partition values per column in ``log_z``.
    """

    singles: np.ndarray
    pairs: np.ndarray
    log_z: np.ndarray

    @property
    def n_cols(self) -> int:
        return self.singles.shape[0]

    @property
    def n_boundaries(self) -> int:
        return self.singles.shape[1]

    @property
    def n_rows(self) -> int:
        return self.singles.shape[2]

    def expected_rows(self) -> np.ndarray:
        """(N_b, M) posterior means E[c_{k,j}] in 1-based row units."""
        rows = np.arange(1.0, self.n_rows + 1.0)
        return np.einsum("jkn,n->kj", self.singles, rows)

    def row_std(self) -> np.ndarray:
        rows = np.arange(1.0, self.n_rows + 1.0)
        first = np.einsum("jkn,n->jk", self.singles, rows)
        second = np.einsum("jkn,n->jk", self.singles, rows**2)
        return np.sqrt(np.maximum(second - first**2, 0.0)).T

    def marginalization_residual(self) -> float:
        """Worst inconsistency between pairwise tables and singletons."""
        if self.pairs.shape[1] == 0:
            return 0.0
        res = 0.0
        row_sums = self.pairs.sum(axis=3)  # (M, K-1, N) over n -> c_{k-1}
        col_sums = self.pairs.sum(axis=2)  # (M, K-1, N) over m -> c_k
        for k in range(1, self.n_boundaries):
            res = max(res, float(np.max(np.abs(row_sums[:, k - 1] - self.singles[:, k - 1]))))
            res = max(res, float(np.max(np.abs(col_sums[:, k - 1] - self.singles[:, k]))))
        return res


def _locate_infeasible_stage(tables: CombinedTables) -> int:
    """First 1-based boundary index whose forward message dies."""
    n = tables.theta_first.shape[0]
    reachable = np.isfinite(tables.theta_first)
    if tables.thetas.shape[0] == 0:
        reachable &= np.isfinite(tables.theta_last)
    if not reachable.any():
        return 1
    for k in range(tables.thetas.shape[0]):
        reachable = (reachable[:, None] & np.isfinite(tables.thetas[k])).any(axis=0)
        if k == tables.thetas.shape[0] - 1:
            reachable &= np.isfinite(tables.theta_last)
        if not reachable.any():
            return k + 2
    return tables.thetas.shape[0] + 1


def optimize_qc(columns: list[CombinedTables]) -> DiscretePosterior:
    """Exact chain marginals for every column's combined tables.

    Raises :class:`InfeasibleColumnError` naming (k, j) when a column admits
    no configuration with finite potential.
    """
    if not columns:
        raise ValueError("no columns")
    n = columns[0].theta_first.shape[0]
    n_b = columns[0].thetas.shape[0] + 1
    m_cols = len(columns)
    singles = np.empty((m_cols, n_b, n))
    pairs = np.empty((m_cols, max(n_b - 1, 0), n, n))
    log_z = np.empty(m_cols)
    for j, tab in enumerate(columns):
        lz, s, p = _kernels.chain_marginals(tab.theta_first, tab.thetas, tab.theta_last)
        if lz == NEG_INF or not np.isfinite(lz):
            raise InfeasibleColumnError(_locate_infeasible_stage(tab), j)
        singles[j] = s
        pairs[j] = p
        log_z[j] = lz
    return DiscretePosterior(singles, pairs, log_z)

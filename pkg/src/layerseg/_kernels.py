"""Hot numeric kernels with numba-accelerated and pure-numpy twins.

The inference inner loops (per-column chain message passing and shape-table
construction) dominate runtime. Each kernel exists twice: a ``*_numpy``
reference implementation and a numba ``@njit`` version compiled from the
same scalar logic. The active set is chosen once at import time:

* default: numba versions, when numba imports cleanly;
* ``LAYERSEG_NO_NUMBA=1`` in the environment forces the numpy path.

``benchmarks/bench_kernels.py`` times both paths against each other.
"""

from __future__ import annotations

import os

import numpy as np

NEG_INF = -np.inf

_env = os.environ.get("LAYERSEG_NO_NUMBA", "").strip().lower()
_numba_disabled = _env in {"1", "true", "yes"}

try:  # pragma: no cover - exercised implicitly at import
    if _numba_disabled:
        raise ImportError("numba disabled via LAYERSEG_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # fallback decorator keeps the numba source importable
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# chain forward-backward (sum-product) marginals
# ---------------------------------------------------------------------------


def _logsumexp_1d(v):
    m = np.max(v)
    if m == NEG_INF:
        return NEG_INF
    return m + np.log(np.sum(np.exp(v - m)))


def chain_marginals_numpy(theta_first, thetas, theta_last):
    """Exact singleton/pairwise marginals of a K-node chain in log-space.

    The chain distribution is proportional to
    ``exp(theta_first[c1] + sum_k thetas[k-2][c_{k-1}, c_k] + theta_last[cK])``
    with forbidden transitions encoded as ``-inf`` table entries.

    Returns ``(logZ, singles (K, N), pairs (K-1, N, N))`` where the outputs
    are probabilities (not logs). Raises no errors itself; an all-``-inf``
    forward message is signalled by returning ``logZ = -inf`` (callers
    translate that into an infeasibility error with context).
    """
    K = thetas.shape[0] + 1
    N = theta_first.shape[0]
    phi = np.zeros((K, N))
    phi[0] = theta_first
    phi[K - 1] += theta_last

    fwd = np.full((K, N), NEG_INF)
    fwd[0] = phi[0]
    for k in range(1, K):
        # logsumexp over m of fwd[k-1][m] + thetas[k-1][m, n]
        acc = fwd[k - 1][:, None] + thetas[k - 1]
        m = np.max(acc, axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(
                m == NEG_INF,
                NEG_INF,
                m + np.log(np.sum(np.exp(acc - np.where(m == NEG_INF, 0.0, m)), axis=0)),
            )
        fwd[k] = phi[k] + s
        if np.max(fwd[k]) == NEG_INF:
            return NEG_INF, np.zeros((K, N)), np.zeros((max(K - 1, 0), N, N))

    bwd = np.full((K, N), NEG_INF)
    bwd[K - 1] = 0.0
    for k in range(K - 2, -1, -1):
        acc = thetas[k] + (phi[k + 1] + bwd[k + 1])[None, :]
        m = np.max(acc, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(
                m == NEG_INF,
                NEG_INF,
                m + np.log(np.sum(np.exp(acc - np.where(m == NEG_INF, 0.0, m)[:, None]), axis=1)),
            )
        bwd[k] = s

    log_z = _logsumexp_1d(fwd[K - 1])
    singles = np.exp(fwd + bwd - log_z)
    pairs = np.zeros((K - 1, N, N))
    for k in range(1, K):
        lp = fwd[k - 1][:, None] + thetas[k - 1] + (phi[k] + bwd[k])[None, :] - log_z
        pairs[k - 1] = np.exp(lp)
    return log_z, singles, pairs


@njit(cache=True, nogil=True)
def _chain_marginals_numba(theta_first, thetas, theta_last):  # pragma: no cover
    K = thetas.shape[0] + 1
    N = theta_first.shape[0]
    phi = np.zeros((K, N))
    for n in range(N):
        phi[0, n] = theta_first[n]
        phi[K - 1, n] += theta_last[n]

    fwd = np.full((K, N), NEG_INF)
    for n in range(N):
        fwd[0, n] = phi[0, n]
    for k in range(1, K):
        feasible = False
        for n in range(N):
            mx = NEG_INF
            for m in range(N):
                v = fwd[k - 1, m] + thetas[k - 1, m, n]
                if v > mx:
                    mx = v
            if mx == NEG_INF:
                fwd[k, n] = NEG_INF
                continue
            s = 0.0
            for m in range(N):
                v = fwd[k - 1, m] + thetas[k - 1, m, n]
                if v != NEG_INF:
                    s += np.exp(v - mx)
            fwd[k, n] = phi[k, n] + mx + np.log(s)
            if fwd[k, n] != NEG_INF:
                feasible = True
        if not feasible:
            return NEG_INF, np.zeros((K, N)), np.zeros((K - 1, N, N))

    bwd = np.full((K, N), NEG_INF)
    for n in range(N):
        bwd[K - 1, n] = 0.0
    for k in range(K - 2, -1, -1):
        for m in range(N):
            mx = NEG_INF
            for n in range(N):
                v = thetas[k, m, n] + phi[k + 1, n] + bwd[k + 1, n]
                if v > mx:
                    mx = v
            if mx == NEG_INF:
                bwd[k, m] = NEG_INF
                continue
            s = 0.0
            for n in range(N):
                v = thetas[k, m, n] + phi[k + 1, n] + bwd[k + 1, n]
                if v != NEG_INF:
                    s += np.exp(v - mx)
            bwd[k, m] = mx + np.log(s)

    mx = NEG_INF
    for n in range(N):
        if fwd[K - 1, n] > mx:
            mx = fwd[K - 1, n]
    s = 0.0
    for n in range(N):
        if fwd[K - 1, n] != NEG_INF:
            s += np.exp(fwd[K - 1, n] - mx)
    log_z = mx + np.log(s)

    singles = np.zeros((K, N))
    for k in range(K):
        for n in range(N):
            v = fwd[k, n] + bwd[k, n]
            if v != NEG_INF:
                singles[k, n] = np.exp(v - log_z)
    pairs = np.zeros((K - 1, N, N))
    for k in range(1, K):
        for m in range(N):
            if fwd[k - 1, m] == NEG_INF:
                continue
            for n in range(N):
                v = fwd[k - 1, m] + thetas[k - 1, m, n] + phi[k, n] + bwd[k, n]
                if v != NEG_INF:
                    pairs[k - 1, m, n] = np.exp(v - log_z)
    return log_z, singles, pairs


def chain_marginals_numba(theta_first, thetas, theta_last):
    return _chain_marginals_numba(
        np.ascontiguousarray(theta_first),
        np.ascontiguousarray(thetas),
        np.ascontiguousarray(theta_last),
    )


# ---------------------------------------------------------------------------
# shape regularizer tables
# ---------------------------------------------------------------------------


def omega_tables_numpy(n_rows, cond_means, cond_vars, nb_mean, nb_rho, nb_var):
    """Shape tables for one column, entry-constant terms dropped.

    ``cond_means[k]``/``cond_vars[k]`` are the posterior-expected mean and
    (inflated) variance of the column-conditional marginal for boundary k;
    ``nb_mean``/``nb_rho``/``nb_var`` parameterize the neighbor conditional
    of boundary k given boundary k-1 (entries k-1 of each array, k >= 2).

    omega_first[n] = -(r_n - cond_means[0])^2 / (2 cond_vars[0])
    Omega[k-2, m, n] = -(r_n - cond_means[k-1])^2 / (2 cond_vars[k-1])
                       -(r_n - nb_mean[k-2] - nb_rho[k-2] r_m)^2 / (2 nb_var[k-2])
                       for n > m, else -inf

    where r_i = i + 1 converts 0-based indices to 1-based row values and
    ``nb_mean`` is the neighbor-conditional intercept (prior means folded in
    by the caller, so the conditional mean is ``nb_mean + nb_rho * r_m``).
    """
    K = cond_means.shape[0]
    rows = np.arange(1.0, n_rows + 1.0)
    omega_first = -((rows - cond_means[0]) ** 2) / (2.0 * cond_vars[0])
    omegas = np.full((max(K - 1, 0), n_rows, n_rows), NEG_INF)
    for k in range(1, K):
        global_term = -((rows - cond_means[k]) ** 2) / (2.0 * cond_vars[k])
        mu_nb = nb_mean[k - 1] + nb_rho[k - 1] * rows  # indexed by m
        nb_term = -((rows[None, :] - mu_nb[:, None]) ** 2) / (2.0 * nb_var[k - 1])
        table = global_term[None, :] + nb_term
        mask = rows[None, :] > rows[:, None]
        omegas[k - 1] = np.where(mask, table, NEG_INF)
    return omega_first, omegas


@njit(cache=True, nogil=True)
def _omega_tables_numba(n_rows, cond_means, cond_vars, nb_mean, nb_rho, nb_var):  # pragma: no cover
    K = cond_means.shape[0]
    omega_first = np.empty(n_rows)
    for n in range(n_rows):
        d = (n + 1.0) - cond_means[0]
        omega_first[n] = -(d * d) / (2.0 * cond_vars[0])
    n_pairs = K - 1 if K > 1 else 0
    omegas = np.full((n_pairs, n_rows, n_rows), NEG_INF)
    for k in range(1, K):
        for m in range(n_rows):
            mu_nb = nb_mean[k - 1] + nb_rho[k - 1] * (m + 1.0)
            for n in range(m + 1, n_rows):
                dg = (n + 1.0) - cond_means[k]
                dn = (n + 1.0) - mu_nb
                omegas[k - 1, m, n] = -(dg * dg) / (2.0 * cond_vars[k]) - (dn * dn) / (
                    2.0 * nb_var[k - 1]
                )
    return omega_first, omegas


def omega_tables_numba(n_rows, cond_means, cond_vars, nb_mean, nb_rho, nb_var):
    return _omega_tables_numba(
        n_rows,
        np.ascontiguousarray(cond_means),
        np.ascontiguousarray(cond_vars),
        np.ascontiguousarray(nb_mean),
        np.ascontiguousarray(nb_rho),
        np.ascontiguousarray(nb_var),
    )


# ---------------------------------------------------------------------------
# data (appearance) tables
# ---------------------------------------------------------------------------


def psi_tables_numpy(layer_logp, transition_logp, beta_layer, beta_transition):
    """Per-column appearance tables from class log-probability columns.

    ``layer_logp`` is (N, N_b+1) with column k-1 holding log p(layer k at row),
    ``transition_logp`` is (N, N_b). Interior sums use prefix sums so each
    N x N table costs O(N^2).
    """
    n_rows, n_layers = layer_logp.shape
    n_b = transition_logp.shape[1]
    cum = np.cumsum(layer_logp, axis=0)  # cum[i, k] = sum of rows 0..i

    psi_first = beta_transition * transition_logp[:, 0].astype(float).copy()
    if beta_layer:
        above = np.concatenate(([0.0], cum[:-1, 0]))  # rows strictly above n
        psi_first = psi_first + beta_layer * above

    psis = np.full((max(n_b - 1, 0), n_rows, n_rows), NEG_INF)
    rows = np.arange(n_rows)
    mask = rows[None, :] > rows[:, None]
    for k in range(2, n_b + 1):
        table = np.zeros((n_rows, n_rows))
        if beta_layer:
            ck = cum[:, k - 1]
            upper = np.concatenate(([0.0], ck[:-1]))  # cum through row n-1
            table = beta_layer * (upper[None, :] - ck[:, None])
        table = table + beta_transition * transition_logp[:, k - 1][None, :]
        psis[k - 2] = np.where(mask, table, NEG_INF)

    last = layer_logp[:, n_layers - 1]
    total = np.sum(last)
    psi_last = beta_layer * (total - np.cumsum(last))
    return psi_first, psis, psi_last


@njit(cache=True, nogil=True)
def _psi_tables_numba(layer_logp, transition_logp, beta_layer, beta_transition):  # pragma: no cover
    n_rows, n_layers = layer_logp.shape
    n_b = transition_logp.shape[1]
    cum = np.empty((n_rows, n_layers))
    for k in range(n_layers):
        acc = 0.0
        for i in range(n_rows):
            acc += layer_logp[i, k]
            cum[i, k] = acc

    psi_first = np.empty(n_rows)
    for n in range(n_rows):
        v = beta_transition * transition_logp[n, 0]
        if n > 0:
            v += beta_layer * cum[n - 1, 0]
        psi_first[n] = v

    n_pairs = n_b - 1 if n_b > 1 else 0
    psis = np.full((n_pairs, n_rows, n_rows), NEG_INF)
    for k in range(2, n_b + 1):
        for m in range(n_rows):
            for n in range(m + 1, n_rows):
                interior = cum[n - 1, k - 1] - cum[m, k - 1]
                psis[k - 2, m, n] = (
                    beta_layer * interior + beta_transition * transition_logp[n, k - 1]
                )

    psi_last = np.empty(n_rows)
    total = cum[n_rows - 1, n_layers - 1]
    for n in range(n_rows):
        psi_last[n] = beta_layer * (total - cum[n, n_layers - 1])
    return psi_first, psis, psi_last


def psi_tables_numba(layer_logp, transition_logp, beta_layer, beta_transition):
    return _psi_tables_numba(
        np.ascontiguousarray(layer_logp, dtype=np.float64),
        np.ascontiguousarray(transition_logp, dtype=np.float64),
        float(beta_layer),
        float(beta_transition),
    )


if HAVE_NUMBA:
    chain_marginals = chain_marginals_numba
    omega_tables = omega_tables_numba
    psi_tables = psi_tables_numba
else:
    chain_marginals = chain_marginals_numpy
    omega_tables = omega_tables_numpy
    psi_tables = psi_tables_numpy

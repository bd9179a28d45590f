import numpy as np
import pytest

from layerseg.geometry import BoundaryField, GeometryError, ScanGeometry
from layerseg.lowrank import LowRankGaussian, conditional as lowrank_conditional
from layerseg.shape import ShapePrior, fit_ppca
from layerseg import io as lio

from oracles import dense_conditional


def make_fields(n_fields, n_b=2, m_cols=4, seed=0, rank=2, noise=0.1):
    """Ordered boundary fields from a known low-rank generative model."""
    rng = np.random.default_rng(seed)
    geom = ScanGeometry(30, m_cols, n_b)
    base = np.linspace(8.0, 22.0, n_b)[:, None] * np.ones((1, m_cols))
    w = rng.standard_normal((n_b * m_cols, rank)) * 0.4
    fields = []
    for _ in range(n_fields):
        latent = rng.standard_normal(rank)
        eps = rng.standard_normal(n_b * m_cols) * noise
        flat = base.flatten(order="F") + w @ latent + eps
        vals = flat.reshape((n_b, m_cols), order="F")
        vals = np.sort(vals, axis=0)  # keep strict ordering in rare flips
        fields.append(BoundaryField(vals, geom))
    return fields


class TestFitPpca:
    def test_rank_q_data_reproduces_covariance(self):
        rng = np.random.default_rng(1)
        geom = ScanGeometry(40, 3, 2)
        dim = geom.boundary_dim
        w_true = rng.standard_normal((dim, 2))
        base = np.array([10.0, 25.0])[:, None] * np.ones((1, 3))
        fields = []
        for _ in range(50):
            flat = base.flatten(order="F") + w_true @ rng.standard_normal(2)
            fields.append(BoundaryField(flat.reshape((2, 3), order="F"), geom))
        prior = fit_ppca(fields, q_ppca=2)
        data = np.stack([f.flat() for f in fields])
        emp = np.cov(data, rowvar=False, ddof=1)
        model_cov = prior.gaussian.dense_cov()
        assert np.linalg.norm(model_cov - emp) < 1e-8

    def test_identical_fields_degenerate(self):
        geom = ScanGeometry(20, 3, 2)
        vals = np.array([[5.0, 5.5, 6.0], [12.0, 12.5, 13.0]])
        fields = [BoundaryField(vals, geom) for _ in range(4)]
        with pytest.warns(UserWarning):
            prior = fit_ppca(fields, q_ppca=2)
        assert prior.gaussian.noise_variance == pytest.approx(1e-12)
        assert np.all(prior.gaussian.factors == 0.0)
        assert np.allclose(prior.gaussian.mean, vals.flatten(order="F"))

    def test_heldout_loglik_matches_dense(self):
        fields = make_fields(40, seed=3)
        prior = fit_ppca(fields, q_ppca=2)
        held = make_fields(1, seed=999)[0]
        from scipy.stats import multivariate_normal

        ref = multivariate_normal(
            prior.gaussian.mean, prior.gaussian.dense_cov()
        ).logpdf(held.flat())
        assert prior.gaussian.logpdf(held.flat()) == pytest.approx(ref, rel=1e-8)

    def test_permutation_invariance(self):
        fields = make_fields(12, seed=4)
        p1 = fit_ppca(fields, q_ppca=2)
        p2 = fit_ppca(fields[::-1], q_ppca=2)
        assert np.allclose(p1.gaussian.mean, p2.gaussian.mean)
        assert np.allclose(p1.gaussian.dense_cov(), p2.gaussian.dense_cov(), atol=1e-10)

    def test_truncation_warning(self):
        fields = make_fields(4, seed=5)  # rank at most 3
        with pytest.warns(UserWarning, match="truncated"):
            prior = fit_ppca(fields, q_ppca=6)
        assert prior.gaussian.rank <= 3
        assert prior.fit_warnings

    def test_rejects_unordered_training(self):
        geom = ScanGeometry(20, 2, 2)
        bad = BoundaryField(np.array([[10.0, 10.0], [5.0, 12.0]]), geom)
        ok = BoundaryField(np.array([[4.0, 4.0], [9.0, 9.0]]), geom)
        with pytest.raises(GeometryError):
            fit_ppca([ok, bad], q_ppca=1)

    def test_rejects_inconsistent_geometry(self):
        f1 = make_fields(2, m_cols=4, seed=6)
        f2 = make_fields(2, m_cols=5, seed=7)
        with pytest.raises(GeometryError):
            fit_ppca([f1[0], f2[0]], q_ppca=1)

    def test_refit_closure_recovers_mean(self):
        fields = make_fields(60, seed=8)
        prior = fit_ppca(fields, q_ppca=2, variance_inflation=1.0)
        from layerseg.lowrank import sample

        draws = sample(prior.gaussian, 500, rng_seed=11)
        geom = fields[0].geometry
        refit_fields = []
        for row in draws:
            vals = np.sort(row.reshape((geom.n_boundaries, geom.n_cols), order="F"), axis=0)
            refit_fields.append(BoundaryField(vals, geom))
        refit = fit_ppca(refit_fields, q_ppca=2)
        sd = np.sqrt(np.diag(prior.gaussian.dense_cov()) / 500)
        assert np.all(np.abs(refit.gaussian.mean - prior.gaussian.mean) < 3.5 * sd)


class TestColumnConditional:
    def test_single_column_is_unconditional_marginal(self):
        fields = make_fields(10, m_cols=1, seed=9)
        prior = fit_ppca(fields, q_ppca=1, variance_inflation=1.0)
        cond = prior.column_conditional(0, np.zeros(0))
        assert np.allclose(cond.mean, prior.gaussian.mean)
        assert np.allclose(cond.cov, prior.gaussian.dense_cov(), atol=1e-10)

    def test_matches_lowrank_conditional(self):
        fields = make_fields(30, seed=10)
        prior = fit_ppca(fields, q_ppca=2, variance_inflation=1.0)
        g = prior.gaussian
        j = 1
        cols = prior.column_indices(j)
        rest = np.setdiff1d(np.arange(g.dim), cols)
        b_rest = g.mean[rest] + 0.2
        mine = prior.column_conditional(j, b_rest)
        ref = lowrank_conditional(g, rest, b_rest)
        assert np.allclose(mine.mean, ref.mean, atol=1e-10)
        assert np.allclose(mine.cov, ref.cov, atol=1e-10)

    def test_inflation_scales_covariance_only(self):
        fields = make_fields(30, seed=12)
        p1 = fit_ppca(fields, q_ppca=2, variance_inflation=1.0)
        p10 = fit_ppca(fields, q_ppca=2, variance_inflation=10.0)
        g = p1.gaussian
        rest = np.setdiff1d(np.arange(g.dim), p1.column_indices(0))
        b_rest = g.mean[rest] - 0.3
        c1 = p1.column_conditional(0, b_rest)
        c10 = p10.column_conditional(0, b_rest)
        assert np.allclose(c1.mean, c10.mean)
        assert np.allclose(10.0 * c1.cov, c10.cov)

    def test_conditional_cov_independent_of_values(self):
        fields = make_fields(30, seed=13)
        prior = fit_ppca(fields, q_ppca=2)
        g = prior.gaussian
        rest_size = g.dim - prior.geometry.n_boundaries
        rng = np.random.default_rng(0)
        covs = [
            prior.column_conditional(2, rng.standard_normal(rest_size) * 5).cov
            for _ in range(3)
        ]
        assert np.max(np.abs(covs[0] - covs[1])) < 1e-12
        assert np.max(np.abs(covs[0] - covs[2])) < 1e-12

    def test_against_dense_schur_oracle(self):
        fields = make_fields(30, seed=14)
        prior = fit_ppca(fields, q_ppca=2, variance_inflation=1.0)
        g = prior.gaussian
        cols = prior.column_indices(2)
        rest = np.setdiff1d(np.arange(g.dim), cols)
        b_rest = g.mean[rest] + np.random.default_rng(1).standard_normal(rest.size)
        m0, c0 = dense_conditional(g.mean, g.dense_cov(), rest, b_rest)
        mine = prior.column_conditional(2, b_rest)
        assert np.allclose(mine.mean, m0, atol=1e-9)
        assert np.allclose(mine.cov, c0, atol=1e-9)


class TestNeighborConditionalWrapper:
    def test_k_range_validation(self):
        fields = make_fields(10, seed=15)
        prior = fit_ppca(fields, q_ppca=2)
        with pytest.raises(ValueError):
            prior.neighbor_conditional(1, 0, 5.0)
        with pytest.raises(ValueError):
            prior.neighbor_conditional(3, 0, 5.0)
        nb = prior.neighbor_conditional(2, 1, 9.0)
        assert nb.variance > 0


class TestSaveLoad:
    def test_round_trip_bit_exact(self, tmp_path):
        fields = make_fields(25, seed=16)
        prior = fit_ppca(fields, q_ppca=2, variance_inflation=10.0)
        path = tmp_path / "prior.lsm"
        lio.save_shape_prior(prior, path)
        loaded = lio.load_shape_prior(path)
        assert np.array_equal(loaded.gaussian.mean, prior.gaussian.mean)
        assert np.array_equal(loaded.gaussian.factors, prior.gaussian.factors)
        assert loaded.gaussian.noise_variance == prior.gaussian.noise_variance
        assert loaded.variance_inflation == prior.variance_inflation
        assert loaded.geometry == prior.geometry
        # save -> load -> save: identical bytes
        path2 = tmp_path / "prior2.lsm"
        lio.save_shape_prior(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_file_rejected(self, tmp_path):
        fields = make_fields(10, seed=17)
        prior = fit_ppca(fields, q_ppca=2)
        path = tmp_path / "prior.lsm"
        lio.save_shape_prior(prior, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(lio.FormatError, match="truncated"):
            lio.load_shape_prior(path)

    def test_version_mismatch_names_both(self, tmp_path):
        fields = make_fields(10, seed=18)
        prior = fit_ppca(fields, q_ppca=2)
        path = tmp_path / "prior.lsm"
        lio.save_shape_prior(prior, path)
        blob = bytearray(path.read_bytes())
        blob[8] = 99  # version little-endian u32 starts after the 8-byte magic
        path.write_bytes(bytes(blob))
        with pytest.raises(lio.FormatError) as exc:
            lio.load_shape_prior(path)
        assert "99" in str(exc.value) and "1" in str(exc.value)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.lsm"
        path.write_bytes(b"NOTMODEL" + b"\x00" * 64)
        with pytest.raises(lio.FormatError, match="magic"):
            lio.load_shape_prior(path)

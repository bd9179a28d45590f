"""Patch-based appearance models for layer and transition classes.

Every pixel class (one per tissue layer, one per boundary transition) gets a
Gaussian over mean-subtracted patches projected to a PCA subspace, with a
graphical-lasso precision. Tables of per-pixel log class probabilities come
in two flavors: generative (raw Gaussian log-densities) and discriminative
(renormalized per pixel over *all* classes with a uniform class prior, so
switched-off classes still shape the normalization).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import BoundaryField, GeometryError, Scan, ScanGeometry
from .glasso import graphical_lasso

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ClassLabel:
    kind: str  # "layer" | "transition"
    index: int  # 1-based; layers 1..N_b+1, transitions 1..N_b

    def __post_init__(self):
        if self.kind not in ("layer", "transition"):
            raise ValueError(f"unknown class kind {self.kind!r}")
        if self.index < 1:
            raise ValueError("class index is 1-based")


def class_labels(n_boundaries: int) -> list[ClassLabel]:
    """Canonical class order: layers 1..N_b+1 then transitions 1..N_b."""
    layers = [ClassLabel("layer", k) for k in range(1, n_boundaries + 2)]
    transitions = [ClassLabel("transition", k) for k in range(1, n_boundaries + 1)]
    return layers + transitions


def class_column(label: ClassLabel, n_boundaries: int) -> int:
    if label.kind == "layer":
        if label.index > n_boundaries + 1:
            raise ValueError(f"layer index {label.index} > {n_boundaries + 1}")
        return label.index - 1
    if label.index > n_boundaries:
        raise ValueError(f"transition index {label.index} > {n_boundaries}")
    return n_boundaries + label.index


class PatchProjector:
    """Mean-subtract-then-project patch featurizer with an orthonormal basis."""

    def __init__(self, patch_size, basis, eigenvalues=None):
        h, w = int(patch_size[0]), int(patch_size[1])
        if h % 2 == 0 or w % 2 == 0 or h < 1 or w < 1:
            raise ValueError(f"patch size must be odd, got {h}x{w}")
        basis = np.asarray(basis, dtype=np.float64)
        if basis.shape[0] != h * w:
            raise ValueError(f"basis rows {basis.shape[0]} != patch pixels {h * w}")
        gram = basis.T @ basis
        if not np.allclose(gram, np.eye(basis.shape[1]), atol=1e-10):
            raise ValueError("basis columns must be orthonormal")
        self.patch_size = (h, w)
        self.basis = basis
        self.eigenvalues = (
            None if eigenvalues is None else np.asarray(eigenvalues, dtype=np.float64)
        )

    @property
    def q_pca(self) -> int:
        return self.basis.shape[1]

    def pad(self, pixels: np.ndarray) -> np.ndarray:
        h, w = self.patch_size
        return np.pad(pixels, ((h // 2, h // 2), (w // 2, w // 2)), mode="reflect")

    def raw_patch(self, scan: Scan, i: int, j: int) -> np.ndarray:
        """Mean-subtracted patch centered at array pixel (i, j), not projected."""
        h, w = self.patch_size
        padded = self.pad(np.asarray(scan.pixels, dtype=np.float64))
        patch = padded[i : i + h, j : j + w].ravel()
        return patch - patch.mean()

    def project(self, flat_patches: np.ndarray) -> np.ndarray:
        flat = np.asarray(flat_patches, dtype=np.float64)
        centered = flat - flat.mean(axis=-1, keepdims=True)
        return centered @ self.basis

    def column_features(self, scan: Scan, j: int, padded=None) -> np.ndarray:
        """(N, q_pca) features for every pixel of column j."""
        h, w = self.patch_size
        if padded is None:
            padded = self.pad(np.asarray(scan.pixels, dtype=np.float64))
        block = padded[:, j : j + w]  # (N + h - 1, w)
        windows = np.lib.stride_tricks.sliding_window_view(block, (h, w))[:, 0]
        return self.project(windows.reshape(windows.shape[0], h * w))


def extract_patch(projector: PatchProjector, scan: Scan, i: int, j: int) -> np.ndarray:
    """Projected feature vector of the patch centered at array pixel (i, j)."""
    return projector.project(projector.raw_patch(scan, i, j))


def fit_projector(
    scans: list[Scan],
    n_samples: int,
    patch_size=(15, 15),
    q_pca: int = 20,
    rng_seed=0,
) -> PatchProjector:
    """PCA basis from randomly drawn, mean-subtracted patches."""
    if n_samples < q_pca:
        raise ValueError(f"need n_samples >= q_pca ({n_samples} < {q_pca})")
    h, w = patch_size
    rng = np.random.default_rng(rng_seed)
    flat = np.empty((n_samples, h * w))
    padded = [None] * len(scans)
    scan_ids = rng.integers(0, len(scans), size=n_samples)
    for s in range(n_samples):
        scan = scans[scan_ids[s]]
        if padded[scan_ids[s]] is None:
            padded[scan_ids[s]] = np.pad(
                np.asarray(scan.pixels, dtype=np.float64),
                ((h // 2, h // 2), (w // 2, w // 2)),
                mode="reflect",
            )
        pad_px = padded[scan_ids[s]]
        i = rng.integers(0, scan.geometry.n_rows)
        j = rng.integers(0, scan.geometry.n_cols)
        patch = pad_px[i : i + h, j : j + w].ravel()
        flat[s] = patch - patch.mean()
    cov = np.cov(flat, rowvar=False, ddof=1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:q_pca]
    return PatchProjector(patch_size, evecs[:, order], eigenvalues=evals[order])


class AppearanceModel:
    """Per-class patch Gaussians behind one projector."""

    def __init__(
        self,
        projector: PatchProjector,
        n_boundaries: int,
        means: np.ndarray,
        precisions: list,
        alpha_glasso: float,
        beta_layer: int,
        beta_transition: int,
        mode: str,
    ):
        n_classes = 2 * n_boundaries + 1
        if mode not in ("generative", "discriminative"):
            raise ValueError(f"unknown appearance mode {mode!r}")
        means = np.asarray(means, dtype=np.float64)
        if means.shape != (n_classes, projector.q_pca):
            raise ValueError(f"means shape {means.shape}")
        if len(precisions) != n_classes:
            raise ValueError("one precision per class required")
        self.projector = projector
        self.n_boundaries = n_boundaries
        self.means = means
        self.precisions = [sp.csr_matrix(k) for k in precisions]
        self.alpha_glasso = float(alpha_glasso)
        self.beta_layer = int(beta_layer)
        self.beta_transition = int(beta_transition)
        self.mode = mode
        self._dense_k = np.stack([k.toarray() for k in self.precisions])
        self.logdets = np.empty(n_classes)
        for c, k in enumerate(self._dense_k):
            sign, logdet = np.linalg.slogdet(k)
            if sign <= 0:
                raise ValueError(f"class {c} precision not positive definite")
            self.logdets[c] = logdet

    @property
    def n_classes(self) -> int:
        return 2 * self.n_boundaries + 1

    def labels(self) -> list[ClassLabel]:
        return class_labels(self.n_boundaries)

    def feature_loglik(self, features: np.ndarray) -> np.ndarray:
        """(..., n_classes) Gaussian log-densities of projected features."""
        feats = np.asarray(features, dtype=np.float64)
        squeeze = feats.ndim == 1
        feats = np.atleast_2d(feats)
        out = np.empty((feats.shape[0], self.n_classes))
        q = self.projector.q_pca
        for c in range(self.n_classes):
            d = feats - self.means[c]
            quad = np.einsum("nq,qr,nr->n", d, self._dense_k[c], d)
            out[:, c] = 0.5 * (self.logdets[c] - q * LOG_2PI) - 0.5 * quad
        return out[0] if squeeze else out

    def class_loglik(self, scan: Scan, i: int, j: int, label: ClassLabel) -> float:
        feats = extract_patch(self.projector, scan, i, j)
        col = class_column(label, self.n_boundaries)
        return float(self.feature_loglik(feats)[col])

    def column_class_table(self, scan: Scan, j: int, padded=None) -> np.ndarray:
        """(N, n_classes) log probabilities for one column.

        Generative mode returns raw log-densities for every class (switch
        filtering happens in the regularizer); discriminative mode subtracts
        the per-pixel log normalizer over all classes (uniform class prior).
        """
        feats = self.projector.column_features(scan, j, padded=padded)
        table = self.feature_loglik(feats)
        if self.mode == "discriminative":
            mx = table.max(axis=1, keepdims=True)
            table = table - (mx + np.log(np.sum(np.exp(table - mx), axis=1, keepdims=True)))
        return table

    def scan_class_tables(self, scan: Scan) -> np.ndarray:
        """(M, N, n_classes) tables for all columns, sharing one padded image."""
        padded = self.projector.pad(np.asarray(scan.pixels, dtype=np.float64))
        return np.stack(
            [
                self.column_class_table(scan, j, padded=padded)
                for j in range(scan.geometry.n_cols)
            ]
        )


def _sample_class_patches(
    scans, truths, label, n_patches, projector, rng
) -> np.ndarray:
    """Draw projected patches whose center pixel belongs to ``label``."""
    feats = np.empty((n_patches, projector.q_pca))
    padded = {}
    count = 0
    attempts = 0
    max_attempts = 200 * n_patches
    h, w = projector.patch_size
    while count < n_patches:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(
                f"could not sample {n_patches} patches for class {label}: "
                "layers too thin for the requested geometry?"
            )
        s = int(rng.integers(0, len(scans)))
        scan, truth = scans[s], truths[s]
        n_rows = scan.geometry.n_rows
        j = int(rng.integers(0, scan.geometry.n_cols))
        rounded = np.rint(truth.values[:, j]).astype(int)  # 1-based row values
        if label.kind == "transition":
            row_value = rounded[label.index - 1]
        else:
            lo = 1 if label.index == 1 else rounded[label.index - 2] + 1
            hi = n_rows if label.index == truth.values.shape[0] + 1 else rounded[
                label.index - 1
            ] - 1
            if hi < lo:
                continue
            row_value = int(rng.integers(lo, hi + 1))
        if row_value < 1 or row_value > n_rows:
            continue
        if s not in padded:
            padded[s] = projector.pad(np.asarray(scan.pixels, dtype=np.float64))
        i = row_value - 1
        patch = padded[s][i : i + h, j : j + w].ravel()
        feats[count] = projector.project(patch)
        count += 1
    return feats


def fit_appearance(
    scans: list[Scan],
    truths: list[BoundaryField],
    projector: PatchProjector,
    alpha_glasso: float = 0.01,
    patches_per_class: int = 2000,
    beta_layer: int = 0,
    beta_transition: int = 1,
    mode: str = "discriminative",
    rng_seed=0,
    glasso_tol: float = 1e-5,
    glasso_max_iter: int = 200,
    cov_ridge: float = 1e-9,
) -> AppearanceModel:
    """Learn per-class Gaussians from labeled scans.

    Transition patches are centered on the rounded ground-truth boundary
    rows; layer patches are drawn uniformly from rows strictly between the
    adjacent boundaries. ``cov_ridge`` scales a diagonal guard added to each
    class covariance before the graphical lasso (relative to its mean
    variance) so near-degenerate classes stay tractable.
    """
    if len(scans) != len(truths) or not scans:
        raise ValueError("need matching non-empty scan/truth lists")
    n_boundaries = truths[0].values.shape[0]
    rng = np.random.default_rng(rng_seed)
    means = []
    precisions = []
    for label in class_labels(n_boundaries):
        feats = _sample_class_patches(
            scans, truths, label, patches_per_class, projector, rng
        )
        mu = feats.mean(axis=0)
        cov = np.cov(feats, rowvar=False, ddof=1)
        cov = cov + cov_ridge * max(np.mean(np.diag(cov)), 1e-30) * np.eye(cov.shape[0])
        k_mat = graphical_lasso(cov, alpha_glasso, tol=glasso_tol, max_iter=glasso_max_iter)
        means.append(mu)
        precisions.append(sp.csr_matrix(k_mat))
    return AppearanceModel(
        projector=projector,
        n_boundaries=n_boundaries,
        means=np.stack(means),
        precisions=precisions,
        alpha_glasso=alpha_glasso,
        beta_layer=beta_layer,
        beta_transition=beta_transition,
        mode=mode,
    )


class AppearanceModelSet:
    """One appearance model per B-scan (or one shared for all of them)."""

    def __init__(self, models: list[AppearanceModel], cols_per_bscan: int, shared: bool):
        if not models:
            raise ValueError("empty model set")
        self.models = models
        self.cols_per_bscan = int(cols_per_bscan)
        self.shared = bool(shared)

    def model_for_column(self, j: int) -> AppearanceModel:
        if self.shared:
            return self.models[0]
        return self.models[j // self.cols_per_bscan]

    def scan_class_tables(self, scan: Scan) -> np.ndarray:
        if self.shared or len(self.models) == 1:
            return self.models[0].scan_class_tables(scan)
        padded = self.models[0].projector.pad(np.asarray(scan.pixels, dtype=np.float64))
        tables = [
            self.model_for_column(j).column_class_table(scan, j, padded=padded)
            for j in range(scan.geometry.n_cols)
        ]
        return np.stack(tables)


def fit_appearance_set(
    scans: list[Scan],
    truths: list[BoundaryField],
    projector: PatchProjector,
    shared: bool = True,
    **kwargs,
) -> AppearanceModelSet:
    """Fit per-B-scan models, or one shared model when ``shared`` is set."""
    geometry = scans[0].geometry
    if shared or geometry.n_bscans == 1:
        model = fit_appearance(scans, truths, projector, **kwargs)
        return AppearanceModelSet([model], geometry.cols_per_bscan, shared=True)
    if geometry.n_cols % geometry.n_bscans:
        raise GeometryError("columns not divisible into B-scans")
    cols = geometry.cols_per_bscan
    models = []
    for b in range(geometry.n_bscans):
        sl = slice(b * cols, (b + 1) * cols)
        sub_geom = ScanGeometry(
            geometry.n_rows, cols, geometry.n_boundaries, 1, geometry.pixel_pitch_um
        )
        sub_scans = [Scan(s.pixels[:, sl], sub_geom) for s in scans]
        sub_truths = [BoundaryField(t.values[:, sl], sub_geom) for t in truths]
        models.append(fit_appearance(sub_scans, sub_truths, projector, **kwargs))
    return AppearanceModelSet(models, cols, shared=False)

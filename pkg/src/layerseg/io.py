"""Versioned binary containers for scans and trained models.

Byte layouts are documented in ``docs/file_formats.md``; everything is
little-endian with fixed-width headers, and round trips are bit-exact
(float payloads are written as raw IEEE-754 words).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .appearance import AppearanceModel, AppearanceModelSet, PatchProjector
from .geometry import BoundaryField, Scan, ScanGeometry
from .lowrank import LowRankGaussian
from .shape import ShapePrior

SCAN_MAGIC = b"LSEGSCAN"
MODEL_MAGIC = b"LSEGMODL"
SCAN_VERSION = 1
MODEL_VERSION = 1
SECTION_SHAPE = 1
SECTION_APPEARANCE = 2


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, path):
        self.path = Path(path)
        self.data = self.path.read_bytes()
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated file (wanted {n} bytes at offset "
                f"{self.pos}, have {len(self.data) - self.pos})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self.take(dt.itemsize * count)
        return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="), copy=True)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(
                f"{self.path}: {len(self.data) - self.pos} trailing bytes"
            )


def _arr_bytes(arr: np.ndarray, dtype) -> bytes:
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def _check_header(rd: _Reader, magic: bytes, version: int, kind: str):
    got = rd.take(len(magic))
    if got != magic:
        raise FormatError(f"{rd.path}: bad magic {got!r}, not a {kind} file")
    (ver,) = rd.unpack("I")
    if ver != version:
        raise FormatError(
            f"{rd.path}: {kind} version mismatch: file has {ver}, reader supports {version}"
        )


# ---------------------------------------------------------------------------
# scan container
# ---------------------------------------------------------------------------


def save_scan(path, scan: Scan, truth: BoundaryField | None = None):
    geom = scan.geometry
    blob = bytearray()
    blob += SCAN_MAGIC
    blob += struct.pack(
        "<IIIII", SCAN_VERSION, geom.n_rows, geom.n_cols, geom.n_boundaries, geom.n_bscans
    )
    blob += struct.pack("<d", geom.pixel_pitch_um)
    blob += struct.pack("<B", 1 if truth is not None else 0)
    blob += _arr_bytes(scan.pixels, np.float32)
    if truth is not None:
        if truth.geometry != geom:
            raise ValueError("truth geometry does not match scan")
        blob += _arr_bytes(truth.values, np.float64)
    Path(path).write_bytes(bytes(blob))


def load_scan(path):
    """Returns ``(Scan, BoundaryField | None)``."""
    rd = _Reader(path)
    got = rd.take(len(SCAN_MAGIC))
    if got != SCAN_MAGIC:
        raise FormatError(f"{rd.path}: bad magic {got!r}, not a scan file")
    ver, n_rows, n_cols, n_b, n_bscans = rd.unpack("IIIII")
    if ver != SCAN_VERSION:
        raise FormatError(
            f"{rd.path}: scan version mismatch: file has {ver}, reader supports {SCAN_VERSION}"
        )
    (pitch,) = rd.unpack("d")
    (has_truth,) = rd.unpack("B")
    geom = ScanGeometry(n_rows, n_cols, n_b, n_bscans, pitch)
    pixels = rd.array(np.float32, n_rows * n_cols).reshape(n_rows, n_cols)
    truth = None
    if has_truth:
        vals = rd.array(np.float64, n_b * n_cols).reshape(n_b, n_cols)
        truth = BoundaryField(vals, geom)
    rd.done()
    return Scan(pixels, geom), truth


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------


def save_shape_prior(prior: ShapePrior, path):
    g = prior.gaussian
    geom = prior.geometry
    blob = bytearray()
    blob += MODEL_MAGIC
    blob += struct.pack("<II", MODEL_VERSION, SECTION_SHAPE)
    blob += struct.pack(
        "<IIII", geom.n_rows, geom.n_cols, geom.n_boundaries, geom.n_bscans
    )
    blob += struct.pack("<d", geom.pixel_pitch_um)
    blob += struct.pack("<I", g.rank)
    blob += struct.pack("<dd", prior.variance_inflation, g.noise_variance)
    blob += _arr_bytes(g.mean, np.float64)
    blob += _arr_bytes(g.factors, np.float64)
    Path(path).write_bytes(bytes(blob))


def load_shape_prior(path) -> ShapePrior:
    rd = _Reader(path)
    _check_header(rd, MODEL_MAGIC, MODEL_VERSION, "model")
    (section,) = rd.unpack("I")
    if section != SECTION_SHAPE:
        raise FormatError(
            f"{rd.path}: expected shape-prior section {SECTION_SHAPE}, found {section}"
        )
    n_rows, n_cols, n_b, n_bscans = rd.unpack("IIII")
    (pitch,) = rd.unpack("d")
    (rank,) = rd.unpack("I")
    inflation, sigma2 = rd.unpack("dd")
    geom = ScanGeometry(n_rows, n_cols, n_b, n_bscans, pitch)
    dim = geom.boundary_dim
    mean = rd.array(np.float64, dim)
    factors = rd.array(np.float64, dim * rank).reshape(dim, rank)
    rd.done()
    return ShapePrior(
        LowRankGaussian(mean, factors, sigma2), geom, q_ppca=rank,
        variance_inflation=inflation,
    )


def save_appearance(models: AppearanceModelSet | AppearanceModel, path, cols_per_bscan=None):
    if isinstance(models, AppearanceModel):
        if cols_per_bscan is None:
            raise ValueError("cols_per_bscan required when saving a bare model")
        models = AppearanceModelSet([models], cols_per_bscan, shared=True)
    first = models.models[0]
    proj = first.projector
    blob = bytearray()
    blob += MODEL_MAGIC
    blob += struct.pack("<II", MODEL_VERSION, SECTION_APPEARANCE)
    blob += struct.pack(
        "<IIIII",
        proj.patch_size[0],
        proj.patch_size[1],
        proj.q_pca,
        first.n_boundaries,
        len(models.models),
    )
    blob += struct.pack("<B", 1 if models.shared else 0)
    blob += struct.pack("<I", models.cols_per_bscan)
    blob += struct.pack("<d", first.alpha_glasso)
    blob += struct.pack(
        "<BBB",
        first.beta_layer,
        first.beta_transition,
        1 if first.mode == "discriminative" else 0,
    )
    blob += _arr_bytes(proj.basis, np.float64)
    for model in models.models:
        for c in range(model.n_classes):
            blob += _arr_bytes(model.means[c], np.float64)
            k = model.precisions[c].tocsr()
            k.sort_indices()
            blob += struct.pack("<I", k.nnz)
            blob += _arr_bytes(k.indptr, np.int64)
            blob += _arr_bytes(k.indices, np.int64)
            blob += _arr_bytes(k.data, np.float64)
    Path(path).write_bytes(bytes(blob))


def load_appearance(path) -> AppearanceModelSet:
    rd = _Reader(path)
    _check_header(rd, MODEL_MAGIC, MODEL_VERSION, "model")
    (section,) = rd.unpack("I")
    if section != SECTION_APPEARANCE:
        raise FormatError(
            f"{rd.path}: expected appearance section {SECTION_APPEARANCE}, found {section}"
        )
    patch_h, patch_w, q_pca, n_b, n_models = rd.unpack("IIIII")
    (shared,) = rd.unpack("B")
    (cols_per_bscan,) = rd.unpack("I")
    (alpha,) = rd.unpack("d")
    beta_layer, beta_transition, disc = rd.unpack("BBB")
    basis = rd.array(np.float64, patch_h * patch_w * q_pca).reshape(
        patch_h * patch_w, q_pca
    )
    projector = PatchProjector((patch_h, patch_w), basis)
    n_classes = 2 * n_b + 1
    models = []
    for _ in range(n_models):
        means = np.empty((n_classes, q_pca))
        precisions = []
        for c in range(n_classes):
            means[c] = rd.array(np.float64, q_pca)
            (nnz,) = rd.unpack("I")
            indptr = rd.array(np.int64, q_pca + 1)
            indices = rd.array(np.int64, nnz)
            data = rd.array(np.float64, nnz)
            precisions.append(
                sp.csr_matrix((data, indices, indptr), shape=(q_pca, q_pca))
            )
        models.append(
            AppearanceModel(
                projector=projector,
                n_boundaries=n_b,
                means=means,
                precisions=precisions,
                alpha_glasso=alpha,
                beta_layer=beta_layer,
                beta_transition=beta_transition,
                mode="discriminative" if disc else "generative",
            )
        )
    rd.done()
    return AppearanceModelSet(models, cols_per_bscan, shared=bool(shared))

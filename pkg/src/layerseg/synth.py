"""Synthetic scans with exact ground truth, sampled from the model itself.

The generative story mirrors inference: draw a boundary field from the
shape prior, rasterize it to per-pixel class labels (transition label on the
rounded boundary row, layer labels strictly between), then draw pixel
intensities from the class distributions. A parametric prior (smooth
sinusoidal mean curves plus three global modes: shift, tilt, spacing) covers
tests without any training data; a fitted prior can be substituted.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .geometry import BoundaryField, Scan, ScanGeometry
from .lowrank import LowRankGaussian
from .lowrank import sample as lowrank_sample
from .shape import ShapePrior


@dataclass(frozen=True)
class SynthConfig:
    n_rows: int = 120
    n_cols: int = 60
    n_boundaries: int = 3
    n_bscans: int = 1
    pixel_pitch_um: float = 3.87
    boundary_fractions: tuple = ()  # default: evenly spaced
    wave_amplitude: float = 4.0
    wave_period: float = 47.0
    wave_phase_step: float = 0.9
    mode_shift: float = 2.5
    mode_tilt: float = 1.5
    mode_spacing: float = 1.0
    residual_sigma: float = 0.35
    layer_means: tuple = (0.15, 0.5, 0.85, 0.35)
    transition_means: tuple = ()  # default: midpoints of adjacent layers
    class_sigma: float = 1.0
    noise_level: float = 0.08
    texture_amplitude: float = 0.0
    texture_period: float = 13.0
    margin: float = 2.0
    reject_cap: int = 2000
    seed: int = 0

    def geometry(self) -> ScanGeometry:
        return ScanGeometry(
            self.n_rows,
            self.n_cols,
            self.n_boundaries,
            self.n_bscans,
            self.pixel_pitch_um,
        )

    def fractions(self) -> np.ndarray:
        if self.boundary_fractions:
            fr = np.asarray(self.boundary_fractions, dtype=float)
            if fr.size != self.n_boundaries:
                raise ValueError("boundary_fractions length != n_boundaries")
            return fr
        return (np.arange(1, self.n_boundaries + 1)) / (self.n_boundaries + 1.0)

    def class_means(self) -> np.ndarray:
        layers = np.asarray(self.layer_means, dtype=float)
        if layers.size != self.n_boundaries + 1:
            raise ValueError(
                f"layer_means needs {self.n_boundaries + 1} entries, got {layers.size}"
            )
        if self.transition_means:
            trans = np.asarray(self.transition_means, dtype=float)
            if trans.size != self.n_boundaries:
                raise ValueError("transition_means length != n_boundaries")
        else:
            trans = 0.5 * (layers[:-1] + layers[1:])
        return np.concatenate([layers, trans])


def parametric_prior(config: SynthConfig, variance_inflation: float = 10.0) -> ShapePrior:
    """Shape prior from smooth mean curves and three global variation modes."""
    geom = config.geometry()
    n_b, m_cols = config.n_boundaries, config.n_cols
    j = np.arange(m_cols, dtype=float)
    fractions = config.fractions()
    mean = np.empty((n_b, m_cols))
    for k in range(n_b):
        center = 1.0 + fractions[k] * (config.n_rows - 1)
        mean[k] = center + config.wave_amplitude * np.sin(
            2.0 * np.pi * j / config.wave_period + config.wave_phase_step * k
        )

    centered_k = (np.arange(1, n_b + 1) - (n_b + 1) / 2.0) / max(n_b, 1)
    tilt = (2.0 * j / max(m_cols - 1, 1)) - 1.0
    modes = np.zeros((n_b, m_cols, 3))
    modes[:, :, 0] = config.mode_shift
    modes[:, :, 1] = config.mode_tilt * tilt[None, :]
    modes[:, :, 2] = config.mode_spacing * centered_k[:, None]
    factors = np.stack(
        [modes[:, :, i].flatten(order="F") for i in range(3)], axis=1
    )
    gaussian = LowRankGaussian(
        mean.flatten(order="F"), factors, config.residual_sigma**2
    )
    return ShapePrior(gaussian, geom, q_ppca=3, variance_inflation=variance_inflation)


def sample_boundaries(
    prior: ShapePrior, config: SynthConfig, rng_seed
) -> BoundaryField:
    """Draw one boundary field, rejecting draws that break ordering/margins."""
    geom = prior.geometry
    seq = np.random.SeedSequence(rng_seed)
    for attempt in range(config.reject_cap):
        child = np.random.SeedSequence(entropy=seq.entropy, spawn_key=(attempt,))
        flat = lowrank_sample(prior.gaussian, 1, child)[0]
        values = flat.reshape((geom.n_boundaries, geom.n_cols), order="F")
        lo, hi = config.margin, geom.n_rows + 1.0 - config.margin
        if np.any(values < lo) or np.any(values > hi):
            continue
        rounded = np.rint(values)
        if geom.n_boundaries > 1 and np.any(np.diff(rounded, axis=0) < 1.0):
            continue
        return BoundaryField(values, geom)
    raise RuntimeError(
        f"rejection cap {config.reject_cap} exceeded: prior too wide for geometry"
    )


def rasterize_labels(truth: BoundaryField) -> np.ndarray:
    """(N, M) class-column indices per pixel from rounded boundaries."""
    geom = truth.geometry
    n_b = geom.n_boundaries
    rounded = np.rint(truth.values).astype(int)  # 1-based rows
    labels = np.empty((geom.n_rows, geom.n_cols), dtype=np.int64)
    row_values = np.arange(1, geom.n_rows + 1)[:, None]
    labels.fill(n_b)  # bottom layer l_{N_b+1} has class column n_b
    labels[row_values < rounded[0][None, :]] = 0
    for k in range(1, n_b):
        between = (row_values > rounded[k - 1][None, :]) & (
            row_values < rounded[k][None, :]
        )
        labels[between] = k
    for k in range(n_b):
        labels[row_values == rounded[k][None, :]] = n_b + 1 + k
    return labels


def generate(config: SynthConfig, prior: ShapePrior | None = None, seed=None):
    """One synthetic scan plus its real-valued ground truth."""
    if prior is None:
        prior = parametric_prior(config)
    if seed is None:
        seed = config.seed
    truth = sample_boundaries(prior, config, seed)
    labels = rasterize_labels(truth)
    means = config.class_means()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(10**6,)))
    pixels = means[labels]
    if config.texture_amplitude:
        geom = truth.geometry
        ii = np.arange(geom.n_rows)[:, None]
        jj = np.arange(geom.n_cols)[None, :]
        pixels = pixels + config.texture_amplitude * np.sin(
            2.0 * np.pi * (ii + 2 * jj) / config.texture_period
        )
    if config.noise_level > 0.0:
        pixels = pixels + config.noise_level * config.class_sigma * rng.standard_normal(
            pixels.shape
        )
    return Scan(pixels.astype(np.float32), truth.geometry), truth


def config_digest(config: SynthConfig) -> str:
    payload = json.dumps(
        {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(config).items()},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def generate_dataset(
    config: SynthConfig,
    n_scans: int,
    out_dir,
    prior: ShapePrior | None = None,
):
    """Write ``n_scans`` scan files plus a manifest, deterministically."""
    from pathlib import Path

    from . import io as lio

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(n_scans):
        scan, truth = generate(config, prior=prior, seed=config.seed + i)
        name = f"scan_{i:04d}.lsc"
        lio.save_scan(out / name, scan, truth)
        files.append(name)
    manifest = {
        "format": "layerseg-dataset",
        "version": 1,
        "seed": config.seed,
        "config_sha256": config_digest(config),
        "n_scans": n_scans,
        "files": files,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest

"""Segmentation error measures and the cross-validation harness.

The headline number is the column-averaged unsigned distance between
estimated and reference boundary rows, per boundary and averaged over
boundaries, reported in pixels and in micrometers via the pixel pitch.
Multi-B-scan stacks can additionally be summarized over a uniform partition
of the B-scans into regions.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundaryField


@dataclass(frozen=True)
class ErrorReport:
    per_boundary_px: np.ndarray  # (N_b,)
    per_boundary_um: np.ndarray
    mean_px: float
    mean_um: float
    sd_um: float  # std over scans of the per-scan mean error
    n_scans: int
    pixel_pitch_um: float
    per_scan_mean_um: np.ndarray = field(default_factory=lambda: np.zeros(0))
    per_region_um: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def as_dict(self) -> dict:
        return {
            "per_boundary_px": self.per_boundary_px.tolist(),
            "per_boundary_um": self.per_boundary_um.tolist(),
            "mean_px": self.mean_px,
            "mean_um": self.mean_um,
            "sd_um": self.sd_um,
            "n_scans": self.n_scans,
            "pixel_pitch_um": self.pixel_pitch_um,
            "per_scan_mean_um": self.per_scan_mean_um.tolist(),
            "per_region_um": self.per_region_um.tolist(),
        }


def _estimate_values(estimate) -> np.ndarray:
    return np.asarray(getattr(estimate, "values", estimate), dtype=np.float64)


def unsigned_error(
    estimate,
    truth: BoundaryField,
    pixel_pitch_um: float | None = None,
    n_regions: int = 0,
) -> ErrorReport:
    """Column-mean absolute row deviation per boundary; symmetric in inputs."""
    est = _estimate_values(estimate)
    ref = truth.values
    if est.shape != ref.shape:
        raise ValueError(f"estimate shape {est.shape} != truth shape {ref.shape}")
    if pixel_pitch_um is None:
        pixel_pitch_um = truth.geometry.pixel_pitch_um
    abs_err = np.abs(est - ref)  # (N_b, M)
    per_boundary_px = abs_err.mean(axis=1)
    mean_px = float(per_boundary_px.mean())
    per_region = np.zeros(0)
    if n_regions > 0:
        splits = np.array_split(np.arange(ref.shape[1]), n_regions)
        per_region = np.array(
            [abs_err[:, idx].mean() * pixel_pitch_um for idx in splits]
        )
    return ErrorReport(
        per_boundary_px=per_boundary_px,
        per_boundary_um=per_boundary_px * pixel_pitch_um,
        mean_px=mean_px,
        mean_um=mean_px * pixel_pitch_um,
        sd_um=0.0,
        n_scans=1,
        pixel_pitch_um=float(pixel_pitch_um),
        per_scan_mean_um=np.array([mean_px * pixel_pitch_um]),
        per_region_um=per_region,
    )


def aggregate_reports(reports: list[ErrorReport]) -> ErrorReport:
    """Scan-weighted aggregation; SD is over per-scan mean errors."""
    if not reports:
        raise ValueError("nothing to aggregate")
    weights = np.array([r.n_scans for r in reports], dtype=float)
    per_scan = np.concatenate([r.per_scan_mean_um for r in reports])
    pitch = reports[0].pixel_pitch_um
    per_boundary_px = np.average(
        np.stack([r.per_boundary_px for r in reports]), axis=0, weights=weights
    )
    mean_px = float(np.average([r.mean_px for r in reports], weights=weights))
    regions = [r.per_region_um for r in reports if r.per_region_um.size]
    per_region = (
        np.average(np.stack(regions), axis=0, weights=weights[: len(regions)])
        if regions
        else np.zeros(0)
    )
    return ErrorReport(
        per_boundary_px=per_boundary_px,
        per_boundary_um=per_boundary_px * pitch,
        mean_px=mean_px,
        mean_um=mean_px * pitch,
        sd_um=float(np.std(per_scan)),
        n_scans=int(weights.sum()),
        pixel_pitch_um=pitch,
        per_scan_mean_um=per_scan,
        per_region_um=per_region,
    )


def fold_assignments(n_items: int, folds: int, seed) -> list[np.ndarray]:
    """Deterministic shuffled k-fold split; folds == n_items is leave-one-out."""
    if not 2 <= folds <= n_items:
        raise ValueError(f"folds must be in 2..{n_items}, got {folds}")
    perm = np.random.default_rng(seed).permutation(n_items)
    return [np.sort(chunk) for chunk in np.array_split(perm, folds)]


def cross_validate(
    scans,
    truths,
    folds: int,
    train_fn,
    segment_fn,
    seed=0,
    n_regions: int = 0,
    threads: int = 1,
):
    """Generic k-fold harness: train on folds-1, evaluate the held-out fold.

    ``train_fn(train_scans, train_truths)`` returns a model bundle;
    ``segment_fn(models, scan)`` returns an estimate comparable to the truth.
    Returns ``(aggregate ErrorReport, per-fold reports)``.
    """
    assignments = fold_assignments(len(scans), folds, seed)

    def run_fold(test_idx):
        train_idx = np.setdiff1d(np.arange(len(scans)), test_idx)
        models = train_fn(
            [scans[i] for i in train_idx], [truths[i] for i in train_idx]
        )
        reports = [
            unsigned_error(
                segment_fn(models, scans[i]), truths[i], n_regions=n_regions
            )
            for i in test_idx
        ]
        return aggregate_reports(reports)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fold_reports = list(pool.map(run_fold, assignments))
    else:
        fold_reports = [run_fold(idx) for idx in assignments]
    return aggregate_reports(fold_reports), fold_reports

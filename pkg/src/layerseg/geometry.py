"""Scan and boundary-field containers shared across the pipeline.

Conventions used everywhere in this package:

* pixel rows carry 1-based values 1..N (row value r lives at array index
  r - 1); boundary heights are real numbers in that coordinate system;
* a 3-D stack of B-scans is flattened to a single pixel grid whose columns
  are ordered B-scan-major, so geometry only tracks the total column count
  plus how many B-scans it came from;
* boundary fields are stored as (n_boundaries, n_cols) arrays whose flat
  vector layout is column-major (all boundaries of column 0, then column 1,
  ...), matching the shape prior's coordinate order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class ScanGeometry:
    n_rows: int
    n_cols: int
    n_boundaries: int
    n_bscans: int = 1
    pixel_pitch_um: float = 1.0

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise GeometryError(f"empty scan geometry {self.n_rows}x{self.n_cols}")
        if self.n_boundaries < 1:
            raise GeometryError("need at least one boundary")
        if self.n_bscans < 1 or self.n_cols % self.n_bscans != 0:
            raise GeometryError(
                f"column count {self.n_cols} not divisible into {self.n_bscans} B-scans"
            )

    @property
    def cols_per_bscan(self) -> int:
        return self.n_cols // self.n_bscans

    @property
    def boundary_dim(self) -> int:
        return self.n_boundaries * self.n_cols

    def bscan_of_column(self, j: int) -> int:
        return j // self.cols_per_bscan


@dataclass(frozen=True)
class Scan:
    """Pixel grid (float32, rows x columns) with geometry metadata."""

    pixels: np.ndarray
    geometry: ScanGeometry

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.shape != (self.geometry.n_rows, self.geometry.n_cols):
            raise GeometryError(
                f"pixel array {px.shape} does not match geometry "
                f"({self.geometry.n_rows}, {self.geometry.n_cols})"
            )
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class BoundaryField:
    """Real-valued boundary heights, one row per boundary, one column per A-scan."""

    values: np.ndarray
    geometry: ScanGeometry

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        expected = (self.geometry.n_boundaries, self.geometry.n_cols)
        if vals.shape != expected:
            raise GeometryError(f"boundary array {vals.shape}, expected {expected}")
        if not np.all(np.isfinite(vals)):
            raise GeometryError("boundary heights must be finite")
        object.__setattr__(self, "values", vals)

    def is_strictly_ordered(self) -> bool:
        if self.values.shape[0] == 1:
            return True
        return bool(np.all(np.diff(self.values, axis=0) > 0.0))

    def require_ordered(self):
        if not self.is_strictly_ordered():
            bad = np.argwhere(np.diff(self.values, axis=0) <= 0.0)
            k, j = bad[0]
            raise GeometryError(
                f"boundaries not strictly increasing at column {j} "
                f"(boundary {k + 1} vs {k + 2})"
            )

    def flat(self) -> np.ndarray:
        """Column-major flattening to the shape-prior coordinate order."""
        return self.values.flatten(order="F")

    @classmethod
    def from_flat(cls, vec: np.ndarray, geometry: ScanGeometry) -> "BoundaryField":
        vals = np.asarray(vec, dtype=np.float64).reshape(
            (geometry.n_boundaries, geometry.n_cols), order="F"
        )
        return cls(vals, geometry)

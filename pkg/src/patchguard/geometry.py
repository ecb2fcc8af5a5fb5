"""Receptive-field arithmetic for patch ensembles with valid (unpadded) tiling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

from .tensors import ContractError, Window


def _feature_len(image: int, rf: int, stride: int) -> int:
    if rf > image:
        raise ContractError(f"receptive field {rf} larger than image side {image}")
    return (image - rf) // stride + 1


@dataclass(frozen=True)
class RFGeometry:
    rf_rows: int
    rf_cols: int
    stride_rows: int
    stride_cols: int
    image_rows: int
    image_cols: int

    def __post_init__(self):
        for name in ("rf_rows", "rf_cols", "stride_rows", "stride_cols", "image_rows", "image_cols"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        _feature_len(self.image_rows, self.rf_rows, self.stride_rows)
        _feature_len(self.image_cols, self.rf_cols, self.stride_cols)

    @classmethod
    def square(cls, rf: int, stride: int, image_rows: int, image_cols: Optional[int] = None) -> "RFGeometry":
        image_cols = image_rows if image_cols is None else image_cols
        return cls(rf, rf, stride, stride, image_rows, image_cols)

    @property
    def feature_rows(self) -> int:
        return _feature_len(self.image_rows, self.rf_rows, self.stride_rows)

    @property
    def feature_cols(self) -> int:
        return _feature_len(self.image_cols, self.rf_cols, self.stride_cols)

    @property
    def feature_shape(self) -> Tuple[int, int]:
        return (self.feature_rows, self.feature_cols)

    def receptive_field(self, i: int, j: int) -> Tuple[int, int, int, int]:
        """Pixel rectangle (row0, col0, rows, cols) seen by feature cell (i, j)."""
        return (i * self.stride_rows, j * self.stride_cols, self.rf_rows, self.rf_cols)


@dataclass(frozen=True)
class PatchSpec:
    prows: int
    pcols: int
    anchor: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.prows < 1 or self.pcols < 1:
            raise ContractError("patch sides must be positive")

    @classmethod
    def from_area_fraction(cls, fraction: float, image_rows: int, image_cols: int) -> "PatchSpec":
        """Square patch whose area is the nearest integer side to ``fraction`` of the image."""
        if not 0.0 < fraction <= 1.0:
            raise ContractError("area fraction must be in (0, 1]")
        side = max(1, int(math.floor(math.sqrt(fraction * image_rows * image_cols) + 0.5)))
        side = min(side, image_rows, image_cols)
        return cls(side, side)

    def check_fits(self, geom: RFGeometry) -> None:
        if self.prows > geom.image_rows or self.pcols > geom.image_cols:
            raise ContractError("patch larger than image")
        if self.anchor is not None:
            r, c = self.anchor
            if r < 0 or c < 0 or r + self.prows > geom.image_rows or c + self.pcols > geom.image_cols:
                raise ContractError(f"patch anchored at {self.anchor} leaves the image")


def window_size(p: int, r: int, s: int) -> int:
    """Number of feature cells along one axis a p-pixel patch can corrupt: ceil((p + r - 1) / s)."""
    if min(p, r, s) < 1:
        raise ContractError("patch, receptive field and stride must be >= 1")
    return -(-(p + r - 1) // s)


def mask_shape(patch: PatchSpec, geom: RFGeometry) -> Tuple[int, int]:
    patch.check_fits(geom)
    wr = window_size(patch.prows, geom.rf_rows, geom.stride_rows)
    wc = window_size(patch.pcols, geom.rf_cols, geom.stride_cols)
    return (min(wr, geom.feature_rows), min(wc, geom.feature_cols))


def _axis_range(start: int, length: int, rf: int, stride: int, n: int) -> Tuple[int, int]:
    # cell k covers [k*stride, k*stride + rf); patch covers [start, start + length)
    lo = max(0, -(-(start - rf + 1) // stride))
    hi = min(n - 1, (start + length - 1) // stride)
    return lo, hi


def affected_cells(patch_anchor: Tuple[int, int], patch: PatchSpec, geom: RFGeometry) -> Optional[Window]:
    """Smallest feature window holding every cell whose receptive field meets the patch.

    Returns None when the stride exceeds the receptive field and the patch
    sits entirely in a gap between fields.
    """
    r0, c0 = patch_anchor
    PatchSpec(patch.prows, patch.pcols, (r0, c0)).check_fits(geom)
    i0, i1 = _axis_range(r0, patch.prows, geom.rf_rows, geom.stride_rows, geom.feature_rows)
    j0, j1 = _axis_range(c0, patch.pcols, geom.rf_cols, geom.stride_cols, geom.feature_cols)
    if i1 < i0 or j1 < j0:
        return None
    return Window(i0, j0, i1 - i0 + 1, j1 - j0 + 1)

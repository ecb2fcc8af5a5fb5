"""Dense tensor primitives shared by the rest of the package.

Feature tensors are stored as float64 arrays of shape (rows, cols, classes),
row-major, so ``values[i, j, c]`` is the evidence for class ``c`` at feature
cell ``(i, j)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, List, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = ("logits", "confidence", "prediction")


class ContractError(ValueError):
    """Raised when an operation is called outside its documented domain."""


@dataclass(frozen=True)
class ImageTensor:
    pixels: np.ndarray  # (rows, cols, channels), values in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or min(px.shape) < 1:
            raise ContractError(f"image must be (rows, cols, channels), got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ContractError("pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def rows(self) -> int:
        return self.pixels.shape[0]

    @property
    def cols(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class FeatureTensor:
    values: np.ndarray  # (rows, cols, classes)
    kind: str = "logits"

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ContractError(f"feature tensor must be (rows, cols, classes), got {v.shape}")
        if self.kind not in KINDS:
            raise ContractError(f"unknown feature kind {self.kind!r}")
        if not np.all(np.isfinite(v)):
            raise ContractError("feature values must be finite")
        if self.kind == "confidence":
            if v.min() < 0.0 or v.max() > 1.0:
                raise ContractError("confidence values must lie in [0, 1]")
            if np.max(np.abs(v.sum(axis=2) - 1.0)) > 1e-6:
                raise ContractError("confidence cells must sum to 1")
        elif self.kind == "prediction":
            ones = v == 1.0
            if not np.all(ones | (v == 0.0)) or not np.all(ones.sum(axis=2) == 1):
                raise ContractError("prediction cells must be one-hot")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def classes(self) -> int:
        return self.values.shape[2]

    def class_slice(self, cls: int) -> np.ndarray:
        if not 0 <= cls < self.classes:
            raise ContractError(f"class {cls} out of range for {self.classes} classes")
        return self.values[:, :, cls]

    def replace_values(self, values: np.ndarray, kind: str | None = None) -> "FeatureTensor":
        return FeatureTensor(values, kind or self.kind)


@dataclass(frozen=True, order=True)
class Window:
    row0: int
    col0: int
    wrows: int
    wcols: int

    def __post_init__(self):
        if self.row0 < 0 or self.col0 < 0:
            raise ContractError("window origin must be non-negative")
        if self.wrows < 1 or self.wcols < 1:
            raise ContractError("window shape must be positive")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.wrows, self.wcols)

    @property
    def cells(self) -> int:
        return self.wrows * self.wcols

    def fits(self, rows: int, cols: int) -> bool:
        return self.row0 + self.wrows <= rows and self.col0 + self.wcols <= cols

    def slices(self) -> Tuple[slice, slice]:
        return (slice(self.row0, self.row0 + self.wrows), slice(self.col0, self.col0 + self.wcols))

    def mask(self, rows: int, cols: int) -> np.ndarray:
        """Binary (rows, cols) map with ones inside the window."""
        self._check(rows, cols)
        m = np.zeros((rows, cols))
        m[self.slices()] = 1.0
        return m

    def covers(self, other: "Window") -> bool:
        return (
            self.row0 <= other.row0
            and self.col0 <= other.col0
            and other.row0 + other.wrows <= self.row0 + self.wrows
            and other.col0 + other.wcols <= self.col0 + self.wcols
        )

    def intersects(self, other: "Window") -> bool:
        return not (
            other.row0 >= self.row0 + self.wrows
            or self.row0 >= other.row0 + other.wrows
            or other.col0 >= self.col0 + self.wcols
            or self.col0 >= other.col0 + other.wcols
        )

    def _check(self, rows: int, cols: int) -> None:
        if not self.fits(rows, cols):
            raise ContractError(f"{self} does not fit a {rows}x{cols} grid")


@dataclass(frozen=True)
class ClipBounds:
    """Interval clip; ``hi=None`` means no upper bound."""

    lo: float = 0.0
    hi: float | None = None

    def __post_init__(self):
        if self.hi is not None and math.isinf(self.hi) and self.hi > 0:
            object.__setattr__(self, "hi", None)
        if not math.isfinite(self.lo):
            raise ContractError("lower clip bound must be finite")
        if self.hi is not None and self.hi < self.lo:
            raise ContractError("clip bounds require lo <= hi")

    def apply(self, values: np.ndarray) -> np.ndarray:
        if self.hi is None:
            return np.maximum(values, self.lo)
        return np.clip(values, self.lo, self.hi)

    def __str__(self) -> str:
        return f"[{self.lo:g}, {'inf' if self.hi is None else format(self.hi, 'g')}]"


@dataclass(frozen=True)
class TanhClip:
    """Saturating clip ``tanh(scale * u + shift)`` used by clipped-sum baselines."""

    scale: float = 0.05
    shift: float = -1.0

    def apply(self, values: np.ndarray) -> np.ndarray:
        return np.tanh(self.scale * values + self.shift)

    def __str__(self) -> str:
        return f"tanh({self.scale:g}*u{self.shift:+g})"


ClipFunction = Union[ClipBounds, TanhClip]


def clip(tensor: FeatureTensor, bounds: ClipFunction) -> FeatureTensor:
    out = bounds.apply(tensor.values)
    if tensor.kind != "logits" and not np.array_equal(out, tensor.values):
        # a clip that moves confidence/prediction values out of their domain
        # would break the kind invariant
        return FeatureTensor(out, "logits")
    return FeatureTensor(out, tensor.kind)


def _checked(tensor: FeatureTensor, cls: int, window: Window) -> np.ndarray:
    sl = tensor.class_slice(cls)
    window._check(tensor.rows, tensor.cols)
    return sl


def sum_in_window(tensor: FeatureTensor, cls: int, window: Window) -> float:
    sl = _checked(tensor, cls, window)
    return float(sl[window.slices()].sum())


def sum_outside_window(tensor: FeatureTensor, cls: int, window: Window) -> float:
    sl = _checked(tensor, cls, window)
    return masked_sum(sl, window)


def masked_sum(grid: np.ndarray, *windows: Window | None) -> float:
    """Sum of a 2-D grid after zeroing every given window.

    All evidence totals in the package go through this function so that
    bounds and defended scores share one summation order.
    """
    g = np.array(grid, dtype=np.float64)
    for w in windows:
        if w is not None:
            g[w.slices()] = 0.0
    return float(grid_total(g))


def grid_total(grids: np.ndarray) -> np.ndarray:
    """Sum over the last two axes with one fixed reduction order."""
    a = np.ascontiguousarray(grids, dtype=np.float64)
    return a.reshape(a.shape[:-2] + (-1,)).sum(axis=-1)


def enumerate_windows(fwidth: int, fheight: int, wrows: int, wcols: int) -> List[Window]:
    """All windows of shape (wrows, wcols) fully inside a fheight x fwidth grid, row-major."""
    if min(fwidth, fheight, wrows, wcols) < 1:
        raise ContractError("grid and window dimensions must be positive")
    if wrows > fheight or wcols > fwidth:
        raise ContractError(f"window {wrows}x{wcols} larger than grid {fheight}x{fwidth}")
    return [
        Window(i, j, wrows, wcols)
        for i in range(fheight - wrows + 1)
        for j in range(fwidth - wcols + 1)
    ]


def iter_windows(rows: int, cols: int, shape: Tuple[int, int]) -> Iterator[Window]:
    return iter(enumerate_windows(cols, rows, shape[0], shape[1]))


def window_sums(grids: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Sliding-window sums over the last two axes.

    ``grids`` has shape (..., rows, cols); the result has shape (..., K) with
    K windows in the row-major order of :func:`enumerate_windows`.
    """
    a = np.asarray(grids, dtype=np.float64)
    wr, wc = shape
    if wr > a.shape[-2] or wc > a.shape[-1]:
        raise ContractError(f"window {wr}x{wc} larger than grid {a.shape[-2:]}")
    views = sliding_window_view(a, (wr, wc), axis=(-2, -1))
    sums = views.sum(axis=(-2, -1))
    return sums.reshape(a.shape[:-2] + (-1,))

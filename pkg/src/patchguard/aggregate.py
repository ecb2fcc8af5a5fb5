"""Feature aggregation: robust masking and the baseline aggregators it generalizes.

Every argmax in this module breaks ties toward the lowest class index, and
window detection breaks ties toward the first window in row-major order.
Certification relies on both rules.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .tensors import (
    ClipBounds,
    ClipFunction,
    ContractError,
    FeatureTensor,
    TanhClip,
    Window,
    enumerate_windows,
    grid_total,
    masked_sum,
    window_sums,
)


@dataclass(frozen=True)
class MaskingConfig:
    mask_shape: Tuple[int, int]
    threshold: float = 0.0
    bounds: ClipFunction = field(default_factory=ClipBounds)

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ContractError("detection threshold must lie in [0, 1]")
        if len(self.mask_shape) != 2 or min(self.mask_shape) < 1:
            raise ContractError(f"invalid mask shape {self.mask_shape}")
        object.__setattr__(self, "mask_shape", (int(self.mask_shape[0]), int(self.mask_shape[1])))

    def check_fits(self, rows: int, cols: int) -> None:
        if self.mask_shape[0] > rows or self.mask_shape[1] > cols:
            raise ContractError(f"mask {self.mask_shape} does not fit a {rows}x{cols} feature grid")


@dataclass(frozen=True)
class MaskingOutcome:
    predicted: int
    per_class_evidence: np.ndarray
    detected_windows: List[Optional[Window]]


def argmax_low(values) -> int:
    """Index of the maximum, lowest index on ties."""
    return int(np.argmax(np.asarray(values)))


def detect_index(grids: np.ndarray, threshold: float, shape: Tuple[int, int]) -> np.ndarray:
    """Vectorized detection over a stack of class slices.

    ``grids`` has shape (..., rows, cols). Returns the row-major index of
    the detected window for each slice, or -1 where nothing is detected.
    """
    g = np.asarray(grids, dtype=np.float64)
    sums = window_sums(g, shape)
    best = np.argmax(sums, axis=-1)
    if threshold >= 1.0:
        return np.full(best.shape, -1)
    top = np.take_along_axis(sums, best[..., None], axis=-1)[..., 0]
    total = grid_total(g)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(total > 0, top / np.where(total > 0, total, 1.0), 0.0)
    fired = (total > 0) & (ratio > threshold)
    return np.where(fired, best, -1)


def detect(class_slice: np.ndarray, threshold: float, mask_shape: Tuple[int, int]) -> Optional[Window]:
    """Window with the largest in-window evidence, or None when its share of the total is <= threshold."""
    g = np.asarray(class_slice, dtype=np.float64)
    if g.ndim != 2:
        raise ContractError("detect expects a 2-D class slice")
    idx = int(detect_index(g, threshold, mask_shape))
    if idx < 0:
        return None
    return enumerate_windows(g.shape[1], g.shape[0], *mask_shape)[idx]


def _clipped(tensor: FeatureTensor, bounds: ClipFunction) -> np.ndarray:
    return bounds.apply(tensor.values)


def robust_masking(tensor: FeatureTensor, config: MaskingConfig) -> MaskingOutcome:
    config.check_fits(tensor.rows, tensor.cols)
    clipped = _clipped(tensor, config.bounds)
    evidence = np.empty(tensor.classes)
    detected: List[Optional[Window]] = []
    for c in range(tensor.classes):
        sl = clipped[:, :, c]
        w = detect(sl, config.threshold, config.mask_shape)
        detected.append(w)
        evidence[c] = masked_sum(sl, w)
    return MaskingOutcome(argmax_low(evidence), evidence, detected)


def masked_evidence_batch(slices: np.ndarray, config: MaskingConfig) -> np.ndarray:
    """Masked evidence s for a stack of already-clipped class slices (..., rows, cols).

    Same arithmetic as :func:`robust_masking`; used by the oracle to score
    many adversarial slices at once.
    """
    g = np.asarray(slices, dtype=np.float64)
    rows, cols = g.shape[-2:]
    idx = detect_index(g, config.threshold, config.mask_shape)
    masks = np.stack([w.mask(rows, cols) for w in enumerate_windows(cols, rows, *config.mask_shape)])
    keep = np.where(idx[..., None, None] >= 0, 1.0 - masks[np.maximum(idx, 0)], 1.0)
    return grid_total(g * keep)


def mean_aggregate(logits_tensor: FeatureTensor) -> int:
    means = logits_tensor.values.mean(axis=(0, 1))
    return argmax_low(means)


def cbn_scores(logits_tensor: FeatureTensor, clip_fn: TanhClip = TanhClip()) -> np.ndarray:
    if logits_tensor.kind != "logits":
        raise ContractError("clipped-sum aggregation needs a logits tensor")
    return grid_total(np.moveaxis(clip_fn.apply(logits_tensor.values), 2, 0))


def cbn_aggregate(logits_tensor: FeatureTensor, clip_fn: TanhClip = TanhClip()) -> int:
    return argmax_low(cbn_scores(logits_tensor, clip_fn))


def vote_counts(tensor: FeatureTensor, abstain_threshold: Optional[float] = None) -> np.ndarray:
    if tensor.kind not in ("prediction", "confidence"):
        raise ContractError("majority vote needs a prediction or confidence tensor")
    v = tensor.values.reshape(-1, tensor.classes)
    votes = np.argmax(v, axis=1)
    keep = np.ones(len(votes), dtype=bool)
    if abstain_threshold is not None and tensor.kind == "confidence":
        keep = v.max(axis=1) >= abstain_threshold
    return np.bincount(votes[keep], minlength=tensor.classes).astype(np.int64)


def ds_majority(tensor: FeatureTensor, abstain_threshold: Optional[float] = None) -> Tuple[int, np.ndarray]:
    counts = vote_counts(tensor, abstain_threshold)
    return argmax_low(counts), counts

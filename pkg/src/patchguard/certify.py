"""Provable robustness checks for robust masking and its baselines.

For every candidate malicious window ``w`` the checks compare an upper
bound on each wrong class's masked evidence against a lower bound on the
true class's masked evidence.

Two comparison details matter for soundness and are configurable so the
oracle can demonstrate what goes wrong without them:

* ``tie_rule="sound"`` treats a tie with a lower-indexed wrong class as a
  successful attack, because inference breaks argmax ties toward the lowest
  index. ``"literal"`` only flags strictly larger wrong-class bounds.
* The true-class lower bound always removes the best mask window of the
  slice with ``w`` zeroed, whatever the threshold. With ``literal_lower=True``
  the removal only happens when that window clears the detection threshold,
  which an adversary can defeat for ``T > 0`` by planting true-class
  evidence inside ``w`` to force detection onto a benign region.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .aggregate import MaskingConfig, detect, argmax_low
from .tensors import (
    ClipBounds,
    ContractError,
    FeatureTensor,
    TanhClip,
    Window,
    enumerate_windows,
    masked_sum,
    window_sums,
)

TIE_RULES = ("sound", "literal")


@dataclass(frozen=True)
class CertResult:
    certified: bool
    worst_window: Optional[Window]
    true_lower: float
    wrong_upper: np.ndarray  # per class; NaN at the true label

    def same_as(self, other: "CertResult") -> bool:
        return (
            self.certified == other.certified
            and self.worst_window == other.worst_window
            and self.true_lower == other.true_lower
            and np.array_equal(self.wrong_upper, other.wrong_upper, equal_nan=True)
        )


@dataclass(frozen=True)
class WindowBounds:
    window: Window
    true_lower: float
    wrong_upper: np.ndarray  # NaN at the true label


def defeats(upper: float, lower: float, wrong: int, true_label: int, tie_rule: str = "sound") -> bool:
    """True when a wrong class with this upper bound could beat the true class."""
    if upper > lower:
        return True
    return tie_rule == "sound" and upper == lower and wrong < true_label


def _validate(clean: FeatureTensor, true_label: int, config: MaskingConfig, tie_rule: str) -> None:
    if config.threshold >= 1.0:
        raise ContractError("certification needs a detection threshold below 1")
    if not isinstance(config.bounds, ClipBounds) or config.bounds.lo < 0.0:
        raise ContractError("certification needs interval clipping with a non-negative lower bound")
    if not 0 <= true_label < clean.classes:
        raise ContractError(f"label {true_label} out of range")
    if tie_rule not in TIE_RULES:
        raise ContractError(f"unknown tie rule {tie_rule!r}")


def window_bounds(
    clean: FeatureTensor,
    true_label: int,
    malicious_shape: Tuple[int, int],
    config: MaskingConfig,
    literal_lower: bool = False,
) -> List[WindowBounds]:
    """Per-malicious-window true-class lower bound and wrong-class upper bounds.

    The mask windows come from ``config.mask_shape``, which must cover the
    malicious shape. When the two shapes are equal the only mask window
    covering ``w`` is ``w`` itself and the wrong-class bound is the plain
    outside-window sum scaled by ``1/(1-T)``.
    """
    rows, cols = clean.rows, clean.cols
    config.check_fits(rows, cols)
    mr, mc = malicious_shape
    if mr > config.mask_shape[0] or mc > config.mask_shape[1]:
        raise ContractError(f"mask {config.mask_shape} smaller than malicious window {malicious_shape}")
    clipped = config.bounds.apply(clean.values)
    scale = 1.0 - config.threshold
    mask_windows = enumerate_windows(cols, rows, *config.mask_shape)
    # in-window evidence of every mask window, per class: (classes, K)
    mask_sums = window_sums(np.moveaxis(clipped, 2, 0), config.mask_shape)
    true_slice = clipped[:, :, true_label]
    lower_threshold = config.threshold if literal_lower else 0.0

    out = []
    for w in enumerate_windows(cols, rows, mr, mc):
        covering = [k for k, v in enumerate(mask_windows) if v.covers(w)]
        upper = np.full(clean.classes, np.nan)
        for c in range(clean.classes):
            if c == true_label:
                continue
            best = covering[int(np.argmax(mask_sums[c, covering]))]
            upper[c] = masked_sum(clipped[:, :, c], mask_windows[best]) / scale
        zeroed = true_slice.copy()
        zeroed[w.slices()] = 0.0
        detected = detect(zeroed, lower_threshold, config.mask_shape)
        lower = masked_sum(true_slice, w, detected)
        out.append(WindowBounds(w, lower, upper))
    return out


def _summarize(bounds: List[WindowBounds], true_label: int, tie_rule: str) -> CertResult:
    worst = None
    for b in bounds:
        if any(
            defeats(b.wrong_upper[c], b.true_lower, c, true_label, tie_rule)
            for c in range(len(b.wrong_upper))
            if c != true_label
        ):
            worst = b.window
            break
    lower = min(b.true_lower for b in bounds)
    stacked = np.stack([b.wrong_upper for b in bounds])
    upper = np.max(np.where(np.isnan(stacked), -np.inf, stacked), axis=0)
    upper[true_label] = np.nan
    return CertResult(worst is None, worst, float(lower), upper)


def certify_masking(
    clean_features: FeatureTensor,
    true_label: int,
    config: MaskingConfig,
    *,
    tie_rule: str = "sound",
    literal_lower: bool = False,
) -> CertResult:
    """Certify that robust masking predicts ``true_label`` under any patch whose
    feature footprint fits ``config.mask_shape``."""
    _validate(clean_features, true_label, config, tie_rule)
    bounds = window_bounds(clean_features, true_label, config.mask_shape, config, literal_lower)
    return _summarize(bounds, true_label, tie_rule)


def certify_oversized(
    clean_features: FeatureTensor,
    true_label: int,
    malicious_shape: Tuple[int, int],
    mask_shape: Optional[Tuple[int, int]],
    config: MaskingConfig,
    *,
    tie_rule: str = "sound",
    literal_lower: bool = False,
) -> CertResult:
    """Certification when the deployed mask is larger than the patch footprint.

    The wrong-class bound removes the highest-evidence mask window that
    covers the malicious window instead of the malicious window itself.
    """
    if mask_shape is not None and tuple(mask_shape) != config.mask_shape:
        config = MaskingConfig(tuple(mask_shape), config.threshold, config.bounds)
    _validate(clean_features, true_label, config, tie_rule)
    bounds = window_bounds(clean_features, true_label, tuple(malicious_shape), config, literal_lower)
    return _summarize(bounds, true_label, tie_rule)


def certify_topk(
    clean_features: FeatureTensor,
    true_label: int,
    config: MaskingConfig,
    k: int,
    *,
    malicious_shape: Optional[Tuple[int, int]] = None,
    tie_rule: str = "sound",
    literal_lower: bool = False,
) -> bool:
    """True when no malicious window lets more than ``k - 1`` wrong classes overtake the true class."""
    if k < 1:
        raise ContractError("k must be at least 1")
    _validate(clean_features, true_label, config, tie_rule)
    shape = config.mask_shape if malicious_shape is None else tuple(malicious_shape)
    for b in window_bounds(clean_features, true_label, shape, config, literal_lower):
        beaten = sum(
            defeats(b.wrong_upper[c], b.true_lower, c, true_label, tie_rule)
            for c in range(clean_features.classes)
            if c != true_label
        )
        if beaten > k - 1:
            return False
    return True


def cbn_certify(
    clean_logits: FeatureTensor,
    true_label: int,
    window_shape: Tuple[int, int],
    *,
    location_free: bool = False,
    clip_fn: TanhClip = TanhClip(),
) -> bool:
    """Clipped-sum certificate: every corrupted cell moves a class-pair margin by at most 2.

    With contiguous corruption the margin left after removing each candidate
    window must exceed twice the window's cell count. ``location_free`` drops
    the contiguity assumption and removes the k cells that help the true class
    most, per competing class.
    """
    if clean_logits.kind != "logits":
        raise ContractError("clipped-sum certification needs a logits tensor")
    u = clip_fn.apply(clean_logits.values)
    scores = u.sum(axis=(0, 1))
    if argmax_low(scores) != true_label:
        return False
    rows, cols = clean_logits.rows, clean_logits.cols
    wr, wc = window_shape
    k = wr * wc
    if location_free:
        if k > rows * cols:
            raise ContractError("more corrupted cells than features")
        flat = u.reshape(-1, clean_logits.classes)
        for c in range(clean_logits.classes):
            if c == true_label:
                continue
            gap = flat[:, true_label] - flat[:, c]
            remaining = gap.sum() - np.sort(gap)[::-1][:k].sum()
            if not remaining > 2 * k:
                return False
        return True
    for w in enumerate_windows(cols, rows, wr, wc):
        rest = np.array([masked_sum(u[:, :, c], w) for c in range(clean_logits.classes)])
        others = np.delete(rest, true_label)
        delta = rest[true_label] - others.max()
        if not delta > 2 * k:
            return False
    return True


def ds_certify(clean_prediction: FeatureTensor, true_label: int, k_corrupted: int) -> bool:
    """Majority-vote certificate: the top-two count gap must exceed ``2 * k_corrupted``."""
    if clean_prediction.kind != "prediction":
        raise ContractError("vote certification needs a prediction tensor")
    counts = clean_prediction.values.reshape(-1, clean_prediction.classes).sum(axis=0)
    if argmax_low(counts) != true_label:
        return False
    second = np.delete(counts, true_label).max() if len(counts) > 1 else 0
    return bool(counts[true_label] - second > 2 * k_corrupted)

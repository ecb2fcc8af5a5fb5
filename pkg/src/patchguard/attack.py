"""Empirical adversaries.

``pgd_patch_attack`` optimizes patch pixels against the trained model.
``worst_case_feature_attack`` writes the analytic worst case directly into
the feature tensor, which is what the certification bounds reason about.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .aggregate import MaskingConfig, detect_index, masked_evidence_batch
from .geometry import PatchSpec
from .model import (
    PatchEnsembleModel,
    as_batch,
    backward,
    cross_entropy,
    forward,
    logits_to_kind,
    softmax,
    softmax_minus_onehot,
)
from .tensors import (
    ClipBounds,
    ContractError,
    FeatureTensor,
    ImageTensor,
    TanhClip,
    Window,
    enumerate_windows,
    masked_sum,
)


class AttackDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"attack gradient became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 500
    step_size: float = 0.05
    locations: int = 5
    targeted: Optional[int] = None
    seed: int = 0
    exhaustive: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.locations < 1 or self.step_size <= 0:
            raise ContractError("steps must be >= 0, locations and step size positive")


@dataclass(frozen=True)
class AttackResult:
    success: bool
    adversarial_image: ImageTensor
    anchor: Tuple[int, int]
    final_loss: float


def _anchors(patch: PatchSpec, rows: int, cols: int, config: AttackConfig, rng) -> np.ndarray:
    if patch.anchor is not None:
        return np.array([patch.anchor])
    grid = np.array([(r, c) for r in range(rows - patch.prows + 1) for c in range(cols - patch.pcols + 1)])
    if config.exhaustive or config.locations >= len(grid):
        return grid
    return grid[np.sort(rng.choice(len(grid), size=config.locations, replace=False))]


def _clip_grad(bounds, z: np.ndarray) -> np.ndarray:
    if isinstance(bounds, TanhClip):
        t = np.tanh(bounds.scale * z + bounds.shift)
        return bounds.scale * (1.0 - t * t)
    inside = z > bounds.lo
    if bounds.hi is not None:
        inside &= z < bounds.hi
    return inside.astype(np.float64)


def _pipeline(model: PatchEnsembleModel, x: np.ndarray, defense: Optional[MaskingConfig], kind: str):
    """Predictions, surrogate aggregate scores and the pieces needed to differentiate them."""
    patches, hidden, z = forward(model, x)
    B, cells, N = z.shape
    fr, fc = model.geom.feature_shape
    if defense is None:
        return np.argmax(z.mean(axis=1), axis=1), z.mean(axis=1), (patches, hidden, z, None, None)
    # evaluation uses the true defended pipeline on the requested feature kind
    u = logits_to_kind(z, kind)
    grids = np.moveaxis(defense.bounds.apply(u).reshape(B, fr, fc, N), 3, 1)  # (B, N, fr, fc)
    pred = np.argmax(masked_evidence_batch(grids, defense), axis=1)
    # surrogate: clipped, detection-masked sum of a differentiable feature
    feat = z if kind == "logits" else softmax(z)
    sur = np.moveaxis(defense.bounds.apply(feat).reshape(B, fr, fc, N), 3, 1)
    idx = detect_index(sur, defense.threshold, defense.mask_shape)
    masks = np.stack([w.mask(fr, fc) for w in enumerate_windows(fc, fr, *defense.mask_shape)])
    keep = np.where(idx[..., None, None] >= 0, 1.0 - masks[np.maximum(idx, 0)], 1.0)
    keep = np.moveaxis(keep, 1, 3).reshape(B, cells, N)
    scores = (defense.bounds.apply(feat) * keep).sum(axis=1) / cells
    return pred, scores, (patches, hidden, z, feat, keep)


def _score_grad(model, defense, kind, parts, g_scores):
    patches, hidden, z, feat, keep = parts
    cells = z.shape[1]
    if defense is None:
        return g_scores[:, None, :] / cells * np.ones_like(z)
    g_feat = g_scores[:, None, :] * keep / cells * _clip_grad(defense.bounds, feat)
    if kind == "logits":
        return g_feat
    # softmax Jacobian per cell
    return feat * (g_feat - (g_feat * feat).sum(axis=2, keepdims=True))


def pgd_patch_attack(
    model: PatchEnsembleModel,
    image,
    true_label: int,
    patch: PatchSpec,
    config: AttackConfig = AttackConfig(),
    defense: Optional[MaskingConfig] = None,
    kind: str = "logits",
) -> AttackResult:
    """Sign-gradient patch attack from several anchors, run as one batch.

    Without ``defense`` the target is the mean-logits pipeline. With it, the
    gradient comes from the clipped sum with each step's detected windows
    held fixed, and success is judged by real robust masking on ``kind``
    features. An anchor stops updating as soon as it succeeds.
    """
    px = image.pixels if isinstance(image, ImageTensor) else np.asarray(image, dtype=np.float64)
    clean = as_batch(model, px)[0]
    rows, cols = clean.shape[:2]
    PatchSpec(patch.prows, patch.pcols).check_fits(model.geom)
    if patch.anchor is not None:
        patch.check_fits(model.geom)
    rng = np.random.default_rng(config.seed)
    anchors = _anchors(patch, rows, cols, config, rng)
    B = len(anchors)
    region = np.zeros((B,) + clean.shape, dtype=bool)
    for b, (r, c) in enumerate(anchors):
        region[b, r : r + patch.prows, c : c + patch.pcols] = True
    x = np.broadcast_to(clean, region.shape).copy()
    x[region] = rng.uniform(0.0, 1.0, size=int(region.sum()))

    target = config.targeted
    labels = np.full(B, true_label if target is None else target)
    sign = 1.0 if target is None else -1.0  # ascend true-class loss, or descend target loss
    done = np.zeros(B, dtype=bool)
    final = x.copy()
    losses = np.zeros(B)
    for step in range(config.steps + 1):
        pred, scores, parts = _pipeline(model, x, defense, kind)
        loss = cross_entropy(scores, labels)
        hit = pred != true_label if target is None else pred == target
        fresh = ~done
        final[fresh] = x[fresh]
        losses[fresh] = loss[fresh]
        done |= hit
        if done.all() or step == config.steps:
            break
        g = softmax_minus_onehot(scores, labels)
        gz = _score_grad(model, defense, kind, parts, g)
        _, dx = backward(model, x, parts[0], parts[1], gz, input_grad=True)
        if not np.all(np.isfinite(dx)):
            raise AttackDiverged(step)
        moving = region & ~done[:, None, None, None]
        x = np.where(moving, np.clip(x + sign * config.step_size * np.sign(dx), 0.0, 1.0), x)

    if done.any():
        best = int(np.flatnonzero(done)[0])
    else:
        best = int(np.argmax(sign * losses))
    return AttackResult(bool(done[best]), ImageTensor(final[best]), tuple(int(v) for v in anchors[best]), float(losses[best]))


# --- feature-space worst case ---------------------------------------------


def _lower_value(config: MaskingConfig) -> float:
    return config.bounds.lo if isinstance(config.bounds, ClipBounds) else 0.0


def worst_case_feature_attack(
    clean_features: FeatureTensor,
    true_label: int,
    window: Window,
    config: MaskingConfig,
    target: Optional[int] = None,
    case: Optional[str] = None,
) -> FeatureTensor:
    """Analytic feature-space adversary confined to ``window``.

    The true class gets the clip floor inside the window. For logits, the
    target class gets either a value large enough that detection removes
    exactly the malicious window (``case="I"``), or the largest in-window
    total that stays at the detection threshold (``case="IV"``). With
    ``case=None`` both are built and the one giving the target more masked
    evidence is returned. Prediction and confidence tensors get one-hot
    target cells. The target defaults to the wrong class with the largest
    outside-window evidence.
    """
    window._check(clean_features.rows, clean_features.cols)
    if not isinstance(config.bounds, ClipBounds):
        raise ContractError("the feature-space worst case assumes interval clipping")
    if case not in (None, "I", "IV"):
        raise ContractError(f"unknown case {case!r}")
    n = clean_features.classes
    clipped = config.bounds.apply(clean_features.values)
    outside = np.array([masked_sum(clipped[:, :, c], window) for c in range(n)])
    if target is None:
        others = [c for c in range(n) if c != true_label]
        if not others:
            raise ContractError("need at least two classes")
        target = max(others, key=lambda c: (outside[c], -c))
    sl = window.slices()

    if clean_features.kind != "logits":
        v = np.array(clean_features.values)
        v[sl] = 0.0
        v[sl + (target,)] = 1.0
        return clean_features.replace_values(v)

    lo = _lower_value(config)
    base = np.array(clean_features.values)
    base[sl] = lo
    t = outside[target]
    T = config.threshold
    candidates = []
    if case in (None, "I"):
        v = base.copy()
        v[sl + (target,)] = t + 1.0
        if config.bounds.hi is not None:
            v[sl + (target,)] = config.bounds.hi
        candidates.append(v)
    if case in (None, "IV"):
        v = base.copy()
        e = t * T / (1.0 - T) if T < 1.0 else t
        if config.bounds.hi is not None:
            e = min(e, config.bounds.hi)
        v[window.row0, window.col0, target] = lo + e
        candidates.append(v)

    def gain(v):
        g = config.bounds.apply(v[:, :, target])
        return float(masked_evidence_batch(g, config))

    best = max(candidates, key=gain)
    return clean_features.replace_values(best)

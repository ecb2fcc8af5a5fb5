"""Dataset-level evaluation routines shared by the CLI and the acceptance tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .aggregate import MaskingConfig, robust_masking
from .attack import AttackConfig, pgd_patch_attack
from .certify import certify_masking, certify_oversized, certify_topk
from .geometry import PatchSpec, RFGeometry, mask_shape
from .model import LabeledDataset, PatchEnsembleModel, TrainConfig, extract_features, local_logits, train, train_provable_adv

log = logging.getLogger(__name__)

CERTIFY_HEADER = [
    "index", "label", "prediction", "insecure_prediction", "correct", "certified", "robust",
    "detected", "true_lower", "wrong_upper",
]
ATTACK_HEADER = [
    "index", "label", "certified", "undefended_success", "defended_success",
    "defended_prediction", "anchor_row", "anchor_col", "final_loss",
]


@dataclass(frozen=True)
class Evaluation:
    clean_accuracy: float
    provable_accuracy: float
    detection_fp: float
    topk: Tuple[float, ...]
    count: int


def shapes_for(geom: RFGeometry, patch_fraction: float, mask_fraction: Optional[float] = None):
    """Patch, malicious window shape and deployed mask shape for area fractions of the image."""
    patch = PatchSpec.from_area_fraction(patch_fraction, geom.image_rows, geom.image_cols)
    malicious = mask_shape(patch, geom)
    if mask_fraction is None or mask_fraction == patch_fraction:
        return patch, malicious, malicious
    big = PatchSpec.from_area_fraction(mask_fraction, geom.image_rows, geom.image_cols)
    deployed = mask_shape(big, geom)
    deployed = (max(deployed[0], malicious[0]), max(deployed[1], malicious[1]))
    return patch, malicious, deployed


def certify_dataset(
    model: PatchEnsembleModel,
    data: LabeledDataset,
    masking: MaskingConfig,
    malicious: Tuple[int, int],
    kind: str = "logits",
    topk_max: int = 1,
) -> List[list]:
    """One row per image, in index order, with the columns of ``CERTIFY_HEADER`` plus ``cert_k*``."""
    rows = []
    logits = local_logits(model, data.images) if len(data) else None
    oversized = tuple(malicious) != masking.mask_shape
    for i in range(len(data)):
        y = int(data.labels[i])
        f = extract_features(model, data.images[i], kind)
        out = robust_masking(f, masking)
        if oversized:
            cert = certify_oversized(f, y, malicious, masking.mask_shape, masking)
        else:
            cert = certify_masking(f, y, masking)
        correct = out.predicted == y
        upper = np.nanmax(np.where(np.isnan(cert.wrong_upper), -np.inf, cert.wrong_upper))
        row = [
            i, y, out.predicted, int(np.argmax(logits[i].mean(axis=(0, 1)))), correct, cert.certified,
            correct and cert.certified, out.detected_windows[out.predicted] is not None,
            cert.true_lower, upper,
        ]
        for k in range(2, topk_max + 1):
            row.append(certify_topk(f, y, masking, k, malicious_shape=malicious))
        rows.append(row)
    return rows


def certify_header(topk_max: int = 1) -> List[str]:
    return CERTIFY_HEADER + [f"cert_k{k}" for k in range(2, topk_max + 1)]


def summarize(rows: Sequence[Sequence], topk_max: int = 1) -> Evaluation:
    if not rows:
        return Evaluation(float("nan"), float("nan"), float("nan"), (), 0)
    a = np.array([[float(v) for v in r[4:8]] for r in rows])
    topk = [float(a[:, 2].mean())]
    for k in range(2, topk_max + 1):
        topk.append(float(np.mean([float(r[len(CERTIFY_HEADER) + k - 2]) for r in rows])))
    return Evaluation(float(a[:, 0].mean()), float(a[:, 2].mean()), float(a[:, 3].mean()), tuple(topk), len(rows))


def evaluate(model, data, masking, malicious, kind="logits", topk_max=1) -> Evaluation:
    return summarize(certify_dataset(model, data, masking, malicious, kind, topk_max), topk_max)


def attack_dataset(
    model: PatchEnsembleModel,
    data: LabeledDataset,
    patch: PatchSpec,
    masking: MaskingConfig,
    malicious: Tuple[int, int],
    attack: AttackConfig,
    kind: str = "logits",
    only_certified: bool = False,
) -> List[list]:
    """PGD against the undefended and defended pipelines, one row per attacked image."""
    rows = []
    oversized = tuple(malicious) != masking.mask_shape
    for i in range(len(data)):
        y = int(data.labels[i])
        f = extract_features(model, data.images[i], kind)
        if oversized:
            cert = certify_oversized(f, y, malicious, masking.mask_shape, masking)
        else:
            cert = certify_masking(f, y, masking)
        certified = cert.certified and robust_masking(f, masking).predicted == y
        if only_certified and not certified:
            continue
        cfg = AttackConfig(attack.steps, attack.step_size, attack.locations, attack.targeted, attack.seed + i, attack.exhaustive)
        plain = pgd_patch_attack(model, data.images[i], y, patch, cfg)
        res = pgd_patch_attack(model, data.images[i], y, patch, cfg, defense=masking, kind=kind)
        adv = extract_features(model, res.adversarial_image, kind)
        rows.append([
            i, y, certified, plain.success, res.success, robust_masking(adv, masking).predicted,
            res.anchor[0], res.anchor[1], res.final_loss,
        ])
    return rows


def attack_summary(rows: Sequence[Sequence]) -> Dict[str, float]:
    def rate(sel, col):
        picked = [r[col] for r in rows if sel(r)]
        return (float(np.mean(picked)) if picked else float("nan")), len(picked)

    out = {}
    for name, sel in (("all", lambda r: True), ("certified", lambda r: r[2]), ("uncertified", lambda r: not r[2])):
        out[f"{name}_undefended"], out[f"{name}_count"] = rate(sel, 3)
        out[f"{name}_defended"], _ = rate(sel, 4)
    return out


def diagnose_dataset(
    model: PatchEnsembleModel,
    data: LabeledDataset,
    patch: PatchSpec,
    attack: AttackConfig,
    bins: int = 20,
):
    """Incorrect local prediction rates and local-logit histograms, clean versus attacked.

    The attacked images come from the PGD attack on the undefended pipeline.
    The histogram compares the true class's local logits on clean images with
    the adversarial class's local logits on attacked images.
    """
    clean_z = local_logits(model, data.images)
    adv_images = []
    adv_class = []
    for i in range(len(data)):
        y = int(data.labels[i])
        cfg = AttackConfig(attack.steps, attack.step_size, attack.locations, attack.targeted, attack.seed + i, attack.exhaustive)
        res = pgd_patch_attack(model, data.images[i], y, patch, cfg)
        adv_images.append(res.adversarial_image.pixels)
        z = local_logits(model, res.adversarial_image.pixels)[0].mean(axis=(0, 1))
        z[y] = -np.inf
        adv_class.append(int(np.argmax(z)))
    adv_z = local_logits(model, np.stack(adv_images)) if adv_images else clean_z
    labels = data.labels
    clean_wrong = float(np.mean(np.argmax(clean_z, axis=3) != labels[:, None, None])) if len(data) else float("nan")
    adv_wrong = float(np.mean(np.argmax(adv_z, axis=3) != labels[:, None, None])) if len(data) else float("nan")
    true_vals = np.concatenate([clean_z[i, :, :, labels[i]].ravel() for i in range(len(data))]) if len(data) else np.zeros(0)
    att_vals = np.concatenate([adv_z[i, :, :, adv_class[i]].ravel() for i in range(len(data))]) if len(data) else np.zeros(0)
    both = np.concatenate([true_vals, att_vals])
    lo, hi = (float(both.min()), float(both.max())) if both.size else (0.0, 1.0)
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
    h_true, _ = np.histogram(true_vals, edges)
    h_att, _ = np.histogram(att_vals, edges)
    rates = {"clean_incorrect_local": clean_wrong, "attacked_incorrect_local": adv_wrong}
    hist = [[edges[k], edges[k + 1], int(h_true[k]), int(h_att[k])] for k in range(bins)]
    return rates, hist, (true_vals, att_vals)


def train_pair(train_set: LabeledDataset, geom: RFGeometry, config: TrainConfig):
    """A conventionally trained model and its provably adversarially trained fine-tune."""
    plain = train(train_set, geom, config)
    adv = train_provable_adv(train_set, geom, config, init=plain)
    return plain, adv

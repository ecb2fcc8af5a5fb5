"""Directional checks on the desk-scale experiment (shared session fixture)."""

import numpy as np

from patchguard.aggregate import MaskingConfig
from patchguard.experiment import evaluate, shapes_for


def test_oversized_mask_beats_patch_bound_of_mask_size(desk):
    # 1%-area patch, 3%-area mask: the tighter bound should certify at least
    # as much as treating the whole mask as the malicious window
    _, small, big = shapes_for(desk.geom, 0.01, 0.03)
    assert small == (3, 3) and big == (4, 4)
    oversized = evaluate(desk.adv, desk.test, MaskingConfig(big), small)
    as_patch = evaluate(desk.adv, desk.test, MaskingConfig(big), big)
    assert oversized.provable_accuracy >= as_patch.provable_accuracy
    assert oversized.clean_accuracy == as_patch.clean_accuracy


def test_threshold_sweep_directions(desk):
    runs = [evaluate(desk.adv, desk.test, MaskingConfig(desk.mask, t), desk.malicious) for t in (0.2, 0.4, 0.6, 0.8)]
    provable = [r.provable_accuracy for r in runs]
    fp = [r.detection_fp for r in runs]
    assert all(b <= a for a, b in zip(provable, provable[1:]))
    # the rate saturates at 1 for small T and at 0 for large T, so ask for a
    # non-increasing sequence with an overall drop
    assert all(b <= a for a, b in zip(fp, fp[1:]))
    assert fp[-1] < fp[0]


def test_larger_masks_cost_clean_accuracy(desk):
    clean = []
    for frac in (0.01, 0.02, 0.03):
        _, malicious, mask = shapes_for(desk.geom, frac)
        clean.append(evaluate(desk.adv, desk.test, MaskingConfig(mask), malicious).clean_accuracy)
    assert all(b <= a for a, b in zip(clean, clean[1:]))
    assert np.isfinite(clean).all()

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchguard.aggregate import MaskingConfig, robust_masking
from patchguard.attack import AttackConfig, pgd_patch_attack, worst_case_feature_attack
from patchguard.data import synthetic_dataset
from patchguard.geometry import PatchSpec, RFGeometry
from patchguard.model import TrainConfig, predict_insecure, train
from patchguard.tensors import ClipBounds, ContractError, FeatureTensor, Window, masked_sum

GEOM = RFGeometry.square(5, 3, 14)


@pytest.fixture(scope="module")
def small():
    data = synthetic_dataset(60, seed=4, classes=3, size=14)
    model = train(data, GEOM, TrainConfig(learning_rate=0.05, epochs=3, hidden_units=8))
    return model, data


def outside_patch(result, anchor, patch):
    keep = np.ones(result.shape, dtype=bool)
    keep[anchor[0] : anchor[0] + patch.prows, anchor[1] : anchor[1] + patch.pcols] = False
    return keep


def test_patch_containment_and_range(small):
    model, data = small
    patch = PatchSpec(3, 4)
    for i in range(4):
        res = pgd_patch_attack(model, data.images[i], int(data.labels[i]), patch, AttackConfig(steps=20, seed=i))
        adv = res.adversarial_image.pixels
        keep = outside_patch(adv, res.anchor, patch)
        assert np.array_equal(adv[keep], data.images[i][keep])
        assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_zero_steps_is_a_single_random_fill(small):
    model, data = small
    patch = PatchSpec(2, 2, anchor=(5, 6))
    res = pgd_patch_attack(model, data.images[0], int(data.labels[0]), patch, AttackConfig(steps=0, seed=3))
    rng = np.random.default_rng(3)
    fill = rng.uniform(0.0, 1.0, size=4)
    adv = res.adversarial_image.pixels
    assert res.anchor == (5, 6)
    assert np.array_equal(adv[5:7, 6:8, 0].reshape(-1), fill)
    assert res.success == (predict_insecure(model, adv) != data.labels[0])


def test_attack_is_deterministic(small):
    model, data = small
    cfg = AttackConfig(steps=15, seed=11)
    defense = MaskingConfig((2, 2))
    a = pgd_patch_attack(model, data.images[2], int(data.labels[2]), PatchSpec(3, 3), cfg, defense=defense)
    b = pgd_patch_attack(model, data.images[2], int(data.labels[2]), PatchSpec(3, 3), cfg, defense=defense)
    assert (a.success, a.anchor, a.final_loss) == (b.success, b.anchor, b.final_loss)
    assert np.array_equal(a.adversarial_image.pixels, b.adversarial_image.pixels)


def test_success_matches_defended_prediction(small):
    model, data = small
    defense = MaskingConfig((2, 2))
    from patchguard.model import extract_features

    for i in range(3):
        y = int(data.labels[i])
        res = pgd_patch_attack(model, data.images[i], y, PatchSpec(3, 3), AttackConfig(steps=10, seed=i), defense=defense)
        pred = robust_masking(extract_features(model, res.adversarial_image), defense).predicted
        assert res.success == (pred != y)


def test_targeted_attack_reports_target_hits(small):
    model, data = small
    y = int(data.labels[0])
    target = (y + 1) % 3
    res = pgd_patch_attack(model, data.images[0], y, PatchSpec(6, 6), AttackConfig(steps=60, targeted=target))
    assert res.success == (predict_insecure(model, res.adversarial_image) == target)


def test_bad_config():
    with pytest.raises(ContractError):
        AttackConfig(locations=0)
    with pytest.raises(ContractError):
        AttackConfig(step_size=0.0)


# --- worst-case feature adversary -------------------------------------------


def grid_with_outside(t_cells, classes=2):
    v = np.zeros((3, 3, classes))
    v[:, :, 0] = 2.0  # true class everywhere
    for (i, j), val in t_cells.items():
        v[i, j, 1] = val
    return FeatureTensor(v)


def test_case_one_at_zero_threshold_leaves_outside_evidence():
    f = grid_with_outside({(2, 2): 1.0, (2, 1): 0.5})
    w = Window(0, 0, 2, 2)
    cfg = MaskingConfig((2, 2), 0.0)
    adv = worst_case_feature_attack(f, 0, w, cfg, target=1)
    s = robust_masking(adv, cfg).per_class_evidence[1]
    t = masked_sum(ClipBounds().apply(f.class_slice(1)), w)
    assert s == t == 1.5
    # only the window changed, and the true class there sits at the clip floor
    changed = np.any(adv.values != f.values, axis=2)
    assert not changed[2, :].any() and not changed[:, 2].any()
    assert np.all(adv.values[0:2, 0:2, 0] == 0.0)


def test_case_four_attains_the_bound():
    # outside evidence spread thinly so no window other than the malicious one can cross the threshold
    v = np.zeros((1, 6, 2))
    v[0, :, 0] = 3.0
    v[0, 2:, 1] = 1.0
    f = FeatureTensor(v)
    w = Window(0, 0, 1, 1)
    cfg = MaskingConfig((1, 1), 0.5)
    adv = worst_case_feature_attack(f, 0, w, cfg, target=1, case="IV")
    t = 4.0
    bound = t / (1 - 0.5)
    s = robust_masking(adv, cfg).per_class_evidence[1]
    assert abs(s - bound) <= 1e-9
    assert robust_masking(adv, cfg).detected_windows[1] is None
    # the default search picks the same construction
    best = worst_case_feature_attack(f, 0, w, cfg, target=1)
    assert np.array_equal(best.values, adv.values)


def test_zero_outside_evidence_gives_nothing():
    f = grid_with_outside({})
    w = Window(1, 1, 1, 1)
    for T in (0.0, 0.5):
        cfg = MaskingConfig((1, 1), T)
        adv = worst_case_feature_attack(f, 0, w, cfg, target=1)
        assert robust_masking(adv, cfg).per_class_evidence[1] == 0.0


def test_prediction_tensor_worst_case_is_one_hot():
    f = FeatureTensor(np.eye(2)[np.zeros((2, 3), dtype=int)], "prediction")
    adv = worst_case_feature_attack(f, 0, Window(0, 1, 2, 1), MaskingConfig((2, 1)))
    assert adv.kind == "prediction"
    assert adv.values[:, 1, 1].tolist() == [1.0, 1.0]


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.0, 0.25, 0.5, 0.75]))
def test_worst_case_respects_outside_bound(seed, T):
    rng = np.random.default_rng(seed)
    rows, cols, n = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 4))
    v = rng.integers(-2, 9, size=(rows, cols, n)) / 4.0
    f = FeatureTensor(v)
    shape = (int(rng.integers(1, rows + 1)), int(rng.integers(1, cols + 1)))
    w = Window(int(rng.integers(0, rows - shape[0] + 1)), int(rng.integers(0, cols - shape[1] + 1)), *shape)
    cfg = MaskingConfig(shape, T)
    y = int(rng.integers(n))
    adv = worst_case_feature_attack(f, y, w, cfg)
    outside = ~w.mask(rows, cols).astype(bool)
    assert np.array_equal(adv.values[outside], f.values[outside])
    s = robust_masking(adv, cfg).per_class_evidence
    clipped = ClipBounds().apply(v)
    for c in range(n):
        assert s[c] <= masked_sum(clipped[:, :, c], w) / (1 - T) + 1e-9


def test_undefended_desk_model_is_vulnerable(desk):
    hits = 0
    for i in range(len(desk.test)):
        cfg = AttackConfig(seed=i)
        hits += pgd_patch_attack(desk.plain, desk.test.images[i], int(desk.test.labels[i]), desk.patch, cfg).success
    assert len(desk.test) == 200
    assert hits / 200 > 0.5

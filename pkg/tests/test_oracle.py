import numpy as np
import pytest

from patchguard.aggregate import MaskingConfig
from patchguard.oracle import (
    BudgetExceeded,
    OracleScenario,
    classify_case,
    enumerate_adversaries,
    oversized_soundness_report,
    required_evaluations,
    soundness_report,
    verify_lemma1,
    verify_lemma2,
)
from patchguard.tensors import ClipBounds, ContractError, FeatureTensor, Window


def scenario(rows, cols, classes, kind, shape, T=0.0, levels=(), budget=10**7):
    cfg = MaskingConfig(shape, T, ClipBounds(0.0, None))
    return OracleScenario(rows, cols, classes, kind, shape, cfg, levels, budget)


def test_undetected_case_attains_outside_bound():
    v = np.zeros((1, 6, 2))
    v[0, :, 0] = 3.0
    v[0, 2:, 1] = 1.0
    clean = FeatureTensor(v)
    scen = scenario(1, 6, 2, "logits", (1, 1), T=0.5)
    check = verify_lemma1(clean, Window(0, 0, 1, 1), scen.config, scen, cls=1)
    assert check.holds
    assert check.bound == 8.0
    assert abs(check.max_observed - check.bound) <= 1e-9
    assert check.attained_case4


def test_zero_threshold_bound_is_outside_sum():
    v = np.array([[[1.0, 2.0], [0.5, 0.0]], [[2.0, 1.5], [0.0, 0.25]]])
    clean = FeatureTensor(v)
    scen = scenario(2, 2, 2, "logits", (1, 1))
    max_obs, bound, holds = verify_lemma1(clean, Window(0, 0, 1, 1), scen.config, scen, cls=1)
    assert holds and bound == 1.75 and max_obs == 1.75


def test_outside_bound_rejects_mismatched_window():
    clean = FeatureTensor(np.ones((3, 3, 2)))
    scen = scenario(3, 3, 2, "logits", (1, 1))
    with pytest.raises(ContractError):
        verify_lemma1(clean, Window(0, 0, 2, 2), scen.config, scen)


def test_oversized_bound_holds_on_small_case():
    v = np.arange(16, dtype=float).reshape(4, 4, 1) / 4.0
    clean = FeatureTensor(np.concatenate([v, v[::-1]], axis=2))
    scen = scenario(4, 4, 2, "logits", (1, 1), T=0.5)
    assert verify_lemma2(clean, (1, 1), (2, 2), scen.config, scen, window=Window(1, 2, 1, 1))


def test_budget_is_enforced_before_enumerating():
    clean = FeatureTensor(np.eye(3)[np.zeros((3, 3), dtype=int)], "prediction")
    scen = scenario(3, 3, 3, "prediction", (3, 3), budget=100)
    with pytest.raises(BudgetExceeded) as info:
        next(enumerate_adversaries(clean, Window(0, 0, 3, 3), scen))
    assert info.value.required == 3**9


def test_enumeration_counts():
    clean = FeatureTensor(np.eye(2)[np.zeros((2, 2), dtype=int)], "prediction")
    scen = scenario(2, 2, 2, "prediction", (1, 2))
    w = Window(0, 0, 1, 2)
    advs = list(enumerate_adversaries(clean, w, scen))
    assert len(advs) == 4 == required_evaluations(clean, w, scen)
    assert len({a.values.tobytes() for a in advs}) == 4

    logits = FeatureTensor(np.ones((2, 2, 2)))
    scen = scenario(2, 2, 2, "logits", (1, 1), levels=(0.5,))
    advs = list(enumerate_adversaries(logits, Window(1, 1, 1, 1), scen))
    # levels {0, 0.5, 10} per class, one cell, two classes
    assert len(advs) == 9
    assert required_evaluations(logits, Window(1, 1, 1, 1), scen) == 6


def test_scenario_limits():
    with pytest.raises(ContractError):
        scenario(7, 3, 2, "logits", (1, 1))
    with pytest.raises(ContractError):
        scenario(3, 3, 5, "logits", (1, 1))
    with pytest.raises(ContractError):
        scenario(3, 3, 2, "confidence", (1, 1))


def test_zero_trials():
    r = soundness_report(0, 0)
    assert (r.trials, r.certified, r.violations) == (0, 0, 0)


def test_sound_rules_have_no_violations():
    r = soundness_report(3, 150)
    assert r.trials == 150 and r.certified > 0 and r.violations == 0


def test_literal_tie_rule_is_caught():
    r = soundness_report(0, 400, tie_rule="literal", kinds=("prediction",), thresholds=(0.0,))
    assert r.violations > 0


def test_literal_lower_bound_is_caught():
    r = soundness_report(0, 400, literal_lower=True, kinds=("logits",), thresholds=(0.5,))
    assert r.violations > 0


def test_oversized_mask_is_sound():
    r = oversized_soundness_report(1, 100)
    assert r.certified > 0 and r.violations == 0


@pytest.mark.parametrize(
    "hot, threshold, expected",
    [
        ((1, 2), 0.0, "I"),
        ((3, 4), 0.0, "II"),
        ((0,), 0.0, "III"),
        (None, 0.9, "IV"),
    ],
)
def test_classify_case(hot, threshold, expected):
    v = np.full((1, 5, 1), 0.1)
    if hot is not None:
        for c in hot:
            v[0, c, 0] = 5.0
    clean = FeatureTensor(np.ones((1, 5, 1)))
    cfg = MaskingConfig((1, 2), threshold)
    assert classify_case(clean, FeatureTensor(v), cfg, Window(0, 1, 1, 2), 0) == expected

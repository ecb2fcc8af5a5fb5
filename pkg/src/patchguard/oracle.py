"""Exhaustive feature-space adversaries on small instances.

The adversary controls every feature value inside one malicious window.
Prediction tensors are enumerated over every one-hot assignment of the
window cells. Logits tensors are enumerated over a finite level set per
(cell, class). Because logits slices of different classes are chosen
independently, the maximum (or minimum) masked evidence of one class is
found by enumerating that class's slice alone; :func:`enumerate_adversaries`
still yields the full joint stream for callers who want it.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .aggregate import MaskingConfig, argmax_low, detect_index, masked_evidence_batch
from .certify import certify_masking, certify_oversized, defeats
from .tensors import (
    ClipBounds,
    ContractError,
    FeatureTensor,
    Window,
    enumerate_windows,
    masked_sum,
    window_sums,
)

DEFAULT_BUDGET = 10**7
CASES = ("I", "II", "III", "IV")


class BudgetExceeded(ContractError):
    def __init__(self, required: int, budget: int):
        super().__init__(f"enumeration needs {required} evaluations, budget is {budget}")
        self.required = required
        self.budget = budget


@dataclass(frozen=True)
class OracleScenario:
    rows: int
    cols: int
    classes: int
    kind: str
    window_shape: Tuple[int, int]
    config: MaskingConfig
    levels: Tuple[float, ...] = ()
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if self.rows > 6 or self.cols > 6:
            raise ContractError("oracle grids are limited to 6x6")
        if self.classes > 4:
            raise ContractError("oracle scenarios are limited to 4 classes")
        if self.window_shape[0] > 3 or self.window_shape[1] > 3:
            raise ContractError("oracle windows are limited to 3x3")
        if self.kind not in ("prediction", "logits"):
            raise ContractError("oracle supports prediction and logits tensors")


def _clip_cap(clean: FeatureTensor, config: MaskingConfig) -> float:
    bounds = config.bounds
    if isinstance(bounds, ClipBounds) and bounds.hi is not None:
        return float(bounds.hi)
    top = float(np.max(clean.values))
    return 10.0 * top if top > 0 else 10.0


def class_levels(clean: FeatureTensor, cls: int, window: Window, scenario: OracleScenario) -> np.ndarray:
    """Candidate in-window values for one class slice."""
    if scenario.kind == "prediction":
        return np.array([0.0, 1.0])
    cfg = scenario.config
    lo = cfg.bounds.lo if isinstance(cfg.bounds, ClipBounds) else 0.0
    levels = {float(lo), _clip_cap(clean, cfg)}
    levels.update(float(v) for v in scenario.levels)
    T = cfg.threshold
    if 0.0 < T < 1.0:
        t = masked_sum(cfg.bounds.apply(clean.class_slice(cls)), window)
        levels.add(t * T / (1.0 - T))
    return np.array(sorted(levels))


def _slice_count(levels: int, cells: int) -> int:
    return levels**cells


def required_evaluations(clean: FeatureTensor, window: Window, scenario: OracleScenario) -> int:
    cells = window.cells
    if scenario.kind == "prediction":
        return clean.classes**cells
    return sum(_slice_count(len(class_levels(clean, c, window, scenario)), cells) for c in range(clean.classes))


def _check_budget(required: int, budget: int) -> None:
    if required > budget:
        raise BudgetExceeded(required, budget)


def enumerate_adversaries(clean: FeatureTensor, window: Window, scenario: OracleScenario) -> Iterator[FeatureTensor]:
    """Every adversarial tensor the scenario admits for one malicious window."""
    window._check(clean.rows, clean.cols)
    cells = [(i, j) for i in range(window.row0, window.row0 + window.wrows) for j in range(window.col0, window.col0 + window.wcols)]
    if scenario.kind == "prediction":
        _check_budget(clean.classes ** len(cells), scenario.budget)
        for labels in itertools.product(range(clean.classes), repeat=len(cells)):
            v = np.array(clean.values)
            for (i, j), lab in zip(cells, labels):
                v[i, j, :] = 0.0
                v[i, j, lab] = 1.0
            yield FeatureTensor(v, "prediction")
        return
    per_class = [class_levels(clean, c, window, scenario) for c in range(clean.classes)]
    total = 1
    for lv in per_class:
        total *= len(lv) ** len(cells)
    _check_budget(total, scenario.budget)
    choices = [lv for lv in per_class for _ in cells]
    for combo in itertools.product(*choices):
        v = np.array(clean.values)
        it = iter(combo)
        for c in range(clean.classes):
            for i, j in cells:
                v[i, j, c] = next(it)
        yield FeatureTensor(v, "logits")


def slice_adversaries(clean: FeatureTensor, cls: int, window: Window, scenario: OracleScenario) -> np.ndarray:
    """All adversarial versions of one clipped class slice, shape (B, rows, cols)."""
    levels = class_levels(clean, cls, window, scenario)
    cells = window.cells
    _check_budget(_slice_count(len(levels), cells), scenario.budget)
    base = scenario.config.bounds.apply(clean.class_slice(cls))
    grid = np.array(list(itertools.product(levels, repeat=cells)), dtype=np.float64)
    out = np.broadcast_to(base, (len(grid),) + base.shape).copy()
    out[:, window.row0 : window.row0 + window.wrows, window.col0 : window.col0 + window.wcols] = grid.reshape(
        len(grid), window.wrows, window.wcols
    )
    return scenario.config.bounds.apply(out)


def prediction_adversaries(clean: FeatureTensor, window: Window, scenario: OracleScenario) -> np.ndarray:
    """All one-hot rewrites of the window, shape (B, rows, cols, classes)."""
    n = clean.classes
    _check_budget(n**window.cells, scenario.budget)
    labels = np.array(list(itertools.product(range(n), repeat=window.cells)))
    onehot = np.eye(n)[labels].reshape(len(labels), window.wrows, window.wcols, n)
    out = np.broadcast_to(clean.values, (len(labels),) + clean.values.shape).copy()
    out[:, window.row0 : window.row0 + window.wrows, window.col0 : window.col0 + window.wcols, :] = onehot
    return out


def _case_codes(idx: np.ndarray, window: Window, rows: int, cols: int, shape: Tuple[int, int]) -> np.ndarray:
    wins = enumerate_windows(cols, rows, *shape)
    code = np.empty(len(wins), dtype=np.int64)
    for k, v in enumerate(wins):
        if v.covers(window):
            code[k] = 0
        elif v.intersects(window):
            code[k] = 2
        else:
            code[k] = 1
    return np.where(idx < 0, 3, code[np.maximum(idx, 0)])


def classify_case(clean: FeatureTensor, adversarial: FeatureTensor, config: MaskingConfig, window: Window, cls: int) -> str:
    """Which detection outcome an adversarial slice realizes for one class.

    I: the detected window is (or covers) the malicious window.
    II: a disjoint benign window is detected. III: partial overlap.
    IV: nothing is detected.
    """
    if clean.values.shape != adversarial.values.shape:
        raise ContractError("clean and adversarial tensors differ in shape")
    sl = config.bounds.apply(adversarial.class_slice(cls))
    idx = detect_index(sl, config.threshold, config.mask_shape)
    code = _case_codes(np.array([idx]), window, clean.rows, clean.cols, config.mask_shape)[0]
    return CASES[int(code)]


@dataclass
class BoundCheck:
    max_observed: float
    bound: float
    holds: bool
    cls: int
    cases: Counter = field(default_factory=Counter)
    attained_case4: bool = False

    def __iter__(self):
        return iter((self.max_observed, self.bound, self.holds))


def _bound_check(
    clean: FeatureTensor,
    window: Window,
    config: MaskingConfig,
    scenario: OracleScenario,
    cls: Optional[int],
    bound_window_fn,
) -> BoundCheck:
    classes = range(clean.classes) if cls is None else [cls]
    worst: Optional[BoundCheck] = None
    all_hold = True
    cases: Counter = Counter()
    case4 = False
    scale = 1.0 - config.threshold
    for c in classes:
        clipped = config.bounds.apply(clean.class_slice(c))
        bound = masked_sum(clipped, bound_window_fn(clipped)) / scale
        adv = slice_adversaries(clean, c, window, scenario)
        s = masked_evidence_batch(adv, config)
        idx = detect_index(adv, config.threshold, config.mask_shape)
        codes = _case_codes(idx, window, clean.rows, clean.cols, config.mask_shape)
        cases.update(CASES[k] for k in codes)
        top = float(s.max())
        holds = top <= bound + 1e-9
        all_hold &= holds
        if config.threshold > 0 and bound > 0:
            at = np.abs(s - bound) <= 1e-9
            case4 |= bool(np.any(at & (codes == 3)))
        check = BoundCheck(top, bound, holds, c)
        if worst is None or top - bound > worst.max_observed - worst.bound:
            worst = check
    assert worst is not None
    worst.holds = all_hold
    worst.cases = cases
    worst.attained_case4 = case4
    return worst


def verify_lemma1(
    clean: FeatureTensor,
    window: Window,
    config: MaskingConfig,
    scenario: OracleScenario,
    cls: Optional[int] = None,
) -> BoundCheck:
    """Max masked evidence over all adversaries versus sum-outside-window / (1 - T).

    With ``cls=None`` every class is checked and the class closest to (or
    furthest past) its bound is reported; ``holds`` covers all classes.
    """
    if window.shape != config.mask_shape:
        raise ContractError("the outside-window bound needs the malicious window to match the mask shape")
    if config.threshold >= 1.0:
        raise ContractError("the bound needs T < 1")
    return _bound_check(clean, window, config, scenario, cls, lambda _: window)


def lemma2_window(clipped: np.ndarray, window: Window, mask_shape: Tuple[int, int]) -> Window:
    rows, cols = clipped.shape
    wins = enumerate_windows(cols, rows, *mask_shape)
    sums = window_sums(clipped, mask_shape)
    keys = [k for k, v in enumerate(wins) if v.covers(window)]
    return wins[keys[int(np.argmax(sums[keys]))]]


def verify_lemma2(
    clean: FeatureTensor,
    malicious_shape: Tuple[int, int],
    mask_shape: Tuple[int, int],
    config: MaskingConfig,
    scenario: OracleScenario,
    window: Optional[Window] = None,
) -> bool:
    """The covering-window bound for an oversized mask holds for every malicious
    window, and never exceeds either the bound of the malicious window itself or
    that of any mask window covering it."""
    if mask_shape[0] < malicious_shape[0] or mask_shape[1] < malicious_shape[1]:
        raise ContractError("mask must cover the malicious window")
    cfg = MaskingConfig(tuple(mask_shape), config.threshold, config.bounds)
    windows = [window] if window is not None else enumerate_windows(clean.cols, clean.rows, *malicious_shape)
    scale = 1.0 - cfg.threshold
    for w in windows:
        check = _bound_check(clean, w, cfg, scenario, None, lambda sl, w=w: lemma2_window(sl, w, cfg.mask_shape))
        if not check.holds:
            return False
        for c in range(clean.classes):
            clipped = cfg.bounds.apply(clean.class_slice(c))
            b2 = masked_sum(clipped, lemma2_window(clipped, w, cfg.mask_shape)) / scale
            b1_small = masked_sum(clipped, w) / scale
            covering = [v for v in enumerate_windows(clean.cols, clean.rows, *cfg.mask_shape) if v.covers(w)]
            b1_mask = min(masked_sum(clipped, v) / scale for v in covering)
            if b2 > b1_mask + 1e-9 or b2 > b1_small + 1e-9:
                return False
    return True


# --- soundness -------------------------------------------------------------


@dataclass
class SoundnessReport:
    trials: int = 0
    certified: int = 0
    violations: int = 0
    evaluations: int = 0
    examples: List[Tuple[int, Window]] = field(default_factory=list)


def attack_succeeds(
    clean: FeatureTensor,
    true_label: int,
    window: Window,
    scenario: OracleScenario,
    config: Optional[MaskingConfig] = None,
) -> Tuple[bool, int]:
    """Whether any enumerated adversary in ``window`` flips robust masking; also returns the evaluation count."""
    cfg = scenario.config if config is None else config
    if scenario.kind == "prediction":
        adv = prediction_adversaries(clean, window, scenario)
        slices = np.moveaxis(cfg.bounds.apply(adv), 3, 1)  # (B, classes, rows, cols)
        s = masked_evidence_batch(slices, cfg)
        preds = np.argmax(s, axis=1)
        return bool(np.any(preds != true_label)), len(adv)
    # logits: independent slices, so compare extremes per class
    evals = 0
    true_adv = slice_adversaries(clean, true_label, window, scenario)
    lowest = float(masked_evidence_batch(true_adv, cfg).min())
    evals += len(true_adv)
    for c in range(clean.classes):
        if c == true_label:
            continue
        adv = slice_adversaries(clean, c, window, scenario)
        evals += len(adv)
        highest = float(masked_evidence_batch(adv, cfg).max())
        if defeats(highest, lowest, c, true_label, "sound"):
            return True, evals
    return False, evals


def random_scenario(rng: np.random.Generator, kinds=("prediction", "logits"), thresholds=(0.0, 0.5)) -> Tuple[OracleScenario, FeatureTensor, int]:
    """A small random scenario whose clean tensor leans toward a random true label."""
    kind = kinds[int(rng.integers(len(kinds)))]
    rows = int(rng.integers(2, 6))
    cols = int(rng.integers(2, 6))
    classes = int(rng.integers(2, 4)) if kind == "logits" else int(rng.integers(2, 5))
    max_cells = 4 if kind == "logits" else 6
    while True:
        wr = int(rng.integers(1, min(3, rows) + 1))
        wc = int(rng.integers(1, min(3, cols) + 1))
        if wr * wc <= max_cells and wr * wc < rows * cols:
            break
    T = float(thresholds[int(rng.integers(len(thresholds)))])
    true_label = int(rng.integers(classes))
    lean = rng.uniform(0.4, 0.95)
    if kind == "prediction":
        labels = np.where(rng.random((rows, cols)) < lean, true_label, rng.integers(classes, size=(rows, cols)))
        values = np.eye(classes)[labels]
    else:
        # quarter-integer levels keep every sum exact in floating point
        values = rng.integers(-4, 9, size=(rows, cols, classes)).astype(np.float64) / 4.0
        boost = (rng.random((rows, cols)) < lean) * rng.integers(1, 9, size=(rows, cols)) / 4.0
        values[:, :, true_label] += boost
        values[rng.random((rows, cols, classes)) < 0.3] = 0.0
    cfg = MaskingConfig((wr, wc), T, ClipBounds(0.0, None))
    levels = () if kind == "prediction" else (0.5,)
    scen = OracleScenario(rows, cols, classes, kind, (wr, wc), cfg, levels)
    return scen, FeatureTensor(values, kind), true_label


def soundness_report(
    random_seed: int,
    trials: int,
    *,
    tie_rule: str = "sound",
    literal_lower: bool = False,
    kinds=("prediction", "logits"),
    thresholds=(0.0, 0.5),
) -> SoundnessReport:
    """Certify random clean tensors, then try every enumerated adversary in every window."""
    rng = np.random.default_rng(random_seed)
    report = SoundnessReport()
    for _ in range(trials):
        scen, clean, y = random_scenario(rng, kinds, thresholds)
        report.trials += 1
        cert = certify_masking(clean, y, scen.config, tie_rule=tie_rule, literal_lower=literal_lower)
        if not cert.certified:
            continue
        report.certified += 1
        for w in enumerate_windows(clean.cols, clean.rows, *scen.window_shape):
            broken, n = attack_succeeds(clean, y, w, scen)
            report.evaluations += n
            if broken:
                report.violations += 1
                report.examples.append((report.trials - 1, w))
                break
    return report


def verify_soundness(random_seed: int, trials: int, **kwargs) -> int:
    return soundness_report(random_seed, trials, **kwargs).violations


def oversized_soundness_report(random_seed: int, trials: int) -> SoundnessReport:
    """Soundness of the oversized-mask certificate against a smaller malicious window."""
    rng = np.random.default_rng(random_seed)
    report = SoundnessReport()
    while report.trials < trials:
        scen, clean, y = random_scenario(rng)
        mr, mc = scen.window_shape
        grow = (min(mr + int(rng.integers(0, 2)), clean.rows, 3), min(mc + int(rng.integers(0, 2)), clean.cols, 3))
        cfg = MaskingConfig(grow, scen.config.threshold, scen.config.bounds)
        report.trials += 1
        if not certify_oversized(clean, y, (mr, mc), grow, cfg).certified:
            continue
        report.certified += 1
        for w in enumerate_windows(clean.cols, clean.rows, mr, mc):
            broken, n = attack_succeeds(clean, y, w, scen, cfg)
            report.evaluations += n
            if broken:
                report.violations += 1
                report.examples.append((report.trials - 1, w))
                break
    return report


def lemma1_corpus(random_seed: int, count: int) -> Dict[str, object]:
    """Run the outside-window bound oracle over ``count`` random scenarios and tally the outcome."""
    rng = np.random.default_rng(random_seed)
    holds = 0
    attained = 0
    cases: Counter = Counter()
    for _ in range(count):
        scen, clean, _y = random_scenario(rng, thresholds=(0.0, 0.25, 0.5))
        wins = enumerate_windows(clean.cols, clean.rows, *scen.window_shape)
        w = wins[int(rng.integers(len(wins)))]
        check = verify_lemma1(clean, w, scen.config, scen)
        holds += check.holds
        attained += check.attained_case4
        cases.update(check.cases)
    return {"scenarios": count, "holds": holds, "case4_attained": attained, "cases": dict(cases)}


def lemma2_corpus(random_seed: int, count: int) -> Dict[str, int]:
    rng = np.random.default_rng(random_seed)
    holds = 0
    done = 0
    while done < count:
        scen, clean, _y = random_scenario(rng, thresholds=(0.0, 0.25, 0.5))
        mr, mc = scen.window_shape
        grow = (min(mr + 1, clean.rows, 3), min(mc + 1, clean.cols, 3))
        if grow == (mr, mc):
            continue
        wins = enumerate_windows(clean.cols, clean.rows, mr, mc)
        w = wins[int(rng.integers(len(wins)))]
        holds += verify_lemma2(clean, (mr, mc), grow, scen.config, scen, window=w)
        done += 1
    return {"scenarios": count, "holds": holds}

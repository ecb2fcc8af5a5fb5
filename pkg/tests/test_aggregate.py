import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from patchguard.aggregate import (
    MaskingConfig,
    argmax_low,
    cbn_aggregate,
    detect,
    ds_majority,
    masked_evidence_batch,
    mean_aggregate,
    robust_masking,
    vote_counts,
)
from patchguard.tensors import ClipBounds, ContractError, FeatureTensor, TanhClip, Window


def test_argmax_ties_go_low():
    assert argmax_low([1.0, 3.0, 3.0]) == 1
    assert argmax_low([0.0, 0.0]) == 0


def test_detect_picks_first_of_tied_windows():
    g = np.zeros((3, 3))
    g[0, 0] = g[2, 2] = 5.0
    assert detect(g, 0.0, (1, 1)) == Window(0, 0, 1, 1)


def test_detect_threshold_is_strict():
    g = np.array([[1.0, 1.0]])
    # the best 1x1 window holds exactly half of the evidence
    assert detect(g, 0.5, (1, 1)) is None
    assert detect(g, 0.49, (1, 1)) == Window(0, 0, 1, 1)


def test_detect_needs_positive_total_and_threshold_below_one():
    assert detect(np.zeros((2, 2)), 0.0, (1, 1)) is None
    assert detect(np.ones((2, 2)), 1.0, (1, 1)) is None


def test_robust_masking_removes_the_spike():
    v = np.zeros((3, 3, 2))
    v[:, :, 0] = 1.0  # class 0 everywhere
    v[1, 1, 1] = 50.0  # one corrupted cell for class 1
    f = FeatureTensor(v)
    cfg = MaskingConfig((1, 1))
    assert mean_aggregate(f) == 1
    out = robust_masking(f, cfg)
    assert out.predicted == 0
    assert out.per_class_evidence.tolist() == [8.0, 0.0]
    assert out.detected_windows[1] == Window(1, 1, 1, 1)


def test_clip_bounds_bound_the_spike():
    v = np.zeros((1, 4, 2))
    v[0, :, 0] = 1.0
    v[0, 0, 1] = 100.0
    cfg = MaskingConfig((1, 1), threshold=1.0, bounds=ClipBounds(0.0, 2.0))
    assert robust_masking(FeatureTensor(v), cfg).per_class_evidence.tolist() == [4.0, 2.0]


def test_mask_must_fit():
    with pytest.raises(ContractError):
        robust_masking(FeatureTensor(np.zeros((2, 2, 2))), MaskingConfig((3, 1)))
    with pytest.raises(ContractError):
        MaskingConfig((1, 1), threshold=1.5)


def test_vote_counts_and_abstention():
    conf = np.array([[[0.9, 0.1], [0.55, 0.45], [0.2, 0.8]]])
    f = FeatureTensor(conf, "confidence")
    assert vote_counts(f).tolist() == [2, 1]
    assert vote_counts(f, abstain_threshold=0.7).tolist() == [1, 1]
    assert ds_majority(f, abstain_threshold=0.7)[0] == 0
    with pytest.raises(ContractError):
        vote_counts(FeatureTensor(conf))


def test_cbn_needs_logits():
    with pytest.raises(ContractError):
        cbn_aggregate(FeatureTensor(np.full((1, 1, 2), 0.5), "confidence"))


def test_cbn_saturates_large_logits():
    v = np.zeros((1, 3, 2))
    v[0, :, 0] = 40.0
    v[0, 0, 1] = 1e6
    # the huge logit counts at most tanh(.) < 1 while class 0 collects three strong cells
    assert cbn_aggregate(FeatureTensor(v)) == 0
    assert mean_aggregate(FeatureTensor(v)) == 1


slices = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 5), st.integers(2, 5)), elements=st.floats(-3, 6, width=16))


@settings(max_examples=80, deadline=None)
@given(slices, st.sampled_from([0.0, 0.3, 0.5, 1.0]), st.data())
def test_batch_evidence_matches_per_tensor_path(v, threshold, data):
    rows, cols = v.shape[1:]
    shape = (data.draw(st.integers(1, rows)), data.draw(st.integers(1, cols)))
    cfg = MaskingConfig(shape, threshold)
    f = FeatureTensor(np.moveaxis(v, 0, 2))
    out = robust_masking(f, cfg)
    batch = masked_evidence_batch(cfg.bounds.apply(v), cfg)
    assert np.array_equal(batch, out.per_class_evidence)


@settings(max_examples=60, deadline=None)
@given(slices)
def test_threshold_one_is_plain_clipped_sum(v):
    f = FeatureTensor(np.moveaxis(v, 0, 2))
    cfg = MaskingConfig((1, 1), 1.0, TanhClip())
    assert robust_masking(f, cfg).predicted == cbn_aggregate(f)

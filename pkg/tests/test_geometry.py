import itertools

import pytest
from hypothesis import given, settings, strategies as st

from patchguard.geometry import PatchSpec, RFGeometry, affected_cells, mask_shape, window_size
from patchguard.tensors import ContractError, Window


def brute_affected(anchor, patch, geom):
    """Cells whose receptive field shares a pixel with the patch, by direct overlap test."""
    r0, c0 = anchor
    hit = []
    for i, j in itertools.product(range(geom.feature_rows), range(geom.feature_cols)):
        fr, fc, rr, rc = geom.receptive_field(i, j)
        if fr < r0 + patch.prows and r0 < fr + rr and fc < c0 + patch.pcols and c0 < fc + rc:
            hit.append((i, j))
    return hit


def test_feature_grid_of_desk_geometry():
    g = RFGeometry.square(9, 4, 32)
    assert g.feature_shape == (6, 6)
    assert g.receptive_field(5, 5) == (20, 20, 9, 9)


def test_geometry_rejects_oversized_field():
    with pytest.raises(ContractError):
        RFGeometry.square(33, 4, 32)
    with pytest.raises(ContractError):
        RFGeometry(9, 9, 0, 4, 32, 32)


def test_window_size_golden():
    assert window_size(32, 17, 8) == 6
    assert window_size(1, 1, 1) == 1
    with pytest.raises(ContractError):
        window_size(0, 3, 1)


def test_area_fraction_sides():
    assert PatchSpec.from_area_fraction(0.03, 32, 32) == PatchSpec(6, 6)
    assert PatchSpec.from_area_fraction(0.01, 32, 32) == PatchSpec(3, 3)
    assert PatchSpec.from_area_fraction(1.0, 32, 32) == PatchSpec(32, 32)
    with pytest.raises(ContractError):
        PatchSpec.from_area_fraction(0.0, 32, 32)


def test_desk_mask_shapes():
    g = RFGeometry.square(9, 4, 32)
    assert mask_shape(PatchSpec(6, 6), g) == (4, 4)
    assert mask_shape(PatchSpec(3, 3), g) == (3, 3)
    assert mask_shape(PatchSpec(2, 9), g) == (3, 5)
    # clamped to the grid for very large patches
    assert mask_shape(PatchSpec(30, 30), g) == (6, 6)


def test_patch_must_fit():
    g = RFGeometry.square(9, 4, 32)
    with pytest.raises(ContractError):
        mask_shape(PatchSpec(33, 2), g)
    with pytest.raises(ContractError):
        affected_cells((30, 0), PatchSpec(6, 6), g)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 7), st.integers(1, 5), st.integers(1, 8), st.integers(1, 8), st.integers(12, 24), st.integers(12, 24)
)
def test_affected_cells_match_overlap_oracle(rf, stride, ph, pw, rows, cols):
    g = RFGeometry(rf, rf, stride, stride, rows, cols)
    patch = PatchSpec(ph, pw)
    shape = mask_shape(patch, g)
    widest = (0, 0)
    for r0 in range(rows - ph + 1):
        for c0 in range(cols - pw + 1):
            hit = brute_affected((r0, c0), patch, g)
            w = affected_cells((r0, c0), patch, g)
            if not hit:
                assert w is None
                continue
            rs = [i for i, _ in hit]
            cs = [j for _, j in hit]
            assert w == Window(min(rs), min(cs), max(rs) - min(rs) + 1, max(cs) - min(cs) + 1)
            assert len(hit) == w.cells
            assert w.wrows <= shape[0] and w.wcols <= shape[1]
            widest = (max(widest[0], w.wrows), max(widest[1], w.wcols))
    # the worst placement reaches the predicted window size along each axis when the image is long enough
    if rows >= 2 * (ph + rf) + stride:
        assert widest[0] == shape[0]
    if cols >= 2 * (pw + rf) + stride:
        assert widest[1] == shape[1]

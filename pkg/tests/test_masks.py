import numpy as np
import pytest

from src.classes.errors import ValidationError
from src.classes.masks import BBox, MaskBank, SpatialMask, rasterize_mask, region_signatures


def test_full_box_covers_every_cell():
    assert np.array_equal(rasterize_mask(BBox(0.0, 0.0, 1.0, 1.0), 4, 4).values, np.ones((4, 4)))


def test_cell_centres_decide_membership():
    mask = rasterize_mask(BBox(0.0, 0.0, 0.5, 1.0), 4, 4)
    assert np.array_equal(mask.values[:, :2], np.ones((4, 2)))
    assert np.array_equal(mask.values[:, 2:], np.zeros((4, 2)))


def test_degenerate_box_keeps_the_centre_cell():
    mask = rasterize_mask(BBox(0.3, 0.3, 0.3, 0.3), 8, 8)
    assert mask.values.sum() == 1.0
    assert mask.values[2, 2] == 1.0


def test_box_edge_is_half_open():
    # Cell centres of a 4-wide grid sit at 0.125, 0.375, 0.625, 0.875
    mask = rasterize_mask(BBox(0.125, 0.0, 0.625, 1.0), 1, 4)
    assert mask.values.tolist() == [[1.0, 1.0, 0.0, 0.0]]


def test_coarse_cells_contain_a_fine_cell():
    rng = np.random.default_rng(0)
    for _ in range(300):
        x0, x1 = np.sort(rng.uniform(0, 1, 2))
        y0, y1 = np.sort(rng.uniform(0, 1, 2))
        box = BBox(float(x0), float(y0), float(x1), float(y1))
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        coarse = rasterize_mask(box, h, w).values
        fine = rasterize_mask(box, 2 * h, 2 * w).values
        pooled = fine.reshape(h, 2, w, 2).max(axis=(1, 3))
        assert np.all(pooled[coarse > 0] == 1.0)


def test_invalid_boxes_are_rejected():
    for coords in [(0.6, 0.0, 0.5, 1.0), (0.0, 0.0, 1.2, 1.0), (float('nan'), 0.0, 1.0, 1.0)]:
        with pytest.raises(ValidationError) as excinfo:
            BBox(*coords)
        assert excinfo.value.code == "E_INVALID_BOX"


def test_spatial_mask_rejects_empty_and_non_binary_values():
    with pytest.raises(ValidationError):
        SpatialMask(np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        SpatialMask(np.full((2, 2), 0.5))


def test_mask_bank_rasterizes_once_per_resolution():
    bank = MaskBank({1: BBox(0.5, 0.0, 1.0, 1.0), 0: BBox(0.0, 0.0, 0.5, 1.0)})
    first = bank.mask(0, 8, 8)
    assert bank.mask(0, 8, 8) is first
    assert [m.source_box for m in bank.masks(4, 4)] == [bank.boxes[0], bank.boxes[1]]
    assert bank.resolutions() == [(4, 4), (8, 8)]


def test_region_signatures_group_equal_coverage():
    left = rasterize_mask(BBox(0.0, 0.0, 0.75, 1.0), 1, 4)
    right = rasterize_mask(BBox(0.25, 0.0, 1.0, 1.0), 1, 4)
    labels = region_signatures([left, right])
    assert labels[1] == labels[2]
    assert len({labels[0], labels[1], labels[3]}) == 3


def test_box_iou():
    a, b = BBox(0.0, 0.0, 0.5, 1.0), BBox(0.25, 0.0, 0.75, 1.0)
    assert a.iou(b) == pytest.approx(1.0 / 3.0)
    assert a.iou(BBox(0.5, 0.0, 1.0, 1.0)) == 0.0

import numpy as np
import pytest

from src.localizer import (
    BoundingBox,
    biggest_component,
    box_iou,
    localize,
    overlay_mask,
    render_box,
    threshold_mask,
)


def _mask(cells, shape=(4, 8)):
    m = np.zeros((*shape, 1))
    for r, c in cells:
        m[r, c, 0] = 0.9
    return m


def test_threshold_is_inclusive():
    m = np.array([[0.5, 0.49]])
    assert threshold_mask(m).tolist() == [[True, False]]
    with pytest.raises(ValueError):
        threshold_mask(m, t=0.0)


def test_empty_mask_localizes_to_none():
    assert localize(np.zeros((4, 8, 1)), (32, 64)) is None


def test_single_cell_box_in_pixels():
    box = localize(_mask([(1, 2)]), (32, 64))
    assert box == BoundingBox(x0=16, y0=8, width=8, height=8, wrap=False)


def test_biggest_component_wins():
    m = _mask([(0, 0), (2, 4), (2, 5), (3, 5)])
    box = localize(m, (32, 64), wrap_horizontal=False)
    assert (box.x0, box.y0, box.width, box.height) == (32, 16, 16, 16)


def test_diagonal_cells_are_connected():
    grid = np.zeros((3, 3), dtype=bool)
    grid[0, 0] = grid[1, 1] = grid[2, 2] = True
    assert biggest_component(grid).sum() == 3


def test_tie_goes_to_first_component_in_row_major_order():
    grid = np.zeros((3, 6), dtype=bool)
    grid[2, 0] = grid[2, 1] = True
    grid[0, 4] = grid[0, 5] = True
    comp = biggest_component(grid)
    assert comp[0, 4] and not comp[2, 0]


def test_wraparound_fixture():
    # content split across the seam: columns 7 and 0..1 of an 8-column mask
    m = _mask([(1, 7), (1, 0), (2, 0), (2, 1)])
    box = localize(m, (32, 64), wrap_horizontal=True)
    assert box == BoundingBox(x0=56, y0=8, width=24, height=16, wrap=True)

    flat = localize(m, (32, 64), wrap_horizontal=False)
    assert flat.wrap is False
    assert (flat.x0, flat.width) == (0, 16)


def test_boxes_stay_inside_the_panorama(rng):
    for _ in range(50):
        m = rng.random((4, 16, 1))
        box = localize(m, (16, 64))
        if box is None:
            continue
        assert 0 <= box.x0 < 64 and box.width <= 64
        assert box.y0 + box.height <= 16


def test_extents_must_match_mask_grid():
    with pytest.raises(ValueError):
        localize(_mask([(0, 0)]), (30, 64))


def test_box_iou():
    a = BoundingBox(x0=0, y0=0, width=10, height=10)
    b = BoundingBox(x0=5, y0=0, width=10, height=10)
    assert box_iou(a, a, (20, 40)) == 1.0
    assert box_iou(a, b, (20, 40)) == pytest.approx(50 / 150)


def test_box_iou_across_the_seam():
    a = BoundingBox(x0=36, y0=0, width=8, height=4, wrap=True)
    b = BoundingBox(x0=0, y0=0, width=4, height=4)
    assert box_iou(a, b, (4, 40)) == pytest.approx(16 / 32)


def test_render_box_draws_both_pieces_of_a_wrapped_box():
    pano = np.zeros((16, 32, 3))
    out = render_box(pano, BoundingBox(x0=28, y0=2, width=8, height=8, wrap=True), thickness=1)
    assert out[2, 30, 0] == 1.0
    assert out[2, 2, 0] == 1.0
    assert out[5, 15, 0] == 0.0
    assert pano.max() == 0.0


def test_overlay_mask_blends_red_channel():
    pano = np.zeros((8, 16, 3))
    m = np.zeros((2, 4, 1))
    m[0, 0, 0] = 1.0
    out = overlay_mask(pano, m)
    assert out[0, 0, 0] == 0.5
    assert out[7, 15, 0] == 0.0
    assert out[..., 1:].max() == 0.0


def _blob(rng, grid=(6, 16)):
    """Two overlapping rectangles of cells (one component), wrapped on columns."""
    rows, cols = grid
    m = rng.random((rows, cols, 1)) * 0.4
    r0, c0 = int(rng.integers(0, rows - 2)), int(rng.integers(0, cols))
    h, w = int(rng.integers(1, 3)), int(rng.integers(1, 6))
    r1, c1 = r0 + int(rng.integers(0, h)), c0 + int(rng.integers(0, w))
    h1, w1 = int(rng.integers(1, 4)), int(rng.integers(1, 6))
    for r in range(r0, r0 + h):
        m[r, np.arange(c0, c0 + w) % cols, 0] = 0.9
    for r in range(r1, min(rows, r1 + h1)):
        m[r, np.arange(c1, c1 + w1) % cols, 0] = 0.9
    return m


def test_box_follows_heading_rotation(rng):
    for _ in range(100):
        m = _blob(rng)
        box = localize(m, (48, 128), wrap_horizontal=True)
        shift = int(rng.integers(1, 16))
        rotated = localize(np.roll(m, shift, axis=1), (48, 128), wrap_horizontal=True)
        x0 = (box.x0 + 8 * shift) % 128
        assert rotated == BoundingBox(x0=x0, y0=box.y0, width=box.width, height=box.height, wrap=x0 + box.width > 128)


def test_box_is_minimal(rng):
    for _ in range(100):
        m = _blob(rng)
        box = localize(m, (48, 128), wrap_horizontal=True)
        rows, cols = np.nonzero(m[:, :, 0] >= 0.5)
        # every side of the box touches a marked cell
        assert rows.min() == box.y0 // 8 and rows.max() == (box.y0 + box.height) // 8 - 1
        offsets = (cols - box.x0 // 8) % 16
        assert offsets.min() == 0 and offsets.max() == box.width // 8 - 1

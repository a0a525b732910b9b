import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_diagram, white
from pidjudge.imaging import (
    OverlayStyle,
    Tile,
    crop_region,
    erase_boxes,
    expand_box,
    render_overlay,
    tile_diagram,
    tile_file_name,
    tile_windows,
)
from pidjudge.model import BoundingBox


def test_full_size_sheet_gives_40_tiles():
    windows = tile_windows(7168, 4561, 1024, 896)
    assert len(windows) == 40
    rows = {idx[0] for idx, _ in windows}
    cols = {idx[1] for idx, _ in windows}
    assert (len(rows), len(cols)) == (5, 8)
    for _, w in windows:
        assert w.w == 1024 and w.h == 1024
        assert w.inside(7168, 4561)
    assert max(w.x2 for _, w in windows) == 7168
    assert max(w.y2 for _, w in windows) == 4561


def test_small_image_is_one_tile():
    grid = tile_diagram(make_diagram("S", [], width=500, height=400), 1024, 896)
    assert len(grid.tiles) == 1
    assert grid.tiles[0].window == BoundingBox(0, 0, 500, 400)


def test_tile_equal_to_image():
    grid = tile_diagram(make_diagram("S", [], width=1024, height=1024), 1024, 1024)
    assert [t.window for t in grid.tiles] == [BoundingBox(0, 0, 1024, 1024)]


def test_invalid_stride():
    with pytest.raises(ValueError):
        tile_windows(100, 100, 64, 128)
    with pytest.raises(ValueError):
        tile_windows(100, 100, 64, 0)


def test_tiles_carry_crops():
    img = np.arange(60 * 80 * 3, dtype=np.uint32).reshape(60, 80, 3).astype(np.uint8)
    grid = tile_diagram(make_diagram("S", [], width=80, height=60), 32, 24, img)
    for t in grid.tiles:
        w = t.window
        assert np.array_equal(t.image, img[w.y:w.y2, w.x:w.x2])
    assert grid.tile(1, 2).index == (1, 2)
    assert tile_file_name("S", grid.tiles[0]) == "S_r0_c0.png"
    with pytest.raises(ValueError):
        tile_diagram(make_diagram("S", [], width=81, height=60), 32, 24, img)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 3000), st.integers(16, 512), st.data())
def test_windows_cover_every_pixel(width, height, tile, data):
    stride = data.draw(st.integers(max(1, tile // 4), tile))
    windows = [w for _, w in tile_windows(width, height, tile, stride)]
    xs = sorted({(w.x, w.x2) for w in windows})
    ys = sorted({(w.y, w.y2) for w in windows})
    for spans, length in ((xs, width), (ys, height)):
        assert spans[0][0] == 0 and spans[-1][1] == length
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            assert b0 <= a1


def _tile(img):
    h, w = img.shape[:2]
    return Tile((0, 0), BoundingBox(0, 0, w, h), img)


def test_overlay_without_boxes_is_identity():
    img = white(50, 60)
    assert np.array_equal(render_overlay(_tile(img), []), img)


def test_overlay_perimeter_pixel_count():
    img = white(50, 60)
    out = render_overlay(_tile(img), [BoundingBox(20, 20, 10, 10)], OverlayStyle(thickness=1))
    changed = np.any(out != img, axis=2)
    assert changed.sum() == 2 * 10 + 2 * 10 - 4
    assert (out[changed] == (255, 0, 0)).all()


def test_overlay_thickness_three_is_nested_rings():
    img = white(50, 60)
    out = render_overlay(_tile(img), [BoundingBox(20, 20, 10, 10)])
    changed = np.any(out != img, axis=2)
    assert changed.sum() == 36 + 28 + 20


def test_overlay_straddling_box_is_clipped():
    img = white(40, 40)
    tile = Tile((0, 1), BoundingBox(100, 0, 40, 40), img)
    out = render_overlay(tile, [BoundingBox(90, 10, 20, 10)], OverlayStyle(thickness=1))
    changed = np.any(out != img, axis=2)
    # top and bottom edges from column 0..9, right edge at column 9; left edge outside
    assert changed.sum() == 10 + 10 + 8
    assert changed[:, 10:].sum() == 0


def test_erase_identity_and_idempotence():
    rng = np.random.default_rng(0)
    img = white(64, 64)
    img[30:40, 30:40] = 0
    noise = rng.integers(0, 256, size=(5, 5, 3), dtype=np.uint8)
    img[2:7, 50:55] = noise
    tile = _tile(img)
    assert np.array_equal(erase_boxes(tile, []), img)
    boxes = [BoundingBox(28, 28, 14, 14), BoundingBox(48, 0, 10, 10)]
    once = erase_boxes(tile, boxes)
    twice = erase_boxes(_tile(once), boxes)
    assert np.array_equal(once, twice)
    assert (once[28:42, 28:42] == 255).all()
    diff = np.any(once != img, axis=2)
    assert diff[28:42, 28:42].sum() + diff[0:10, 48:58].sum() == diff.sum()


def test_expand_box_examples():
    assert expand_box(BoundingBox(100, 100, 50, 40), 0.0, 1000, 1000) == BoundingBox(100, 100, 50, 40)
    assert expand_box(BoundingBox(100, 100, 50, 40), 0.5, 1000, 1000) == BoundingBox(75, 75, 100, 90)
    corner = expand_box(BoundingBox(0, 0, 20, 20), 0.5, 1000, 1000)
    assert (corner.x, corner.y) == (0, 0)
    assert corner == BoundingBox(0, 0, 30, 30)


def test_crop_region_returns_window_pixels():
    img = np.arange(200 * 300 * 3, dtype=np.uint32).reshape(200, 300, 3).astype(np.uint8)
    crop, window = crop_region(img, BoundingBox(100, 100, 50, 40), 0.5)
    assert window == BoundingBox(75, 75, 100, 90)
    assert np.array_equal(crop, img[75:165, 75:175])

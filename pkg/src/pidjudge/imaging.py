"""Tiling of large diagram rasters and pixel-level grounding renders.

Rasters are ``uint8`` arrays of shape ``(H, W, 3)``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .model import BoundingBox, Diagram

DEFAULT_TILE_SIZE = 1024
DEFAULT_STRIDE = 896


@dataclass(frozen=True)
class OverlayStyle:
    color: tuple[int, int, int] = (255, 0, 0)
    thickness: int = 3

    def __post_init__(self):
        if self.thickness < 1:
            raise ValueError("overlay thickness must be >= 1")
        if len(self.color) != 3 or any(not 0 <= c <= 255 for c in self.color):
            raise ValueError(f"invalid RGB color {self.color}")

    @property
    def color_name(self) -> str:
        names = {(255, 0, 0): "red", (0, 255, 0): "green", (0, 0, 255): "blue"}
        return names.get(tuple(self.color), "rgb({}, {}, {})".format(*self.color))


@dataclass(frozen=True)
class Tile:
    index: tuple[int, int]
    window: BoundingBox
    image: Optional[np.ndarray] = None

    @property
    def name(self) -> str:
        return f"r{self.index[0]}_c{self.index[1]}"


@dataclass(frozen=True)
class TileGrid:
    diagram_id: str
    tile_size: int
    stride: int
    rows: int
    cols: int
    tiles: tuple[Tile, ...]

    def tile(self, row: int, col: int) -> Tile:
        return self.tiles[row * self.cols + col]


def tile_starts(length: int, tile_size: int, stride: int) -> list[int]:
    """Window start offsets along one axis; the last window ends at the border."""
    if length <= tile_size:
        return [0]
    n = math.ceil((length - tile_size) / stride) + 1
    return [min(i * stride, length - tile_size) for i in range(n)]


def tile_windows(width: int, height: int, tile_size: int, stride: int) -> list[tuple[tuple[int, int], BoundingBox]]:
    if tile_size <= 0 or stride <= 0 or stride > tile_size:
        raise ValueError(f"need 0 < stride <= tile_size, got tile_size={tile_size} stride={stride}")
    out = []
    for r, y in enumerate(tile_starts(height, tile_size, stride)):
        for c, x in enumerate(tile_starts(width, tile_size, stride)):
            out.append(((r, c), BoundingBox(x, y, min(tile_size, width), min(tile_size, height))))
    return out


def tile_diagram(
    diagram: Diagram,
    tile_size: int = DEFAULT_TILE_SIZE,
    stride: int = DEFAULT_STRIDE,
    image: Optional[np.ndarray] = None,
) -> TileGrid:
    """Split a diagram into overlapping windows; crops are attached when ``image`` is given."""
    windows = tile_windows(diagram.width, diagram.height, tile_size, stride)
    if image is not None and image.shape[:2] != (diagram.height, diagram.width):
        raise ValueError(
            f"image shape {image.shape[:2]} does not match diagram {diagram.id} ({diagram.height}, {diagram.width})"
        )
    tiles = []
    for idx, win in windows:
        crop = None if image is None else image[win.y:win.y2, win.x:win.x2].copy()
        tiles.append(Tile(idx, win, crop))
    rows = max(i[0] for i, _ in windows) + 1
    cols = max(i[1] for i, _ in windows) + 1
    return TileGrid(diagram.id, tile_size, stride, rows, cols, tuple(tiles))


def tile_file_name(diagram_id: str, tile: Tile) -> str:
    return f"{diagram_id}_r{tile.index[0]}_c{tile.index[1]}.png"


def _local_box(box: BoundingBox, window: BoundingBox) -> Optional[BoundingBox]:
    return box.translate(-window.x, -window.y).clip(window.w, window.h)


def render_overlay(tile: Tile, boxes: Iterable[BoundingBox], style: OverlayStyle = OverlayStyle()) -> np.ndarray:
    """Outline each box (diagram coordinates) on a copy of the tile image.

    Rings are drawn inward from the box edge; the part of an outline that
    falls outside the tile is dropped.
    """
    out = tile.image.copy()
    th, tw = out.shape[:2]
    color = np.asarray(style.color, dtype=np.uint8)
    for box in boxes:
        lb = box.translate(-tile.window.x, -tile.window.y)
        if lb.clip(tw, th) is None:
            continue
        for k in range(style.thickness):
            x0, y0 = lb.x + k, lb.y + k
            x1, y1 = lb.x2 - 1 - k, lb.y2 - 1 - k
            if x0 > x1 or y0 > y1:
                break
            cx0, cx1 = max(x0, 0), min(x1, tw - 1)
            cy0, cy1 = max(y0, 0), min(y1, th - 1)
            if cx0 <= cx1:
                if 0 <= y0 < th:
                    out[y0, cx0:cx1 + 1] = color
                if 0 <= y1 < th:
                    out[y1, cx0:cx1 + 1] = color
            if cy0 <= cy1:
                if 0 <= x0 < tw:
                    out[cy0:cy1 + 1, x0] = color
                if 0 <= x1 < tw:
                    out[cy0:cy1 + 1, x1] = color
    return out


def background_color(image: np.ndarray) -> np.ndarray:
    """Per-channel low median of the image.

    The low median is an actual sample value, which keeps erasure idempotent:
    filling pixels with it can never move it.
    """
    flat = image.reshape(-1, image.shape[-1])
    k = (flat.shape[0] - 1) // 2
    return np.partition(flat, k, axis=0)[k].astype(np.uint8)


def erase_boxes(tile: Tile, boxes: Iterable[BoundingBox]) -> np.ndarray:
    """Fill the interior of each box with the tile background color."""
    out = tile.image.copy()
    boxes = list(boxes)
    if not boxes:
        return out
    fill = background_color(tile.image)
    th, tw = out.shape[:2]
    for box in boxes:
        lb = _local_box(box, tile.window)
        if lb is not None:
            out[lb.y:lb.y2, lb.x:lb.x2] = fill
    return out


def expand_box(bbox: BoundingBox, margin_frac: float, width: int, height: int) -> BoundingBox:
    if margin_frac < 0:
        raise ValueError("margin_frac must be >= 0")
    e = int(math.ceil(margin_frac * max(bbox.w, bbox.h)))
    x0, y0 = max(bbox.x - e, 0), max(bbox.y - e, 0)
    x1, y1 = min(bbox.x2 + e, width), min(bbox.y2 + e, height)
    return BoundingBox(x0, y0, x1 - x0, y1 - y0)


def crop_region(image: np.ndarray, bbox: BoundingBox, margin_frac: float = 0.5) -> tuple[np.ndarray, BoundingBox]:
    """Crop around ``bbox`` with a margin of ``margin_frac * max(w, h)`` per side."""
    h, w = image.shape[:2]
    window = expand_box(bbox, margin_frac, w, h)
    return image[window.y:window.y2, window.x:window.x2].copy(), window


def draw_outline(image: np.ndarray, box: BoundingBox, style: OverlayStyle = OverlayStyle()) -> np.ndarray:
    """Outline a box given in the image's own coordinates."""
    h, w = image.shape[:2]
    return render_overlay(Tile((0, 0), BoundingBox(0, 0, w, h), image), [box], style)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


def save_png(image: np.ndarray, path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_png(image))


def boxes_of(records: Sequence) -> list[BoundingBox]:
    return [r.bbox for r in records]

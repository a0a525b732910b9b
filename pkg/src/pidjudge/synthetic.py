"""Synthetic P&ID-like diagrams for offline runs and tests.

Symbols are placed without overlap (a clearance gap is kept between any two
boxes) so that every ground-truth object is unambiguous for scoring.
"""

from __future__ import annotations

import string
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .model import BoundingBox, Dataset, Diagram, SymbolAnnotation, save_dataset

DEFAULT_CLASSES = (
    "gate valve",
    "globe valve",
    "check valve",
    "control valve",
    "pump",
    "instrument",
    "reducer",
    "flange",
)

# half of the 7168x4561 sheet size used by the reference P&ID corpus
DEFAULT_WIDTH = 3584
DEFAULT_HEIGHT = 2280


def _random_tag(rng: np.random.Generator) -> str:
    letters = "".join(rng.choice(list(string.ascii_uppercase), size=2))
    return f"{letters}-{int(rng.integers(10000, 99999))}"


def make_diagram(
    diagram_id: str,
    rng: np.random.Generator,
    n_symbols: int = 50,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    classes: Sequence[str] = DEFAULT_CLASSES,
    size_range: tuple[int, int] = (24, 96),
    gap: int = 16,
    tag_prob: float = 0.85,
    image_path: Optional[Path] = None,
) -> Diagram:
    """Place ``n_symbols`` non-overlapping symbols on a ``width x height`` sheet."""
    lo, hi = size_range
    boxes: list[BoundingBox] = []
    attempts = 0
    while len(boxes) < n_symbols:
        attempts += 1
        if attempts > 200 * max(n_symbols, 1):
            raise RuntimeError(f"could not place {n_symbols} symbols on a {width}x{height} sheet")
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        cand = BoundingBox(x, y, w, h)
        if any(
            cand.x < b.x2 + gap and b.x < cand.x2 + gap and cand.y < b.y2 + gap and b.y < cand.y2 + gap
            for b in boxes
        ):
            continue
        boxes.append(cand)

    symbols = []
    tags: set[str] = set()
    for i, box in enumerate(boxes):
        tag = None
        if rng.random() < tag_prob:
            tag = _random_tag(rng)
            while tag in tags:
                tag = _random_tag(rng)
            tags.add(tag)
        cls = classes[int(rng.integers(0, len(classes)))]
        symbols.append(SymbolAnnotation(f"{diagram_id}-s{i:03d}", cls, box, tag))
    return Diagram(diagram_id, image_path, width, height, tuple(symbols))


def _draw_symbol(draw: ImageDraw.ImageDraw, sym: SymbolAnnotation, classes: Sequence[str]) -> None:
    b = sym.bbox
    x0, y0, x1, y1 = b.x, b.y, b.x2 - 1, b.y2 - 1
    kind = classes.index(sym.class_label) % 4 if sym.class_label in classes else 0
    if kind == 0:
        # bow-tie valve body
        draw.polygon([(x0, y0), (x1, (y0 + y1) // 2), (x0, y1)], outline="black")
        draw.polygon([(x1, y0), (x0, (y0 + y1) // 2), (x1, y1)], outline="black")
    elif kind == 1:
        draw.ellipse([x0, y0, x1, y1], outline="black", width=2)
    elif kind == 2:
        draw.rectangle([x0, y0, x1, y1], outline="black", width=2)
        draw.line([x0, y0, x1, y1], fill="black")
    else:
        draw.polygon([((x0 + x1) // 2, y0), (x1, (y0 + y1) // 2), ((x0 + x1) // 2, y1), (x0, (y0 + y1) // 2)],
                     outline="black")


def render_diagram(diagram: Diagram, rng: np.random.Generator, classes: Sequence[str] = DEFAULT_CLASSES) -> Image.Image:
    """Render a line drawing: pipes across the sheet, symbols, and tag text."""
    img = Image.new("RGB", (diagram.width, diagram.height), "white")
    draw = ImageDraw.Draw(img)
    for _ in range(12):
        yy = int(rng.integers(0, diagram.height))
        draw.line([0, yy, diagram.width - 1, yy], fill=(90, 90, 90), width=1)
        xx = int(rng.integers(0, diagram.width))
        draw.line([xx, 0, xx, diagram.height - 1], fill=(90, 90, 90), width=1)
    for sym in diagram.symbols:
        # clear pipes beneath the symbol so the drawing reads cleanly
        draw.rectangle([sym.bbox.x, sym.bbox.y, sym.bbox.x2 - 1, sym.bbox.y2 - 1], fill="white")
        _draw_symbol(draw, sym, classes)
        if sym.tag:
            ty = sym.bbox.y2 + 2 if sym.bbox.y2 + 12 < diagram.height else max(sym.bbox.y - 12, 0)
            draw.text((sym.bbox.x, ty), sym.tag, fill="black")
    return img


def make_dataset(
    n_diagrams: int,
    seed: int = 0,
    out_dir: Optional[Path] = None,
    n_symbols: int = 50,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    classes: Sequence[str] = DEFAULT_CLASSES,
    render: bool = True,
    name: str = "synthetic-pid",
) -> Dataset:
    """Build a synthetic dataset; with ``out_dir`` set, write PNGs and ``dataset.json`` there."""
    rng = np.random.default_rng(seed)
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        (root / "images").mkdir(parents=True, exist_ok=True)
    diagrams = []
    for i in range(n_diagrams):
        did = f"D{i:04d}"
        image_path = root / "images" / f"{did}.png" if (root is not None and render) else None
        d = make_diagram(did, rng, n_symbols, width, height, classes, image_path=image_path)
        if image_path is not None:
            render_diagram(d, rng, classes).save(image_path, format="PNG")
        diagrams.append(d)
    dataset = Dataset(name, list(classes), diagrams, root)
    if root is not None:
        save_dataset(dataset, root / "dataset.json")
    return dataset

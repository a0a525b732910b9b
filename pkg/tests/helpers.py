"""Small fixture builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from pidjudge.model import BoundingBox, Diagram, SymbolAnnotation


def make_symbol(sid: str, cls: str, box, tag=None) -> SymbolAnnotation:
    return SymbolAnnotation(sid, cls, BoundingBox(*box), tag)


def make_diagram(did: str, symbols, width=1000, height=800, image_path=None) -> Diagram:
    return Diagram(did, image_path, width, height, tuple(symbols))


def white(h: int, w: int) -> np.ndarray:
    return np.full((h, w, 3), 255, dtype=np.uint8)

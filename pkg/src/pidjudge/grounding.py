"""Prompt assembly for the judge and the localized detector."""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .imaging import OverlayStyle, Tile, draw_outline, erase_boxes, render_overlay
from .model import BoundingBox, DetectionRecord, DetectionSet

MISSING_JUDGE = "missing-judge"
BOX_QA = "box-qa"
REGION_DETECT = "region-detect"
SCHEMA_IDS = (MISSING_JUDGE, BOX_QA, REGION_DETECT)

TEMPLATE_NAMES = (
    "missing_judge",
    "intro_overlay",
    "intro_erased",
    "tags_block",
    "coords_block",
    "box_qa",
    "region_detect",
    "strict_suffix",
)
TEMPLATE_SERIES = "pidjudge-prompts-1"


class GroundingMode(str, enum.Enum):
    VISUAL_ONLY = "VisualOnly"
    VISUAL_PLUS_TAGS = "VisualPlusTags"
    VISUAL_PLUS_COORDS = "VisualPlusCoords"
    VISUAL_TAGS_COORDS = "VisualTagsCoords"
    ERASED_OBJECTS = "ErasedObjects"

    @classmethod
    def parse(cls, value: "str | GroundingMode") -> "GroundingMode":
        if isinstance(value, cls):
            return value
        for m in cls:
            if m.value.lower() == str(value).lower() or m.name.lower() == str(value).lower():
                return m
        raise ValueError(f"unknown grounding mode {value!r}; choose from {[m.value for m in cls]}")

    @property
    def uses_tags(self) -> bool:
        return self in (GroundingMode.VISUAL_PLUS_TAGS, GroundingMode.VISUAL_TAGS_COORDS)

    @property
    def uses_coords(self) -> bool:
        return self in (GroundingMode.VISUAL_PLUS_COORDS, GroundingMode.VISUAL_TAGS_COORDS)


@dataclass
class PromptBundle:
    tile_ref: tuple
    images: list[np.ndarray]
    text: str
    response_schema_id: str
    # Diagram-space facts the mock backends and the parser need; never sent to a model.
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.images:
            raise ValueError("a prompt bundle needs at least one image")
        if not self.text:
            raise ValueError("prompt text must not be empty")
        if self.response_schema_id not in SCHEMA_IDS:
            raise ValueError(f"unknown response schema {self.response_schema_id!r}")

    @property
    def bounds(self) -> Optional[tuple[int, int]]:
        return self.meta.get("bounds")


class PromptTemplates:
    """Named text templates; a directory may override any subset of them."""

    def __init__(self, override_dir: Optional[Path] = None):
        self.texts: dict[str, str] = {}
        pkg = resources.files("pidjudge") / "templates"
        for name in TEMPLATE_NAMES:
            custom = Path(override_dir) / f"{name}.txt" if override_dir else None
            if custom is not None and custom.exists():
                self.texts[name] = custom.read_text(encoding="utf-8")
            else:
                self.texts[name] = (pkg / f"{name}.txt").read_text(encoding="utf-8")
        digest = hashlib.sha256()
        for name in TEMPLATE_NAMES:
            digest.update(name.encode() + b"\0" + self.texts[name].encode("utf-8") + b"\0")
        self.version = f"{TEMPLATE_SERIES}+{digest.hexdigest()[:12]}"

    def render(self, name: str, **values: Any) -> str:
        text = self.texts[name]
        for key, val in values.items():
            text = text.replace("{" + key + "}", str(val))
        return text.rstrip("\n")


_DEFAULT_TEMPLATES: Optional[PromptTemplates] = None


def default_templates() -> PromptTemplates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = PromptTemplates()
    return _DEFAULT_TEMPLATES


def _center_in(box: BoundingBox, window: BoundingBox) -> bool:
    cx, cy = box.center
    return window.x <= cx < window.x2 and window.y <= cy < window.y2


def in_tile(detections, window: BoundingBox) -> list[DetectionRecord]:
    """Detections whose box center lies inside the window."""
    return [d for d in detections if _center_in(d.bbox, window)]


def collect_tags(detections: DetectionSet, tile: Tile) -> list[str]:
    return sorted({d.tag for d in in_tile(detections, tile.window) if d.tag is not None})


def serialize_coords(detections: DetectionSet, tile: Tile) -> str:
    """Header line plus one ``<class>: [x,y,w,h]`` line per in-tile detection (tile-local pixels)."""
    win = tile.window
    local = sorted(
        ((d.bbox.y - win.y, d.bbox.x - win.x, d) for d in in_tile(detections, win)),
        key=lambda t: (t[0], t[1], t[2].class_label, t[2].bbox.w, t[2].bbox.h),
    )
    lines = [f"Detected symbol boxes as class: [x,y,w,h] in pixels of this {win.w}x{win.h} crop:"]
    for ly, lx, d in local:
        lines.append(f"{d.class_label}: [{lx},{ly},{d.bbox.w},{d.bbox.h}]")
    return "\n".join(lines)


_COORD_LINE = re.compile(r"^(?P<cls>.+): \[(-?\d+),(-?\d+),(\d+),(\d+)\]$")


def parse_coords(text: str) -> list[tuple[str, tuple[int, int, int, int]]]:
    """Inverse of :func:`serialize_coords` (header line skipped)."""
    out = []
    for line in text.splitlines()[1:]:
        m = _COORD_LINE.match(line)
        if m is None:
            raise ValueError(f"not a coordinate line: {line!r}")
        out.append((m.group("cls"), tuple(int(m.group(i)) for i in range(2, 6))))
    return out


def tags_block(tags: Sequence[str], templates: Optional[PromptTemplates] = None) -> str:
    templates = templates or default_templates()
    listing = "\n".join(f"- {t}" for t in tags) if tags else "(none)"
    return templates.render("tags_block", TAGS=listing)


def coords_block(coords: str, templates: Optional[PromptTemplates] = None) -> str:
    templates = templates or default_templates()
    return templates.render("coords_block", COORDS=coords)


def missing_judge_text(
    tile: Tile,
    detections: DetectionSet,
    mode: GroundingMode,
    style: OverlayStyle = OverlayStyle(),
    class_list: Sequence[str] = (),
    templates: Optional[PromptTemplates] = None,
) -> str:
    templates = templates or default_templates()
    mode = GroundingMode.parse(mode)
    if mode is GroundingMode.ERASED_OBJECTS:
        intro = templates.render("intro_erased")
    else:
        intro = templates.render("intro_overlay", COLOR=style.color_name)
    blocks = []
    if mode.uses_tags:
        blocks.append(tags_block(collect_tags(detections, tile), templates))
    if mode.uses_coords:
        blocks.append(coords_block(serialize_coords(detections, tile), templates))
    text = templates.render(
        "missing_judge",
        TILE_W=tile.window.w,
        TILE_H=tile.window.h,
        INTRO=intro,
        GROUNDING="\n".join(blocks),
        CLASS_LIST=", ".join(class_list) if class_list else "any P&ID symbol",
    )
    # an empty grounding section leaves a blank line behind
    return re.sub(r"\n{2,}", "\n", text)


def build_missing_judge_prompt(
    tile: Tile,
    detections: DetectionSet,
    mode: GroundingMode,
    style: OverlayStyle = OverlayStyle(),
    class_list: Sequence[str] = (),
    templates: Optional[PromptTemplates] = None,
) -> PromptBundle:
    mode = GroundingMode.parse(mode)
    visible = in_tile(detections, tile.window)
    if mode is GroundingMode.ERASED_OBJECTS:
        image = erase_boxes(tile, [d.bbox for d in visible])
    else:
        image = render_overlay(tile, [d.bbox for d in visible], style)
    text = missing_judge_text(tile, detections, mode, style, class_list, templates)
    return PromptBundle(
        tile_ref=(detections.diagram_id, tile.index),
        images=[image],
        text=text,
        response_schema_id=MISSING_JUDGE,
        meta={"window": tile.window, "bounds": (tile.window.w, tile.window.h), "mode": mode.value},
    )


def box_qa_text(
    detection: DetectionRecord,
    class_list: Sequence[str],
    style: OverlayStyle = OverlayStyle(),
    templates: Optional[PromptTemplates] = None,
) -> str:
    templates = templates or default_templates()
    return templates.render(
        "box_qa", CLASS=detection.class_label, COLOR=style.color_name, CLASS_LIST=", ".join(class_list)
    )


def build_box_qa_prompt(
    crop: np.ndarray,
    detection: DetectionRecord,
    class_list: Sequence[str],
    window: Optional[BoundingBox] = None,
    diagram_id: str = "",
    style: OverlayStyle = OverlayStyle(),
    templates: Optional[PromptTemplates] = None,
) -> PromptBundle:
    """Ask whether the outlined detection is real, tight and correctly classified.

    ``window`` is the crop's placement in the diagram; the detection box is
    outlined on the crop when it is known.
    """
    image = crop
    if window is not None:
        image = draw_outline(crop, detection.bbox.translate(-window.x, -window.y), style)
    return PromptBundle(
        tile_ref=(diagram_id, detection.id),
        images=[image],
        text=box_qa_text(detection, class_list, style, templates),
        response_schema_id=BOX_QA,
        meta={"window": window, "detection_id": detection.id},
    )


def region_detect_text(
    crop_w: int,
    crop_h: int,
    suspected_class: Optional[str] = None,
    class_list: Sequence[str] = (),
    templates: Optional[PromptTemplates] = None,
) -> str:
    templates = templates or default_templates()
    if suspected_class:
        hint = f'A "{suspected_class}" symbol is suspected in this region. Detect all symbols in this crop.'
    else:
        hint = "Detect all symbols in this crop."
    return templates.render(
        "region_detect",
        CROP_W=crop_w,
        CROP_H=crop_h,
        HINT=hint,
        CLASS_LIST=", ".join(class_list) if class_list else "any P&ID symbol",
    )


def build_region_detect_prompt(
    crop: np.ndarray,
    suspected_class: Optional[str] = None,
    window: Optional[BoundingBox] = None,
    diagram_id: str = "",
    class_list: Sequence[str] = (),
    ref: Any = None,
    templates: Optional[PromptTemplates] = None,
) -> PromptBundle:
    h, w = crop.shape[:2]
    return PromptBundle(
        tile_ref=(diagram_id, ref),
        images=[crop],
        text=region_detect_text(w, h, suspected_class, class_list, templates),
        response_schema_id=REGION_DETECT,
        meta={"window": window, "bounds": (w, h)},
    )


def with_strict_suffix(bundle: PromptBundle, templates: Optional[PromptTemplates] = None) -> PromptBundle:
    templates = templates or default_templates()
    return PromptBundle(
        bundle.tile_ref,
        bundle.images,
        bundle.text + "\n" + templates.render("strict_suffix"),
        bundle.response_schema_id,
        dict(bundle.meta, retry=True),
    )

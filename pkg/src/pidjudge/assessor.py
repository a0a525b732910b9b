"""Detection quality assessment: per-box QA on local crops and tile-wise
missing-object judging."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .gateway import Backend, OracleContext, UsageMeter, VlmError
from .grounding import (
    GroundingMode,
    PromptBundle,
    PromptTemplates,
    build_box_qa_prompt,
    build_missing_judge_prompt,
    default_templates,
    with_strict_suffix,
)
from .imaging import (
    DEFAULT_STRIDE,
    DEFAULT_TILE_SIZE,
    OverlayStyle,
    crop_region,
    save_png,
    tile_diagram,
    tile_file_name,
)
from .metrics import claim_order_key
from .model import BoundingBox, DetectionRecord, DetectionSet, Diagram, iou

log = logging.getLogger(__name__)

KEEP, DROP, RELOCALIZE = "keep", "drop", "relocalize"


@dataclass(frozen=True)
class BoxVerdict:
    detection_id: str
    valid: bool
    tight: bool
    class_ok: bool
    proposed_class: Optional[str] = None
    note: Optional[str] = None

    @property
    def disposition(self) -> str:
        if not self.valid:
            return DROP
        if self.tight and self.class_ok:
            return KEEP
        return RELOCALIZE

    def to_json(self) -> dict:
        return {
            "detection_id": self.detection_id,
            "valid": self.valid,
            "tight": self.tight,
            "class_ok": self.class_ok,
            "proposed_class": self.proposed_class,
            "disposition": self.disposition,
            "note": self.note,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BoxVerdict":
        return cls(obj["detection_id"], obj["valid"], obj["tight"], obj["class_ok"],
                   obj.get("proposed_class"), obj.get("note"))


@dataclass(frozen=True)
class MissingClaim:
    diagram_id: str
    tile_index: tuple[int, int]
    approx_bbox: BoundingBox
    suspected_class: Optional[str] = None
    nearby_tag: Optional[str] = None
    rationale: str = ""

    def to_json(self) -> dict:
        return {
            "diagram_id": self.diagram_id,
            "tile_index": list(self.tile_index),
            "approx_bbox": self.approx_bbox.as_list(),
            "suspected_class": self.suspected_class,
            "nearby_tag": self.nearby_tag,
            "rationale": self.rationale,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MissingClaim":
        return cls(obj["diagram_id"], tuple(obj["tile_index"]), BoundingBox.from_list(obj["approx_bbox"]),
                   obj.get("suspected_class"), obj.get("nearby_tag"), obj.get("rationale", ""))


@dataclass
class AssessmentReport:
    diagram_id: str
    verdicts: list[BoxVerdict]
    claims: list[MissingClaim]
    tiles_failed: list[tuple[int, int]]
    prompt_template_version: str
    grounding_mode: str = ""
    raw_claim_count: int = 0
    tiles_unparsed: list[tuple[int, int]] = field(default_factory=list)
    token_usage: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "diagram_id": self.diagram_id,
            "verdicts": [v.to_json() for v in self.verdicts],
            "claims": [c.to_json() for c in self.claims],
            "tiles_failed": [list(t) for t in self.tiles_failed],
            "tiles_unparsed": [list(t) for t in self.tiles_unparsed],
            "prompt_template_version": self.prompt_template_version,
            "grounding_mode": self.grounding_mode,
            "raw_claim_count": self.raw_claim_count,
            "token_usage": self.token_usage,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AssessmentReport":
        return cls(
            diagram_id=obj["diagram_id"],
            verdicts=[BoxVerdict.from_json(v) for v in obj["verdicts"]],
            claims=[MissingClaim.from_json(c) for c in obj["claims"]],
            tiles_failed=[tuple(t) for t in obj["tiles_failed"]],
            prompt_template_version=obj["prompt_template_version"],
            grounding_mode=obj.get("grounding_mode", ""),
            raw_claim_count=obj.get("raw_claim_count", 0),
            tiles_unparsed=[tuple(t) for t in obj.get("tiles_unparsed", [])],
            token_usage=obj.get("token_usage", {}),
        )


@dataclass
class AssessorConfig:
    mode: GroundingMode = GroundingMode.VISUAL_TAGS_COORDS
    tile_size: int = DEFAULT_TILE_SIZE
    stride: int = DEFAULT_STRIDE
    style: OverlayStyle = OverlayStyle()
    qa_margin: float = 0.5
    dedup_iou: float = 0.5
    classes: Sequence[str] = ()
    max_concurrency: int = 4
    strict: bool = False
    templates: Optional[PromptTemplates] = None
    prompt_dump_dir: Optional[Path] = None

    def __post_init__(self):
        self.mode = GroundingMode.parse(self.mode)
        if self.templates is None:
            self.templates = default_templates()


class StrictModeError(RuntimeError):
    """Raised instead of degrading when ``strict`` is set."""


def query(
    backend: Backend,
    bundle: PromptBundle,
    context: Optional[OracleContext],
    meter: Optional[UsageMeter] = None,
    templates: Optional[PromptTemplates] = None,
) -> Optional[Any]:
    """Send a bundle; re-ask once with a stricter suffix if the reply does not parse.

    Returns the parsed payload, or None when both replies were unusable.
    VlmError (transport exhaustion) propagates.
    """
    for attempt in (bundle, None):
        if attempt is None:
            attempt = with_strict_suffix(bundle, templates)
        resp = backend.complete(attempt, context)
        if meter is not None:
            meter.add(resp)
        if resp.parsed is not None:
            return resp.parsed
        log.debug("unparseable reply for %s: %s", bundle.tile_ref, resp.error)
    return None


def _pmap(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def assess_detected_boxes(
    detections: DetectionSet,
    image: np.ndarray,
    backend: Backend,
    config: AssessorConfig,
    context: Optional[OracleContext] = None,
    meter: Optional[UsageMeter] = None,
) -> list[BoxVerdict]:
    """One verdict per detection, in detection-id order."""

    def judge(det: DetectionRecord) -> BoxVerdict:
        crop, window = crop_region(image, det.bbox, config.qa_margin)
        bundle = build_box_qa_prompt(crop, det, config.classes, window, detections.diagram_id,
                                     config.style, config.templates)
        try:
            reply = query(backend, bundle, context, meter, config.templates)
        except VlmError as exc:
            if config.strict:
                raise StrictModeError(f"box QA failed for {det.id}: {exc}") from exc
            return BoxVerdict(det.id, True, False, False, None, f"backend failure: {exc}")
        if reply is None:
            if config.strict:
                raise StrictModeError(f"unparseable box QA reply for {det.id}")
            return BoxVerdict(det.id, True, False, False, None, "unparseable reply")
        class_ok = reply["class"] == det.class_label
        return BoxVerdict(det.id, reply["valid"], reply["tight"], class_ok,
                          None if class_ok else reply["class"])

    dets = sorted(detections.detections, key=lambda d: d.id)
    return _pmap(judge, dets, config.max_concurrency)


def assess_missing_objects(
    detections: DetectionSet,
    diagram: Diagram,
    image: np.ndarray,
    backend: Backend,
    config: AssessorConfig,
    context: Optional[OracleContext] = None,
    meter: Optional[UsageMeter] = None,
    only_tiles: Optional[set] = None,
) -> tuple[list[MissingClaim], list[tuple[int, int]], list[tuple[int, int]]]:
    """Judge every tile for symbols absent from ``detections``.

    Returns ``(raw_claims, failed_tiles, unparsed_tiles)``; claims are in
    diagram coordinates and not yet deduplicated.
    """
    grid = tile_diagram(diagram, config.tile_size, config.stride, image)
    tiles = [t for t in grid.tiles if only_tiles is None or t.index in only_tiles]

    def judge(tile):
        bundle = build_missing_judge_prompt(tile, detections, config.mode, config.style,
                                            config.classes, config.templates)
        if config.prompt_dump_dir is not None:
            save_png(bundle.images[0], Path(config.prompt_dump_dir) / tile_file_name(diagram.id, tile))
        try:
            reply = query(backend, bundle, context, meter, config.templates)
        except VlmError as exc:
            if config.strict:
                raise StrictModeError(f"tile {tile.index} of {diagram.id} failed: {exc}") from exc
            log.warning("tile %s of %s failed: %s", tile.index, diagram.id, exc)
            return tile, None, "failed"
        if reply is None:
            if config.strict:
                raise StrictModeError(f"unparseable judge reply for tile {tile.index} of {diagram.id}")
            return tile, None, "unparsed"
        return tile, reply["missing"], "ok"

    claims: list[MissingClaim] = []
    failed, unparsed = [], []
    for tile, items, status in _pmap(judge, tiles, config.max_concurrency):
        if status == "failed":
            failed.append(tile.index)
            continue
        if status == "unparsed":
            unparsed.append(tile.index)
            continue
        for item in items:
            box = BoundingBox.from_list(item["bbox"]).translate(tile.window.x, tile.window.y)
            box = box.clip(diagram.width, diagram.height)
            if box is None:
                continue
            claims.append(MissingClaim(diagram.id, tile.index, box, item["class"], item["tag"],
                                       item["rationale"]))
    return claims, sorted(failed), sorted(unparsed)


def dedup_claims(claims: Sequence[MissingClaim], iou_threshold: float = 0.5) -> list[MissingClaim]:
    """Greedy removal of claims repeated across overlapping tiles."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in (0, 1]")
    kept: list[MissingClaim] = []
    for c in sorted(claims, key=lambda c: (c.diagram_id,) + claim_order_key(c)):
        duplicate = any(
            k.diagram_id == c.diagram_id
            and (k.suspected_class is None or c.suspected_class is None or k.suspected_class == c.suspected_class)
            and iou(k.approx_bbox, c.approx_bbox) >= iou_threshold
            for k in kept
        )
        if not duplicate:
            kept.append(c)
    return kept


def assess_diagram(
    detections: DetectionSet,
    diagram: Diagram,
    image: np.ndarray,
    backend: Backend,
    config: AssessorConfig,
    context: Optional[OracleContext] = None,
    previous: Optional[AssessmentReport] = None,
) -> AssessmentReport:
    """Run both assessment paths for one diagram.

    Boxes judged to be false detections are removed before the missing-object
    pass, so the judge is grounded only on boxes that survived QA. With
    ``previous`` set, box verdicts are reused and only its failed tiles are
    re-judged.
    """
    meter = UsageMeter()
    if previous is not None:
        verdicts = previous.verdicts
    else:
        verdicts = assess_detected_boxes(detections, image, backend, config, context, meter)
    dropped = {v.detection_id for v in verdicts if v.disposition == DROP}
    surviving = DetectionSet(detections.diagram_id, tuple(d for d in detections if d.id not in dropped))
    only = set(previous.tiles_failed) | set(previous.tiles_unparsed) if previous is not None else None
    raw, failed, unparsed = assess_missing_objects(surviving, diagram, image, backend, config, context, meter, only)
    raw_count = len(raw)
    if previous is not None:
        raw = list(previous.claims) + raw
        raw_count += previous.raw_claim_count
    claims = dedup_claims(raw, config.dedup_iou)
    usage = meter.to_dict()
    if previous is not None and previous.token_usage:
        usage = {k: usage[k] + previous.token_usage.get(k, 0) for k in usage}
    return AssessmentReport(
        diagram_id=diagram.id,
        verdicts=list(verdicts),
        claims=claims,
        tiles_failed=failed,
        prompt_template_version=config.templates.version,
        grounding_mode=config.mode.value,
        raw_claim_count=raw_count,
        tiles_unparsed=unparsed,
        token_usage=usage,
    )

"""Correction stage: localized re-detection for claims and loose boxes, then merge."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .assessor import DROP, KEEP, RELOCALIZE, AssessmentReport, MissingClaim, StrictModeError, _pmap, query
from .gateway import Backend, OracleContext, UsageMeter, VlmError
from .grounding import PromptTemplates, build_region_detect_prompt, default_templates
from .imaging import crop_region
from .model import BoundingBox, DetectionRecord, DetectionSet, Diagram, detection_to_json, detection_from_json, iou

log = logging.getLogger(__name__)

PROVENANCE_RANK = {"base": 0, "relocalized": 1, "recovered": 2}


@dataclass
class RefinementConfig:
    region_margin: float = 1.0
    merge_iou: float = 0.5
    default_score: float = 0.9
    classes: Sequence[str] = ()
    max_concurrency: int = 4
    strict: bool = False
    templates: Optional[PromptTemplates] = None

    def __post_init__(self):
        if not 0.0 < self.merge_iou <= 1.0:
            raise ValueError("merge_iou must be in (0, 1]")
        if self.templates is None:
            self.templates = default_templates()


@dataclass
class RefinementResult:
    diagram_id: str
    recovered: list[DetectionRecord]
    relocalized: list[DetectionRecord]
    discarded_claims: list[MissingClaim]
    final: DetectionSet
    failed_claims: list[MissingClaim] = field(default_factory=list)
    trace: dict[str, int] = field(default_factory=dict)
    dropped: list[str] = field(default_factory=list)
    token_usage: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "diagram_id": self.diagram_id,
            "recovered": [detection_to_json(d) for d in self.recovered],
            "relocalized": [detection_to_json(d) for d in self.relocalized],
            "discarded_claims": [c.to_json() for c in self.discarded_claims],
            "failed_claims": [c.to_json() for c in self.failed_claims],
            "dropped": list(self.dropped),
            "trace": dict(sorted(self.trace.items())),
            "final": [detection_to_json(d) for d in self.final.detections],
            "token_usage": self.token_usage,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RefinementResult":
        return cls(
            diagram_id=obj["diagram_id"],
            recovered=[detection_from_json(d) for d in obj["recovered"]],
            relocalized=[detection_from_json(d) for d in obj["relocalized"]],
            discarded_claims=[MissingClaim.from_json(c) for c in obj["discarded_claims"]],
            final=DetectionSet(obj["diagram_id"], tuple(detection_from_json(d) for d in obj["final"])),
            failed_claims=[MissingClaim.from_json(c) for c in obj.get("failed_claims", [])],
            trace=dict(obj.get("trace", {})),
            dropped=list(obj.get("dropped", [])),
            token_usage=obj.get("token_usage", {}),
        )


def _detect_region(
    region: BoundingBox,
    hint: Optional[str],
    ref: str,
    diagram: Diagram,
    image: np.ndarray,
    backend: Backend,
    config: RefinementConfig,
    context: Optional[OracleContext],
    meter: Optional[UsageMeter],
) -> Optional[list[tuple[str, BoundingBox, Optional[float]]]]:
    """Run the localized detector; detections come back in diagram coordinates."""
    crop, window = crop_region(image, region, config.region_margin)
    bundle = build_region_detect_prompt(crop, hint, window, diagram.id, config.classes, ref, config.templates)
    reply = query(backend, bundle, context, meter, config.templates)
    if reply is None:
        return None
    return [
        (d["class"], BoundingBox.from_list(d["bbox"]).translate(window.x, window.y), d["score"])
        for d in reply["detections"]
    ]


def recover_missing(
    claims: Sequence[MissingClaim],
    diagram: Diagram,
    image: np.ndarray,
    backend: Backend,
    config: RefinementConfig,
    context: Optional[OracleContext] = None,
    meter: Optional[UsageMeter] = None,
) -> tuple[list[DetectionRecord], list[MissingClaim], list[MissingClaim], dict[str, int]]:
    """Re-detect inside each claimed region.

    Returns ``(recovered, discarded, failed, trace)``. A claim whose region
    yields no symbol is discarded; a claim whose backend call failed is
    listed under ``failed`` instead. ``trace`` maps recovered ids to the
    index of their claim.
    """

    def run(item):
        i, claim = item
        try:
            return i, claim, _detect_region(claim.approx_bbox, claim.suspected_class, f"claim-{i:04d}",
                                            diagram, image, backend, config, context, meter), None
        except VlmError as exc:
            if config.strict:
                raise StrictModeError(f"region detection failed for claim {i} of {diagram.id}: {exc}") from exc
            return i, claim, None, str(exc)

    recovered, discarded, failed = [], [], []
    trace: dict[str, int] = {}
    for i, claim, found, error in _pmap(run, list(enumerate(claims)), config.max_concurrency):
        if error is not None or found is None:
            if error is not None:
                log.warning("claim %d of %s failed: %s", i, diagram.id, error)
                failed.append(claim)
            else:
                discarded.append(claim)
            continue
        if not found:
            discarded.append(claim)
            continue
        for k, (cls, box, score) in enumerate(found):
            rid = f"rec-{i:04d}-{k:02d}"
            recovered.append(DetectionRecord(rid, cls, box, config.default_score if score is None else score,
                                             "recovered", claim.nearby_tag if len(found) == 1 else None))
            trace[rid] = i
    return recovered, discarded, failed, trace


def relocalize_boxes(
    detections: Sequence[DetectionRecord],
    proposed: dict[str, Optional[str]],
    diagram: Diagram,
    image: np.ndarray,
    backend: Backend,
    config: RefinementConfig,
    context: Optional[OracleContext] = None,
    meter: Optional[UsageMeter] = None,
) -> tuple[list[DetectionRecord], list[DetectionRecord]]:
    """Replace loose or misclassified boxes by the detector's best match in their region.

    Returns ``(relocalized, unchanged)``; a box stays unchanged when the
    detector finds nothing or the call fails.
    """

    def run(det: DetectionRecord):
        hint = proposed.get(det.id) or det.class_label
        try:
            found = _detect_region(det.bbox, hint, det.id, diagram, image, backend, config, context, meter)
        except VlmError as exc:
            if config.strict:
                raise StrictModeError(f"relocalization failed for {det.id}: {exc}") from exc
            found = None
        if not found:
            return det, None
        cx, cy = det.bbox.center

        def rank(f):
            fx, fy = f[1].center
            return (-iou(det.bbox, f[1]), (fx - cx) ** 2 + (fy - cy) ** 2)

        cls, box, score = min(found, key=rank)
        return det, DetectionRecord(det.id, cls, box, config.default_score if score is None else score,
                                    "relocalized", det.tag)

    relocalized, unchanged = [], []
    for det, new in _pmap(run, sorted(detections, key=lambda d: d.id), config.max_concurrency):
        if new is None:
            unchanged.append(det)
        else:
            relocalized.append(new)
    return relocalized, unchanged


def merge_detections(
    kept: Sequence[DetectionRecord],
    relocalized: Sequence[DetectionRecord],
    recovered: Sequence[DetectionRecord],
    merge_iou: float = 0.5,
    diagram_id: str = "",
) -> DetectionSet:
    """Same-class greedy NMS over the union, highest score first."""
    if not 0.0 < merge_iou <= 1.0:
        raise ValueError("merge_iou must be in (0, 1]")
    pool = list(kept) + list(relocalized) + list(recovered)
    pool.sort(key=lambda d: (-d.score, PROVENANCE_RANK.get(d.provenance, 9), d.id))
    accepted: list[DetectionRecord] = []
    for d in pool:
        if any(a.class_label == d.class_label and iou(a.bbox, d.bbox) >= merge_iou for a in accepted):
            continue
        accepted.append(d)
    # ids must stay unique in the output set
    seen: set[str] = set()
    out = []
    for d in sorted(accepted, key=lambda d: d.id):
        if d.id in seen:
            continue
        seen.add(d.id)
        out.append(d)
    return DetectionSet(diagram_id, tuple(out))


def refine_diagram(
    report: AssessmentReport,
    detections: DetectionSet,
    diagram: Diagram,
    image: np.ndarray,
    backend: Backend,
    config: RefinementConfig,
    context: Optional[OracleContext] = None,
) -> RefinementResult:
    meter = UsageMeter()
    verdicts = {v.detection_id: v for v in report.verdicts}
    by_id = detections.by_id()
    kept = [d for d in detections if verdicts.get(d.id) is None or verdicts[d.id].disposition == KEEP]
    loose = [d for d in detections if d.id in verdicts and verdicts[d.id].disposition == RELOCALIZE]
    dropped = sorted(d.id for d in detections if d.id in verdicts and verdicts[d.id].disposition == DROP)
    missing = sorted(set(verdicts) - set(by_id))
    if missing:
        raise ValueError(f"verdicts refer to unknown detections {missing[:5]}")

    proposed = {v.detection_id: v.proposed_class for v in report.verdicts}
    relocalized, unchanged = relocalize_boxes(loose, proposed, diagram, image, backend, config, context, meter)
    recovered, discarded, failed, trace = recover_missing(report.claims, diagram, image, backend, config,
                                                          context, meter)
    final = merge_detections(kept + unchanged, relocalized, recovered, config.merge_iou, diagram.id)
    return RefinementResult(
        diagram_id=diagram.id,
        recovered=recovered,
        relocalized=relocalized,
        discarded_claims=discarded,
        final=final,
        failed_claims=failed,
        trace=trace,
        dropped=dropped,
        token_usage=meter.to_dict(),
    )

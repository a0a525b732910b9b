"""Judge scoring (precision / recall / F1 over missing-object claims) and mAP."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional, Sequence, Union

from .corruption import InjectionLog
from .model import DetectionSet, Diagram, SymbolAnnotation, iou

if TYPE_CHECKING:
    from .assessor import MissingClaim


@dataclass(frozen=True)
class MatchingPolicy:
    iou_threshold: float = 0.3
    allow_tag_match: bool = True
    require_class_match: bool = False

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must be in (0, 1]")


@dataclass
class JudgeScore:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "JudgeScore":
        # a judge that claims nothing makes no false claims
        precision = tp / (tp + fp) if tp + fp > 0 else 1.0
        recall = tp / (tp + fn) if tp + fn > 0 else 1.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        if tp == 0 and (fp > 0 or fn > 0):
            f1 = 0.0
        return cls(tp, fp, fn, precision, recall, f1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MapResult:
    per_class_ap: dict[str, float]
    map_value: float
    iou_threshold: float = 0.5
    interpolation: str = "all-point"
    gt_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "MapResult":
        return cls(**obj)


# --------------------------------------------------------------------------
# claim matching

def _compatible(claim: "MissingClaim", gt: SymbolAnnotation, policy: MatchingPolicy) -> bool:
    if policy.require_class_match and claim.suspected_class is not None and claim.suspected_class != gt.class_label:
        return False
    if policy.allow_tag_match and claim.nearby_tag is not None and claim.nearby_tag == gt.tag:
        return True
    return iou(claim.approx_bbox, gt.bbox) >= policy.iou_threshold


def claim_order_key(c: "MissingClaim"):
    b = c.approx_bbox
    return (b.y, b.x, b.h, b.w, c.suspected_class or "", c.nearby_tag or "", c.tile_index)


def max_bipartite_matching(adjacency: Sequence[Sequence[int]], n_right: int) -> list[int]:
    """Maximum-cardinality matching by augmenting paths (Kuhn's algorithm).

    ``adjacency[i]`` lists the right vertices compatible with left vertex i.
    Returns ``match_left`` with the matched right vertex per left vertex or -1.
    """
    match_right = [-1] * n_right
    match_left = [-1] * len(adjacency)

    def augment(u: int, seen: list[bool]) -> bool:
        for v in adjacency[u]:
            if seen[v]:
                continue
            seen[v] = True
            if match_right[v] == -1 or augment(match_right[v], seen):
                match_right[v] = u
                match_left[u] = v
                return True
        return False

    for u in range(len(adjacency)):
        augment(u, [False] * n_right)
    return match_left


def match_claims(
    claims: Sequence["MissingClaim"],
    missed_gt: Sequence[SymbolAnnotation],
    policy: MatchingPolicy = MatchingPolicy(),
) -> list[tuple["MissingClaim", SymbolAnnotation]]:
    """One-to-one claim <-> missed-symbol pairs of maximum cardinality."""
    cs = sorted(claims, key=claim_order_key)
    gs = sorted(missed_gt, key=lambda g: g.id)
    adjacency = [[j for j, g in enumerate(gs) if _compatible(c, g, policy)] for c in cs]
    match = max_bipartite_matching(adjacency, len(gs))
    return [(cs[i], gs[j]) for i, j in enumerate(match) if j >= 0]


def score_judge(
    claims: Iterable["MissingClaim"],
    injection_logs: Sequence[InjectionLog],
    diagrams: Sequence[Diagram],
    policy: MatchingPolicy = MatchingPolicy(),
    per_diagram: Optional[dict] = None,
) -> JudgeScore:
    """Aggregate TP/FP/FN over diagrams; claims on anything but an omitted symbol are FP.

    When ``per_diagram`` is a dict it is filled with each diagram's JudgeScore.
    """
    logs = {log.diagram_id: log for log in injection_logs}
    by_id = {d.id: d for d in diagrams}
    grouped: dict[str, list] = defaultdict(list)
    for c in claims:
        if c.diagram_id not in logs:
            raise ValueError(f"claim refers to diagram {c.diagram_id!r} with no injection log")
        grouped[c.diagram_id].append(c)
    tp = fp = fn = 0
    for did in sorted(logs):
        if did not in by_id:
            raise ValueError(f"injection log for unknown diagram {did!r}")
        symbols = by_id[did].symbol_map()
        missed = [symbols[sid] for sid in logs[did].omitted]
        cs = grouped.get(did, [])
        m = len(match_claims(cs, missed, policy))
        d_tp, d_fp, d_fn = m, len(cs) - m, len(missed) - m
        if per_diagram is not None:
            per_diagram[did] = JudgeScore.from_counts(d_tp, d_fp, d_fn)
        tp, fp, fn = tp + d_tp, fp + d_fp, fn + d_fn
    return JudgeScore.from_counts(tp, fp, fn)


# --------------------------------------------------------------------------
# mAP

def _envelope(precisions: list[float]) -> list[float]:
    env = list(precisions)
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    return env


def average_precision(hits: Sequence[bool], n_gt: int, interpolation: str = "all-point") -> float:
    """AP of a ranked hit list against ``n_gt`` ground-truth objects."""
    if n_gt <= 0:
        raise ValueError("average precision needs at least one ground-truth object")
    precisions, recalls = [], []
    tp = 0
    for k, hit in enumerate(hits, start=1):
        tp += bool(hit)
        precisions.append(tp / k)
        recalls.append(tp / n_gt)
    if interpolation == "all-point":
        env = _envelope(precisions)
        # recall steps by exactly 1/n_gt at each hit; summing envelope values
        # at hits and dividing once keeps perfect rankings at exactly 1.0
        return sum(e for e, hit in zip(env, hits) if hit) / n_gt
    if interpolation == "11-point":
        total = 0.0
        for t in range(11):
            r = t / 10
            total += max((p for p, rc in zip(precisions, recalls) if rc >= r - 1e-12), default=0.0)
        return total / 11
    raise ValueError(f"unknown interpolation {interpolation!r}")


def compute_map(
    detections: Union[DetectionSet, Sequence[DetectionSet]],
    gt: Union[Diagram, Sequence[Diagram]],
    iou_threshold: float = 0.5,
    classes: Optional[Sequence[str]] = None,
    interpolation: str = "all-point",
) -> MapResult:
    """Per-class AP pooled over diagrams, and their unweighted mean over GT-present classes."""
    sets = [detections] if isinstance(detections, DetectionSet) else list(detections)
    diagrams = [gt] if isinstance(gt, Diagram) else list(gt)
    known = set(classes) if classes is not None else None
    by_diagram = {d.id: d for d in diagrams}

    gt_boxes: dict[tuple[str, str], list[SymbolAnnotation]] = defaultdict(list)
    gt_counts: dict[str, int] = defaultdict(int)
    for d in diagrams:
        for s in sorted(d.symbols, key=lambda s: s.id):
            gt_boxes[(d.id, s.class_label)].append(s)
            gt_counts[s.class_label] += 1

    ranked: dict[str, list] = defaultdict(list)
    for ds in sets:
        if ds.diagram_id not in by_diagram:
            raise ValueError(f"detections for unknown diagram {ds.diagram_id!r}")
        for det in ds.detections:
            if known is not None and det.class_label not in known:
                raise ValueError(f"unknown class label {det.class_label!r} (detection {det.id})")
            ranked[det.class_label].append((-det.score, det.id, ds.diagram_id, det))

    per_class: dict[str, float] = {}
    for cls in sorted(gt_counts):
        matched: set[tuple[str, str]] = set()
        hits = []
        for _, _, did, det in sorted(ranked.get(cls, []), key=lambda t: t[:3]):
            best, best_iou = None, iou_threshold
            for g in gt_boxes.get((did, cls), []):
                if (did, g.id) in matched:
                    continue
                o = iou(det.bbox, g.bbox)
                if o >= best_iou and (best is None or o > best_iou):
                    best, best_iou = g, o
            if best is not None:
                matched.add((did, best.id))
            hits.append(best is not None)
        per_class[cls] = average_precision(hits, gt_counts[cls], interpolation)
    map_value = sum(per_class.values()) / len(per_class) if per_class else 0.0
    return MapResult(per_class, map_value, iou_threshold, interpolation, dict(sorted(gt_counts.items())))


def compare_runs(before: MapResult, after: MapResult) -> dict:
    if before.iou_threshold != after.iou_threshold:
        raise ValueError(
            f"cannot compare mAP at IoU {before.iou_threshold} with mAP at IoU {after.iou_threshold}"
        )
    classes = sorted(set(before.per_class_ap) | set(after.per_class_ap))
    per_class = {
        c: after.per_class_ap.get(c, 0.0) - before.per_class_ap.get(c, 0.0) for c in classes
    }
    delta = after.map_value - before.map_value
    sign = "improved" if delta > 0 else "degraded" if delta < 0 else "unchanged"
    return {
        "map_before": before.map_value,
        "map_after": after.map_value,
        "delta": delta,
        "per_class_delta": per_class,
        "sign": sign,
        "classes_improved": sum(1 for v in per_class.values() if v > 0),
        "classes_degraded": sum(1 for v in per_class.values() if v < 0),
        "iou_threshold": before.iou_threshold,
    }

"""Seeded error injection: ground truth -> corrupted detections + answer key."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import BoundingBox, DetectionRecord, DetectionSet, Diagram, dumps, iou

FP_MAX_IOU = 0.1
FP_MAX_ATTEMPTS = 100


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    omission_rate: float = 0.2
    resize_rate: float = 0.2
    resize_max_frac: float = 0.4
    offset_rate: float = 0.3
    offset_max_frac: float = 0.4
    false_positive_rate: float = 0.1
    class_swap_rate: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for name in ("omission_rate", "resize_rate", "offset_rate", "class_swap_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CorruptionError(f"{name}={v} outside [0, 1]")
        for name in ("resize_max_frac", "offset_max_frac", "false_positive_rate"):
            if getattr(self, name) < 0:
                raise CorruptionError(f"{name} must be >= 0")
        if self.resize_max_frac >= 1.0:
            raise CorruptionError("resize_max_frac must be < 1 so boxes keep a positive size")
        # each non-omitted symbol takes at most one perturbation
        if self.resize_rate + self.offset_rate + self.class_swap_rate > 1.0 + 1e-12:
            raise CorruptionError("resize_rate + offset_rate + class_swap_rate must not exceed 1")
        if not 0 <= self.seed < 2**64:
            raise CorruptionError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, obj: dict) -> "CorruptionSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise CorruptionError(f"unknown corruption spec fields: {sorted(unknown)}")
        spec = cls(**obj)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path: Path) -> "CorruptionSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Perturbation:
    symbol_id: str
    original: BoundingBox
    corrupted: BoundingBox
    kind: str  # "resize" | "offset"


@dataclass(frozen=True)
class ClassSwap:
    symbol_id: str
    original_class: str
    new_class: str


@dataclass
class InjectionLog:
    diagram_id: str
    omitted: list[str] = field(default_factory=list)
    perturbed: list[Perturbation] = field(default_factory=list)
    false_positives: list[str] = field(default_factory=list)
    class_swapped: list[ClassSwap] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "diagram_id": self.diagram_id,
            "omitted": list(self.omitted),
            "perturbed": [
                {"symbol_id": p.symbol_id, "original": p.original.as_list(),
                 "corrupted": p.corrupted.as_list(), "kind": p.kind}
                for p in self.perturbed
            ],
            "false_positives": list(self.false_positives),
            "class_swapped": [
                {"symbol_id": c.symbol_id, "original_class": c.original_class, "new_class": c.new_class}
                for c in self.class_swapped
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InjectionLog":
        return cls(
            diagram_id=obj["diagram_id"],
            omitted=list(obj["omitted"]),
            perturbed=[
                Perturbation(p["symbol_id"], BoundingBox.from_list(p["original"]),
                             BoundingBox.from_list(p["corrupted"]), p["kind"])
                for p in obj["perturbed"]
            ],
            false_positives=list(obj["false_positives"]),
            class_swapped=[
                ClassSwap(c["symbol_id"], c["original_class"], c["new_class"]) for c in obj["class_swapped"]
            ],
        )


def diagram_rng(seed: int, diagram_id: str, *salt: str) -> np.random.Generator:
    """Independent stream per (seed, diagram id, salt...).

    The key strings are hashed with SHA-256 and the first 8 bytes (big endian)
    become a second entropy word next to the seed, so results do not depend
    on the order in which diagrams are processed.
    """
    key = "\x1f".join((diagram_id,) + salt).encode("utf-8")
    word = int.from_bytes(hashlib.sha256(key).digest()[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([int(seed), word]))


def _clamp_box(x: int, y: int, w: int, h: int, width: int, height: int) -> BoundingBox:
    w = max(1, min(w, width))
    h = max(1, min(h, height))
    x = min(max(x, 0), width - w)
    y = min(max(y, 0), height - h)
    return BoundingBox(x, y, w, h)


def _resize(box: BoundingBox, frac: float, rng: np.random.Generator, width: int, height: int) -> BoundingBox:
    fw, fh = rng.uniform(1.0 - frac, 1.0 + frac, size=2)
    cx, cy = box.center
    nw = max(1, int(round(box.w * fw)))
    nh = max(1, int(round(box.h * fh)))
    return _clamp_box(int(round(cx - nw / 2.0)), int(round(cy - nh / 2.0)), nw, nh, width, height)


def _offset(box: BoundingBox, frac: float, rng: np.random.Generator, width: int, height: int) -> BoundingBox:
    dx = int(round(rng.uniform(-frac, frac) * box.w))
    dy = int(round(rng.uniform(-frac, frac) * box.h))
    return _clamp_box(box.x + dx, box.y + dy, box.w, box.h, width, height)


def inject_errors(
    diagram: Diagram,
    spec: CorruptionSpec,
    classes: Optional[Sequence[str]] = None,
) -> tuple[DetectionSet, InjectionLog]:
    """Corrupt a diagram's annotations into a detection set.

    Base detections keep the id of the symbol they came from; injected false
    positives get fresh ``fp-NNNN`` ids.
    """
    spec.validate()
    classes = sorted(set(classes)) if classes else sorted({s.class_label for s in diagram.symbols})
    n = len(diagram.symbols)
    if n == 0 and spec.false_positive_rate > 0:
        raise CorruptionError(f"diagram {diagram.id!r} has no symbols to draw false-positive sizes from")
    rng = diagram_rng(spec.seed, diagram.id)
    log = InjectionLog(diagram.id)

    ids = sorted(s.id for s in diagram.symbols)
    order = [ids[i] for i in rng.permutation(n)] if n else []
    n_omit = math.floor(spec.omission_rate * n)
    omitted = set(order[:n_omit])
    log.omitted = sorted(omitted)

    remaining = sorted(i for i in ids if i not in omitted)
    m = len(remaining)
    shuffled = [remaining[i] for i in rng.permutation(m)] if m else []
    n_resize = math.floor(spec.resize_rate * m)
    n_offset = math.floor(spec.offset_rate * m)
    n_swap = math.floor(spec.class_swap_rate * m)
    resize_ids = set(shuffled[:n_resize])
    offset_ids = set(shuffled[n_resize:n_resize + n_offset])
    swap_ids = set(shuffled[n_resize + n_offset:n_resize + n_offset + n_swap])
    if swap_ids and len(classes) < 2:
        raise CorruptionError("class swapping needs at least two classes")

    symbols = diagram.symbol_map()
    records: dict[str, dict] = {}
    for sid in remaining:
        sym = symbols[sid]
        box, label = sym.bbox, sym.class_label
        if sid in resize_ids:
            box = _resize(sym.bbox, spec.resize_max_frac, rng, diagram.width, diagram.height)
            log.perturbed.append(Perturbation(sid, sym.bbox, box, "resize"))
        elif sid in offset_ids:
            box = _offset(sym.bbox, spec.offset_max_frac, rng, diagram.width, diagram.height)
            log.perturbed.append(Perturbation(sid, sym.bbox, box, "offset"))
        elif sid in swap_ids:
            others = [c for c in classes if c != sym.class_label]
            label = others[int(rng.integers(0, len(others)))]
            log.class_swapped.append(ClassSwap(sid, sym.class_label, label))
        records[sid] = {"class": label, "bbox": box, "tag": sym.tag, "provenance": "base"}

    n_fp = math.floor(spec.false_positive_rate * n)
    if n_fp:
        ws = [s.bbox.w for s in diagram.symbols]
        hs = [s.bbox.h for s in diagram.symbols]
        gt_boxes = [s.bbox for s in diagram.symbols]
        taken = set(ids)
        for k in range(n_fp):
            for _ in range(FP_MAX_ATTEMPTS):
                w = int(rng.integers(min(ws), max(ws) + 1))
                h = int(rng.integers(min(hs), max(hs) + 1))
                w, h = min(w, diagram.width), min(h, diagram.height)
                x = int(rng.integers(0, diagram.width - w + 1))
                y = int(rng.integers(0, diagram.height - h + 1))
                cand = BoundingBox(x, y, w, h)
                if all(iou(cand, g) < FP_MAX_IOU for g in gt_boxes):
                    break
            else:
                raise CorruptionError(
                    f"diagram {diagram.id!r}: no false-positive location with IoU < {FP_MAX_IOU} "
                    f"after {FP_MAX_ATTEMPTS} attempts"
                )
            fid = f"fp-{k:04d}"
            while fid in taken:
                fid = "x" + fid
            taken.add(fid)
            label = classes[int(rng.integers(0, len(classes)))]
            records[fid] = {"class": label, "bbox": cand, "tag": None, "provenance": "base"}
            log.false_positives.append(fid)

    dets = []
    for did in sorted(records):
        r = records[did]
        score = float(rng.uniform(0.5, 1.0))
        dets.append(DetectionRecord(did, r["class"], r["bbox"], score, r["provenance"], r["tag"]))
    return DetectionSet(diagram.id, tuple(dets)), log


def summarize_injection(log: InjectionLog) -> dict[str, int]:
    resized = sum(1 for p in log.perturbed if p.kind == "resize")
    return {
        "omitted": len(log.omitted),
        "resized": resized,
        "offset": len(log.perturbed) - resized,
        "perturbed": len(log.perturbed),
        "false_positives": len(log.false_positives),
        "class_swapped": len(log.class_swapped),
    }


def save_logs(logs: Sequence[InjectionLog], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps({"logs": [log.to_json() for log in logs]}), encoding="utf-8")


def load_logs(path: Path) -> list[InjectionLog]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return [InjectionLog.from_json(o) for o in obj["logs"]]

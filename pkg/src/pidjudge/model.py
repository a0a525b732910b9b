"""Data model for diagrams, annotations and detections, plus dataset I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

PROVENANCES = ("base", "recovered", "relocalized")


class DatasetError(ValueError):
    """Raised when a dataset or detections file cannot be parsed or validated."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, top-left origin, integer pixels.

    A box covers pixel columns ``x .. x + w - 1`` and rows ``y .. y + h - 1``.
    """

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")

    @classmethod
    def from_list(cls, values: Sequence) -> "BoundingBox":
        if len(values) != 4:
            raise ValueError(f"bbox needs 4 values, got {len(values)}")
        return cls(*(int(v) for v in values))

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def contains(self, other: "BoundingBox") -> bool:
        return (
            other.x >= self.x and other.y >= self.y
            and other.x2 <= self.x2 and other.y2 <= self.y2
        )

    def translate(self, dx: int, dy: int) -> "BoundingBox":
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h)

    def clip(self, width: int, height: int) -> Optional["BoundingBox"]:
        """Intersection with the ``[0, width) x [0, height)`` frame, or None if empty."""
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x2, width), min(self.y2, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union using continuous areas (w * h)."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / float(a.area + b.area - inter)


@dataclass(frozen=True)
class SymbolAnnotation:
    id: str
    class_label: str
    bbox: BoundingBox
    tag: Optional[str] = None


@dataclass(frozen=True)
class Diagram:
    id: str
    image_path: Optional[Path]
    width: int
    height: int
    symbols: tuple[SymbolAnnotation, ...] = ()

    def symbol(self, symbol_id: str) -> SymbolAnnotation:
        for s in self.symbols:
            if s.id == symbol_id:
                return s
        raise KeyError(symbol_id)

    def symbol_map(self) -> dict[str, SymbolAnnotation]:
        return {s.id: s for s in self.symbols}


@dataclass(frozen=True)
class DetectionRecord:
    id: str
    class_label: str
    bbox: BoundingBox
    score: float
    provenance: str = "base"
    tag: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection {self.id}: score {self.score} outside [0, 1]")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"detection {self.id}: unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class DetectionSet:
    diagram_id: str
    detections: tuple[DetectionRecord, ...] = ()

    def __post_init__(self):
        seen = set()
        for d in self.detections:
            if d.id in seen:
                raise ValueError(f"duplicate detection id {d.id!r} in diagram {self.diagram_id!r}")
            seen.add(d.id)

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    def by_id(self) -> dict[str, DetectionRecord]:
        return {d.id: d for d in self.detections}


@dataclass
class Dataset:
    """A loaded dataset file: diagrams plus the class vocabulary."""

    name: str
    classes: list[str]
    diagrams: list[Diagram] = field(default_factory=list)
    root: Optional[Path] = None

    def diagram(self, diagram_id: str) -> Diagram:
        for d in self.diagrams:
            if d.id == diagram_id:
                return d
        raise KeyError(diagram_id)


@dataclass(frozen=True)
class Violation:
    diagram_id: str
    symbol_id: Optional[str]
    message: str

    def __str__(self) -> str:
        where = self.diagram_id if self.symbol_id is None else f"{self.diagram_id}/{self.symbol_id}"
        return f"{where}: {self.message}"


def validate_dataset(diagrams: Iterable[Diagram], classes: Optional[Sequence[str]] = None) -> list[Violation]:
    """Return every invariant violation found; an empty list means the dataset is valid."""
    report: list[Violation] = []
    known = set(classes) if classes is not None else None
    seen_diagrams: set[str] = set()
    for d in diagrams:
        if d.id in seen_diagrams:
            report.append(Violation(d.id, None, "duplicate diagram id"))
        seen_diagrams.add(d.id)
        if d.width <= 0 or d.height <= 0:
            report.append(Violation(d.id, None, f"non-positive image size {d.width}x{d.height}"))
        ids: set[str] = set()
        for s in d.symbols:
            if s.id in ids:
                report.append(Violation(d.id, s.id, "duplicate symbol id"))
            ids.add(s.id)
            if not s.class_label:
                report.append(Violation(d.id, s.id, "empty class label"))
            elif known is not None and s.class_label not in known:
                report.append(Violation(d.id, s.id, f"class {s.class_label!r} not in class list"))
            if not s.bbox.inside(d.width, d.height):
                report.append(Violation(d.id, s.id, f"bbox {s.bbox.as_list()} outside {d.width}x{d.height} image"))
            if s.tag == "":
                report.append(Violation(d.id, s.id, "empty tag string (use null for untagged)"))
    return report


# --------------------------------------------------------------------------
# serialization

def _diagram_to_json(d: Diagram, root: Optional[Path]) -> dict:
    image = None
    if d.image_path is not None:
        image = str(d.image_path)
        if root is not None:
            try:
                image = Path(d.image_path).relative_to(root).as_posix()
            except ValueError:
                pass
    return {
        "id": d.id,
        "image": image,
        "width": d.width,
        "height": d.height,
        "symbols": [
            {"id": s.id, "class": s.class_label, "bbox": s.bbox.as_list(), "tag": s.tag}
            for s in d.symbols
        ],
    }


def dataset_to_json(dataset: Dataset) -> dict:
    return {
        "dataset": dataset.name,
        "classes": list(dataset.classes),
        "diagrams": [_diagram_to_json(d, dataset.root) for d in dataset.diagrams],
    }


def save_dataset(dataset: Dataset, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(dataset_to_json(dataset)), encoding="utf-8")


def dumps(obj) -> str:
    """Canonical JSON text used for every artifact (stable key order and layout)."""
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _read_json(path: Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON ({exc})") from exc


def parse_dataset(obj: dict, root: Optional[Path] = None, validate: bool = True) -> Dataset:
    try:
        classes = [str(c) for c in obj["classes"]]
        diagrams = []
        for dj in obj["diagrams"]:
            did = str(dj["id"])
            symbols = []
            for sj in dj["symbols"]:
                try:
                    bbox = BoundingBox.from_list(sj["bbox"])
                except (ValueError, TypeError) as exc:
                    raise DatasetError(f"diagram {did!r} symbol {sj.get('id')!r}: bad bbox ({exc})") from exc
                symbols.append(SymbolAnnotation(str(sj["id"]), str(sj["class"]), bbox, sj.get("tag")))
            image = dj.get("image")
            image_path = None
            if image is not None:
                image_path = Path(image) if root is None else root / image
            diagrams.append(Diagram(did, image_path, int(dj["width"]), int(dj["height"]), tuple(symbols)))
        dataset = Dataset(str(obj.get("dataset", "")), classes, diagrams, root)
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"dataset does not follow the canonical schema: missing/invalid {exc}") from exc
    if validate:
        problems = validate_dataset(dataset.diagrams, classes)
        if problems:
            raise DatasetError("; ".join(str(p) for p in problems))
    return dataset


def load_dataset(path: Path, validate: bool = True) -> Dataset:
    """Load a canonical dataset file; image paths resolve relative to the file."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    return parse_dataset(_read_json(path), root=path.parent, validate=validate)


def detection_to_json(d: DetectionRecord) -> dict:
    return {
        "id": d.id,
        "class": d.class_label,
        "bbox": d.bbox.as_list(),
        "score": d.score,
        "provenance": d.provenance,
        "tag": d.tag,
    }


def detection_from_json(obj: dict) -> DetectionRecord:
    return DetectionRecord(
        id=str(obj["id"]),
        class_label=str(obj["class"]),
        bbox=BoundingBox.from_list(obj["bbox"]),
        score=float(obj["score"]),
        provenance=obj.get("provenance", "base"),
        tag=obj.get("tag"),
    )


def detections_to_json(sets: Sequence[DetectionSet], name: str = "", classes: Sequence[str] = ()) -> dict:
    return {
        "dataset": name,
        "classes": list(classes),
        "diagrams": [
            {"id": s.diagram_id, "detections": [detection_to_json(d) for d in s.detections]}
            for s in sets
        ],
    }


def save_detections(sets: Sequence[DetectionSet], path: Path, name: str = "", classes: Sequence[str] = ()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(detections_to_json(sets, name, classes)), encoding="utf-8")


def load_detections(path: Path) -> list[DetectionSet]:
    obj = _read_json(Path(path))
    try:
        return [
            DetectionSet(str(dj["id"]), tuple(detection_from_json(x) for x in dj["detections"]))
            for dj in obj["diagrams"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: invalid detections file ({exc})") from exc


def ground_truth_detections(diagram: Diagram, score: float = 1.0) -> DetectionSet:
    """The annotations of a diagram expressed as a detection set."""
    return DetectionSet(
        diagram.id,
        tuple(DetectionRecord(s.id, s.class_label, s.bbox, score, "base", s.tag) for s in diagram.symbols),
    )

"""Grounded VLM-as-a-judge quality assessment and refinement for P&ID symbol detection."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    BoundingBox,
    Dataset,
    DetectionRecord,
    DetectionSet,
    Diagram,
    SymbolAnnotation,
    iou,
    load_dataset,
    validate_dataset,
)

__all__ = [
    "BoundingBox",
    "Dataset",
    "DetectionRecord",
    "DetectionSet",
    "Diagram",
    "SymbolAnnotation",
    "iou",
    "load_dataset",
    "validate_dataset",
]

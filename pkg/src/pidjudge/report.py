"""Tabulate one or more run directories as CSV / JSON / Markdown, plus figures."""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path
from typing import Optional, Sequence

from . import plotting
from .assessor import AssessmentReport
from .corruption import load_logs
from .metrics import MatchingPolicy, score_judge
from .model import DatasetError, dumps, load_dataset

COLUMNS = ("model", "grounding_mode", "precision", "recall", "f1", "map_before", "map_after")
FORMATS = ("csv", "json", "markdown")


def _read(path: Path) -> Optional[dict]:
    path = Path(path)
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def _judge_from_assessments(run_dir: Path, config: dict) -> Optional[dict]:
    """Score the judge straight from assessment files when evaluate has not run."""
    assess_dir = run_dir / "assessment"
    logs_path = run_dir / "injection_logs.json"
    if not assess_dir.is_dir() or not logs_path.exists() or not config.get("dataset_path"):
        return None
    try:
        dataset = load_dataset(Path(config["dataset_path"]))
    except DatasetError:
        return None
    reports = [AssessmentReport.from_json(_read(p)) for p in sorted(assess_dir.glob("*.json"))]
    if not reports:
        return None
    logs = {lg.diagram_id: lg for lg in load_logs(logs_path)}
    ids = {r.diagram_id for r in reports}
    policy = MatchingPolicy(**config.get("matching", {}))
    score = score_judge([c for r in reports for c in r.claims], [logs[i] for i in sorted(ids)],
                        [d for d in dataset.diagrams if d.id in ids], policy)
    return score.to_dict()


def collect_row(run_dir: Path, relative_to: Optional[Path] = None) -> dict:
    run_dir = Path(run_dir)
    manifest = _read(run_dir / "manifest.json") or {}
    config = manifest.get("config", {})
    scores = _read(run_dir / "scores.json") or {}
    judge_cfg = config.get("judge", {})
    model = scores.get("model")
    if model is None and judge_cfg:
        backend, name = judge_cfg.get("backend"), judge_cfg.get("model_name")
        model = name if backend == "http" else f"{backend}:{name}"
    row = {
        "run": os.path.relpath(run_dir, relative_to) if relative_to is not None else str(run_dir),
        "model": model or "",
        "grounding_mode": scores.get("grounding_mode") or config.get("grounding_mode", ""),
        "precision": None, "recall": None, "f1": None,
        "map_before": None, "map_after": None,
        "prompt_template_version": manifest.get("prompt_template_version"),
        "gaps": [],
    }
    judge = scores.get("judge") or _judge_from_assessments(run_dir, config)
    if judge is not None:
        row.update(precision=judge["precision"], recall=judge["recall"], f1=judge["f1"])
    else:
        row["gaps"].append("judge scores")
    if "map_before" in scores:
        row["map_before"] = scores["map_before"]["map_value"]
        row["per_class_before"] = scores["map_before"]["per_class_ap"]
    else:
        row["gaps"].append("mAP before correction")
    if "map_after" in scores:
        row["map_after"] = scores["map_after"]["map_value"]
        row["per_class_after"] = scores["map_after"]["per_class_ap"]
    else:
        row["gaps"].append("mAP after correction")
    return row


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}" if isinstance(v, float) else str(v)


def render_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in COLUMNS])
    return buf.getvalue()


def _md3(v) -> str:
    return "" if v is None else f"{v:.3f}"


def render_markdown(rows: Sequence[dict]) -> str:
    lines = [
        "## Missing Object Assessor Performance",
        "",
        "| Model | Grounding mode | Precision | Recall | F1 |",
        "|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(f"| {r['model']} | {r['grounding_mode']} | {_md3(r['precision'])} | "
                     f"{_md3(r['recall'])} | {_md3(r['f1'])} |")
    lines += [
        "",
        "## System Performance",
        "",
        "| Model | mAP before correction | mAP after correction |",
        "|---|---|---|",
    ]
    for r in rows:
        lines.append(f"| {r['model']} ({r['grounding_mode']}) | {_md3(r['map_before'])} | {_md3(r['map_after'])} |")
    gaps = [(r["run"], r["gaps"]) for r in rows if r["gaps"]]
    if gaps:
        lines += ["", "Missing artifacts:"]
        lines += [f"- {run}: {', '.join(g)}" for run, g in gaps]
    versions = sorted({r["prompt_template_version"] for r in rows if r.get("prompt_template_version")})
    if versions:
        lines += ["", f"Prompt templates: {', '.join(versions)}"]
    return "\n".join(lines) + "\n"


def render_json(rows: Sequence[dict]) -> str:
    return dumps({"columns": list(COLUMNS), "rows": list(rows)})


def write_figures(rows: Sequence[dict], fig_dir: Path) -> list[Path]:
    written = []
    for p in (
        plotting.judge_scores_figure(rows, fig_dir / "judge_scores.png"),
        plotting.map_correction_figure(rows, fig_dir / "map_correction.png"),
    ):
        if p is not None:
            written.append(p)
    for i, r in enumerate(rows):
        if "per_class_before" in r and "per_class_after" in r:
            p = plotting.per_class_ap_figure(r["per_class_before"], r["per_class_after"],
                                             f"{r['model']} / {r['grounding_mode']}",
                                             fig_dir / f"per_class_ap_{i:02d}.png")
            if p is not None:
                written.append(p)
    return written


def emit_report(run_dirs: Sequence[Path], fmt: str, output: Path, figures: bool = True) -> Path:
    """Write one table row per run directory; figures go to ``figures/`` next to ``output``."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; choose from {FORMATS}")
    output = Path(output)
    rows = [collect_row(Path(d), output.parent) for d in run_dirs]
    render = {"csv": render_csv, "json": render_json, "markdown": render_markdown}[fmt]
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_text(render(rows), encoding="utf-8")
    if figures:
        write_figures(rows, output.parent / "figures")
    return output

"""Run configuration and the inject -> assess -> refine -> evaluate stages.

Every stage reads and writes plain JSON artifacts under the run's output
directory, so stages can be run (and re-run) one at a time.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from . import __version__
from .assessor import AssessmentReport, AssessorConfig, assess_diagram
from .corruption import CorruptionSpec, InjectionLog, inject_errors, load_logs, save_logs, summarize_injection
from .gateway import ModelConfig, OracleContext, estimate_image_tokens, estimate_text_tokens, make_backend
from .grounding import GroundingMode, PromptTemplates, box_qa_text, missing_judge_text
from .imaging import DEFAULT_STRIDE, DEFAULT_TILE_SIZE, OverlayStyle, Tile, expand_box, load_image, tile_windows
from .metrics import MatchingPolicy, compare_runs, compute_map, score_judge
from .model import (
    Dataset,
    DatasetError,
    DetectionSet,
    dumps,
    ground_truth_detections,
    load_dataset,
    load_detections,
    save_detections,
)
from .refinement import RefinementConfig, RefinementResult, merge_detections, refine_diagram

log = logging.getLogger(__name__)

CORRUPTED = "corrupted_detections.json"
LOGS = "injection_logs.json"
FINAL = "final_detections.json"
SCORES = "scores.json"
MANIFEST = "manifest.json"
ASSESS_DIR = "assessment"
REFINE_DIR = "refinement"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


@dataclass
class RunConfig:
    dataset_path: Optional[Path] = None
    out_dir: Path = Path("runs/default")
    corruption: CorruptionSpec = CorruptionSpec()
    grounding_mode: GroundingMode = GroundingMode.VISUAL_TAGS_COORDS
    tile_size: int = DEFAULT_TILE_SIZE
    stride: int = DEFAULT_STRIDE
    overlay: OverlayStyle = OverlayStyle()
    judge: ModelConfig = ModelConfig()
    detector: ModelConfig = ModelConfig()
    matching: MatchingPolicy = MatchingPolicy()
    merge_iou: float = 0.5
    dedup_iou: float = 0.5
    qa_margin: float = 0.5
    region_margin: float = 1.0
    default_score: float = 0.9
    map_iou: float = 0.5
    seed: Optional[int] = None
    strict: bool = False
    template_dir: Optional[Path] = None
    save_prompts: bool = False
    report_formats: tuple[str, ...] = ("csv", "markdown", "json")
    figures: bool = True
    # execution width only; results do not depend on it, so it stays out of the manifest
    threads: Optional[int] = None

    def __post_init__(self):
        self.grounding_mode = GroundingMode.parse(self.grounding_mode)
        if self.seed is not None:
            self.corruption = replace(self.corruption, seed=int(self.seed))
            self.judge = replace(self.judge, noise=replace(self.judge.noise, seed=int(self.seed)))
            self.detector = replace(self.detector, noise=replace(self.detector.noise, seed=int(self.seed)))
        if self.tile_size <= 0 or not 0 < self.stride <= self.tile_size:
            raise ConfigError(f"need 0 < stride <= tile_size (got {self.stride}, {self.tile_size})")

    @property
    def workers(self) -> int:
        return self.threads if self.threads is not None else self.judge.max_concurrency

    def snapshot(self) -> dict:
        """Every effective setting except the thread count, JSON-ready."""
        return {
            "dataset_path": str(self.dataset_path) if self.dataset_path is not None else None,
            "corruption": self.corruption.to_dict(),
            "grounding_mode": self.grounding_mode.value,
            "tile_size": self.tile_size,
            "stride": self.stride,
            "overlay": {"color": list(self.overlay.color), "thickness": self.overlay.thickness},
            "judge": _jsonable(self.judge.to_dict()),
            "detector": _jsonable(self.detector.to_dict()),
            "matching": asdict(self.matching),
            "merge_iou": self.merge_iou,
            "dedup_iou": self.dedup_iou,
            "qa_margin": self.qa_margin,
            "region_margin": self.region_margin,
            "default_score": self.default_score,
            "map_iou": self.map_iou,
            "seed": self.seed,
            "strict": self.strict,
            "template_dir": str(self.template_dir) if self.template_dir is not None else None,
            "save_prompts": self.save_prompts,
            "report_formats": list(self.report_formats),
            "figures": self.figures,
        }


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


_SCALARS = ("merge_iou", "dedup_iou", "qa_margin", "region_margin", "default_score", "map_iou",
            "tile_size", "stride", "seed", "strict", "save_prompts", "figures", "threads")


def config_from_dict(obj: dict, base_dir: Optional[Path] = None) -> RunConfig:
    """Build a RunConfig from the key/value mapping of a config file."""
    obj = dict(obj)
    base_dir = Path(base_dir) if base_dir is not None else Path(".")

    def path(v):
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else base_dir / p

    kw: dict[str, Any] = {}
    try:
        if "dataset" in obj or "dataset_path" in obj:
            kw["dataset_path"] = path(obj.pop("dataset", None) or obj.pop("dataset_path", None))
        if "out" in obj or "out_dir" in obj:
            kw["out_dir"] = path(obj.pop("out", None) or obj.pop("out_dir", None))
        corr = obj.pop("corruption", None)
        if isinstance(corr, (str, Path)):
            kw["corruption"] = CorruptionSpec.load(path(corr))
        elif isinstance(corr, dict):
            kw["corruption"] = CorruptionSpec.from_dict(corr)
        if "grounding_mode" in obj:
            kw["grounding_mode"] = GroundingMode.parse(obj.pop("grounding_mode"))
        if "overlay" in obj:
            ov = obj.pop("overlay")
            kw["overlay"] = OverlayStyle(tuple(ov.get("color", (255, 0, 0))), int(ov.get("thickness", 3)))
        for name in ("judge", "detector"):
            if name in obj:
                kw[name] = ModelConfig.from_dict(obj.pop(name))
        if "matching" in obj:
            kw["matching"] = MatchingPolicy(**obj.pop("matching"))
        if "template_dir" in obj:
            kw["template_dir"] = path(obj.pop("template_dir"))
        if "report_formats" in obj:
            kw["report_formats"] = tuple(obj.pop("report_formats"))
        for name in _SCALARS:
            if name in obj:
                kw[name] = obj.pop(name)
        if obj:
            raise ConfigError(f"unknown config keys: {sorted(obj)}")
        return RunConfig(**kw)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError, OSError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Path, overrides: Optional[dict] = None) -> RunConfig:
    """Read a YAML config file; ``overrides`` (e.g. from CLI flags) win over file values."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        obj = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a key/value mapping")
    merged = _deep_merge(obj, overrides or {})
    return config_from_dict(merged, path.parent)


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


# --------------------------------------------------------------------------
# stages

class Run:
    """Artifacts and stage functions for one output directory."""

    def __init__(self, config: RunConfig, dataset: Optional[Dataset] = None):
        self.config = config
        self.out = Path(config.out_dir)
        if dataset is None:
            if config.dataset_path is None:
                raise ConfigError("no dataset given")
            try:
                dataset = load_dataset(config.dataset_path)
            except DatasetError as exc:
                raise ConfigError(str(exc)) from exc
        self.dataset = dataset
        self.templates = PromptTemplates(config.template_dir)
        self._images: dict[str, Any] = {}

    # -- helpers
    def _write(self, rel: str, obj: Any) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(obj), encoding="utf-8")
        return path

    def image(self, diagram):
        if diagram.image_path is None or not Path(diagram.image_path).exists():
            raise ConfigError(f"image for diagram {diagram.id} not found: {diagram.image_path}")
        return load_image(diagram.image_path)

    def corrupted(self) -> dict[str, DetectionSet]:
        return {s.diagram_id: s for s in load_detections(self._need(CORRUPTED))}

    def logs(self) -> dict[str, InjectionLog]:
        return {log.diagram_id: log for log in load_logs(self._need(LOGS))}

    def _need(self, rel: str) -> Path:
        path = self.out / rel
        if not path.exists():
            raise ConfigError(f"missing artifact {path}; run the earlier stage first")
        return path

    def context(self, diagram, log_, detections) -> Optional[OracleContext]:
        return OracleContext(diagram, log_, detections, list(self.dataset.classes))

    def assessments(self) -> dict[str, AssessmentReport]:
        out = {}
        for d in self.dataset.diagrams:
            path = self.out / ASSESS_DIR / f"{d.id}.json"
            if path.exists():
                out[d.id] = AssessmentReport.from_json(_read(path))
        return out

    def refinements(self) -> dict[str, RefinementResult]:
        out = {}
        for d in self.dataset.diagrams:
            path = self.out / REFINE_DIR / f"{d.id}.json"
            if path.exists():
                out[d.id] = RefinementResult.from_json(_read(path))
        return out

    # -- stages
    def inject(self) -> dict:
        sets, logs = [], []
        for d in self.dataset.diagrams:
            s, lg = inject_errors(d, self.config.corruption, self.dataset.classes)
            sets.append(s)
            logs.append(lg)
        save_detections(sets, self.out / CORRUPTED, self.dataset.name, self.dataset.classes)
        save_logs(logs, self.out / LOGS)
        totals: dict[str, int] = {}
        for lg in logs:
            for k, v in summarize_injection(lg).items():
                totals[k] = totals.get(k, 0) + v
        return {"diagrams": len(sets), "injected": totals}

    def assess(self, resume: bool = False) -> dict:
        cfg = self.config
        judge = make_backend(cfg.judge)
        acfg = AssessorConfig(
            mode=cfg.grounding_mode, tile_size=cfg.tile_size, stride=cfg.stride, style=cfg.overlay,
            qa_margin=cfg.qa_margin, dedup_iou=cfg.dedup_iou, classes=list(self.dataset.classes),
            max_concurrency=cfg.workers, strict=cfg.strict, templates=self.templates,
            prompt_dump_dir=self.out / "prompts" if cfg.save_prompts else None,
        )
        corrupted, logs = self.corrupted(), self.logs()
        previous = self.assessments() if resume else {}
        failed = 0
        for d in self.dataset.diagrams:
            prev = previous.get(d.id)
            if prev is not None and not prev.tiles_failed and not prev.tiles_unparsed:
                continue
            dets = corrupted[d.id]
            report = assess_diagram(dets, d, self.image(d), judge, acfg, self.context(d, logs[d.id], dets), prev)
            failed += len(report.tiles_failed)
            self._write(f"{ASSESS_DIR}/{d.id}.json", report.to_json())
        reports = self.assessments()
        return {
            "diagrams": len(reports),
            "claims": sum(len(r.claims) for r in reports.values()),
            "raw_claims": sum(r.raw_claim_count for r in reports.values()),
            "tiles_failed": sum(len(r.tiles_failed) for r in reports.values()),
            "tiles_unparsed": sum(len(r.tiles_unparsed) for r in reports.values()),
            "dispositions": _disposition_counts(reports.values()),
            "prompt_template_version": self.templates.version,
            "token_usage": _sum_usage(r.token_usage for r in reports.values()),
        }

    def refine(self) -> dict:
        cfg = self.config
        detector = make_backend(cfg.detector)
        rcfg = RefinementConfig(
            region_margin=cfg.region_margin, merge_iou=cfg.merge_iou, default_score=cfg.default_score,
            classes=list(self.dataset.classes), max_concurrency=cfg.workers, strict=cfg.strict,
            templates=self.templates,
        )
        corrupted, logs, reports = self.corrupted(), self.logs(), self.assessments()
        finals = []
        for d in self.dataset.diagrams:
            if d.id not in reports:
                raise ConfigError(f"no assessment report for diagram {d.id}; run assess first")
            dets = corrupted[d.id]
            result = refine_diagram(reports[d.id], dets, d, self.image(d), detector, rcfg,
                                    self.context(d, logs[d.id], dets))
            self._write(f"{REFINE_DIR}/{d.id}.json", result.to_json())
            finals.append(result.final)
        save_detections(finals, self.out / FINAL, self.dataset.name, self.dataset.classes)
        results = self.refinements()
        return {
            "recovered": sum(len(r.recovered) for r in results.values()),
            "relocalized": sum(len(r.relocalized) for r in results.values()),
            "dropped": sum(len(r.dropped) for r in results.values()),
            "discarded_claims": sum(len(r.discarded_claims) for r in results.values()),
            "failed_claims": sum(len(r.failed_claims) for r in results.values()),
            "token_usage": _sum_usage(r.token_usage for r in results.values()),
        }

    def evaluate(self) -> dict:
        cfg = self.config
        diagrams = self.dataset.diagrams
        classes = self.dataset.classes
        logs = self.logs()
        scores: dict[str, Any] = {"model": cfg.judge.label, "detector": cfg.detector.label,
                                  "grounding_mode": cfg.grounding_mode.value}
        reports = self.assessments()
        if reports:
            claims = [c for r in reports.values() for c in r.claims]
            per: dict = {}
            judge = score_judge(claims, [logs[d] for d in reports], [d for d in diagrams if d.id in reports],
                                cfg.matching, per)
            scores["judge"] = judge.to_dict()
            scores["judge_per_diagram"] = {k: v.to_dict() for k, v in sorted(per.items())}
            scores["total_omitted"] = sum(len(logs[d].omitted) for d in reports)
        corrupted = self.corrupted()
        before = compute_map(list(corrupted.values()), diagrams, cfg.map_iou, classes)
        scores["map_before"] = before.to_dict()
        if (self.out / FINAL).exists():
            final = load_detections(self.out / FINAL)
            after = compute_map(final, diagrams, cfg.map_iou, classes)
            scores["map_after"] = after.to_dict()
            scores["comparison"] = compare_runs(before, after)
            scores["map_variants"] = self._map_variants(corrupted)
        self._write(SCORES, scores)
        return {k: scores[k] for k in ("judge", "comparison") if k in scores}

    def _map_variants(self, corrupted: dict[str, DetectionSet]) -> dict:
        """mAP with each correction applied alone, so contributions can be told apart."""
        cfg = self.config
        results = self.refinements()
        recovery_only, qa_only = [], []
        for d in self.dataset.diagrams:
            r = results[d.id]
            base = list(corrupted[d.id].detections)
            recovery_only.append(merge_detections(base, [], r.recovered, cfg.merge_iou, d.id))
            skip = {x.id for x in r.relocalized} | set(r.dropped)
            kept = [x for x in base if x.id not in skip]
            qa_only.append(merge_detections(kept, r.relocalized, [], cfg.merge_iou, d.id))
        return {
            "recovery_only": compute_map(recovery_only, self.dataset.diagrams, cfg.map_iou).map_value,
            "box_qa_only": compute_map(qa_only, self.dataset.diagrams, cfg.map_iou).map_value,
        }

    def write_manifest(self, stages: dict) -> None:
        path = self.out / MANIFEST
        manifest = _read(path) if path.exists() else {}
        manifest["pidjudge_version"] = __version__
        manifest["config"] = self.config.snapshot()
        manifest["prompt_template_version"] = self.templates.version
        manifest.setdefault("stages", {}).update(_jsonable(stages))
        usage = [s.get("token_usage", {}) for s in manifest["stages"].values() if isinstance(s, dict)]
        manifest["token_usage"] = _sum_usage(usage)
        self._write(MANIFEST, manifest)


def _read(path: Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _sum_usage(items) -> dict:
    total = {"input_tokens": 0, "output_tokens": 0, "calls": 0}
    for u in items:
        for k in total:
            total[k] += int(u.get(k, 0)) if u else 0
    return total


def _disposition_counts(reports) -> dict:
    counts = {"keep": 0, "drop": 0, "relocalize": 0}
    for r in reports:
        for v in r.verdicts:
            counts[v.disposition] += 1
    return counts


def run_pipeline(config: RunConfig, dataset: Optional[Dataset] = None) -> int:
    """Run every stage and write reports; returns the CLI exit status (0 ok, 1 partial)."""
    from .report import emit_report

    run = Run(config, dataset)
    run.out.mkdir(parents=True, exist_ok=True)
    stages: dict[str, Any] = {}
    stages["inject"] = run.inject()
    stages["assess"] = run.assess()
    stages["refine"] = run.refine()
    stages["evaluate"] = run.evaluate()
    run.write_manifest(stages)
    for fmt in config.report_formats:
        emit_report([run.out], fmt, run.out / f"report.{_EXT[fmt]}", figures=config.figures)
    partial = stages["assess"]["tiles_failed"] or stages["refine"]["failed_claims"]
    return 1 if partial else 0


_EXT = {"csv": "csv", "json": "json", "markdown": "md"}


# --------------------------------------------------------------------------
# budget

def estimate_budget(dataset: Dataset, config: RunConfig) -> dict:
    """Input-token estimate for one judge pass over ``dataset``.

    Uses the ground-truth annotations as a stand-in for the base detector's
    output when building prompt text; images are costed with the
    16x16-pixel patch rule and text at 4 bytes per token.
    """
    templates = PromptTemplates(config.template_dir)
    tiles = judge_tokens = qa_tokens = qa_calls = 0
    for d in dataset.diagrams:
        dets = ground_truth_detections(d)
        for idx, win in tile_windows(d.width, d.height, config.tile_size, config.stride):
            text = missing_judge_text(Tile(idx, win), dets, config.grounding_mode, config.overlay,
                                      dataset.classes, templates)
            judge_tokens += estimate_image_tokens(win.w, win.h) + estimate_text_tokens(text)
            tiles += 1
        for det in dets:
            win = expand_box(det.bbox, config.qa_margin, d.width, d.height)
            text = box_qa_text(det, dataset.classes, config.overlay, templates)
            qa_tokens += estimate_image_tokens(win.w, win.h) + estimate_text_tokens(text)
            qa_calls += 1
    return {
        "diagrams": len(dataset.diagrams),
        "tiles": tiles,
        "box_qa_calls": qa_calls,
        "missing_judge_input_tokens": judge_tokens,
        "box_qa_input_tokens": qa_tokens,
        "total_input_tokens": judge_tokens + qa_tokens,
        "grounding_mode": config.grounding_mode.value,
        "tile_size": config.tile_size,
        "stride": config.stride,
    }

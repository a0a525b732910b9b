"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line through the ``acceptance`` fixture;
the lines are printed together in the pytest terminal summary.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from pidjudge.assessor import MissingClaim
from pidjudge.corruption import CorruptionSpec
from pidjudge.gateway import ModelConfig, NoiseProfile
from pidjudge.grounding import GroundingMode, coords_block, collect_tags, missing_judge_text, serialize_coords, tags_block
from pidjudge.imaging import Tile, tile_windows
from pidjudge.metrics import JudgeScore, MatchingPolicy, average_precision, compute_map, match_claims
from pidjudge.model import (
    BoundingBox,
    DetectionRecord,
    DetectionSet,
    Diagram,
    SymbolAnnotation,
    iou,
    load_detections,
)
from pidjudge.pipeline import Run, RunConfig, estimate_budget, run_pipeline
from pidjudge.synthetic import make_dataset

FULL_SPEC = CorruptionSpec(omission_rate=0.2, resize_rate=0.2, resize_max_frac=0.4, offset_rate=0.3,
                           offset_max_frac=0.4, false_positive_rate=0.1, class_swap_rate=0.1)


def _config(dataset, out: Path, **kw) -> RunConfig:
    kw.setdefault("report_formats", ())
    kw.setdefault("figures", False)
    return RunConfig(dataset_path=dataset.root / "dataset.json", out_dir=out, corruption=FULL_SPEC, **kw)


def _scores(out: Path) -> dict:
    return json.loads((out / "scores.json").read_text())


def _noisy_judge(prob=0.9, spurious=0.5) -> ModelConfig:
    return ModelConfig(backend="mock-noisy", noise=NoiseProfile(claim_detect_prob=prob, spurious_claim_rate=spurious))


# 1 -------------------------------------------------------------------------

def test_criterion_01_oracle_closure(synth10, tmp_path, acceptance):
    cfg = _config(synth10, tmp_path / "closure", seed=0, threads=8)
    t0 = time.perf_counter()
    status = run_pipeline(cfg, synth10)
    elapsed = time.perf_counter() - t0
    s = _scores(tmp_path / "closure")
    judge = s["judge"]
    final = {f.diagram_id: f for f in load_detections(tmp_path / "closure" / "final_detections.json")}
    # every GT symbol has exactly one same-class final box, and no extra boxes remain
    closure = all(len(final[d.id]) == len(d.symbols) for d in synth10.diagrams) and all(
        sum(1 for f in final[d.id] if f.class_label == g.class_label and iou(f.bbox, g.bbox) >= 0.75) == 1
        for d in synth10.diagrams for g in d.symbols
    )
    ok = (status == 0 and judge["precision"] == 1.0 and judge["recall"] == 1.0 and judge["f1"] == 1.0
          and s["map_after"]["map_value"] == 1.0 and closure and elapsed < 60.0)
    detail = (f"P={judge['precision']:.3f} R={judge['recall']:.3f} F1={judge['f1']:.3f} "
              f"mAP {s['map_before']['map_value']:.3f}->{s['map_after']['map_value']:.3f} "
              f"TP={judge['tp']} in {elapsed:.1f}s (limit 60s)")
    acceptance(1, ok, detail)
    assert ok, detail


# 2 and 5 share the twenty noisy runs --------------------------------------

@pytest.fixture(scope="module")
def noisy_runs(synth10, tmp_path_factory):
    root = tmp_path_factory.mktemp("noisy")
    out = []
    for seed in range(20):
        cfg = _config(synth10, root / f"seed{seed:02d}", seed=seed, judge=_noisy_judge(), threads=8)
        run_pipeline(cfg, synth10)
        out.append(_scores(cfg.out_dir))
    return out


def test_criterion_02_noisy_judge_improves_map(noisy_runs, acceptance):
    pairs = [(s["map_before"]["map_value"], s["map_after"]["map_value"]) for s in noisy_runs]
    improved = sum(after > before for before, after in pairs)
    mean_b = float(np.mean([b for b, _ in pairs]))
    mean_a = float(np.mean([a for _, a in pairs]))
    ok = improved >= 19
    detail = f"{improved}/20 seeds improved; mean mAP {mean_b:.3f}->{mean_a:.3f} (need >= 19)"
    acceptance(2, ok, detail)
    assert ok, detail


# 3 -------------------------------------------------------------------------

def test_criterion_03_noisy_recall_calibration(synth10, tmp_path, acceptance):
    tp = fn = 0
    for seed in range(6):
        cfg = _config(synth10, tmp_path / f"cal{seed}", seed=100 + seed, judge=_noisy_judge(prob=0.85), threads=8)
        run = Run(cfg, synth10)
        run.inject()
        run.assess()
        run.evaluate()
        j = _scores(cfg.out_dir)["judge"]
        tp, fn = tp + j["tp"], fn + j["fn"]
    missed = tp + fn
    recall = tp / missed
    ok = missed >= 500 and abs(recall - 0.85) <= 0.05
    detail = f"recall {recall:.4f} over {missed} missed symbols (target 0.85 +/- 0.05, need >= 500)"
    acceptance(3, ok, detail)
    assert ok, detail


# 4 -------------------------------------------------------------------------

def test_criterion_04_map_engine(synth10, tmp_path, acceptance):
    ap = average_precision([True, False, True], 3)
    gt = [SymbolAnnotation(f"g{i}", "valve", BoundingBox(100 * i, 0, 20, 20)) for i in range(3)]
    d = Diagram("H", None, 400, 100, tuple(gt))
    ranked = DetectionSet("H", (
        DetectionRecord("a", "valve", BoundingBox(0, 0, 20, 20), 0.9),
        DetectionRecord("b", "valve", BoundingBox(300, 50, 20, 20), 0.8),
        DetectionRecord("c", "valve", BoundingBox(100, 0, 20, 20), 0.7),
    ))
    engine_ap = compute_map(ranked, d).map_value

    zero = CorruptionSpec(0, 0, 0.4, 0, 0.4, 0, 0)
    run = Run(RunConfig(dataset_path=synth10.root / "dataset.json", out_dir=tmp_path / "zero", corruption=zero),
              synth10)
    run.inject()
    run.evaluate()
    zero_map = _scores(tmp_path / "zero")["map_before"]["map_value"]
    empty_map = compute_map([DetectionSet(x.id, ()) for x in synth10.diagrams], synth10.diagrams).map_value

    ok = (abs(ap - 0.555556) <= 1e-6 and abs(engine_ap - 0.555556) <= 1e-6
          and zero_map == 1.0 and empty_map == 0.0)
    detail = f"AP(TP,FP,TP)={engine_ap:.6f} zero-corruption mAP={zero_map!r} empty mAP={empty_map!r}"
    acceptance(4, ok, detail)
    assert ok, detail


# 5 -------------------------------------------------------------------------

def test_criterion_05_judge_formulas(noisy_runs, acceptance):
    s = JudgeScore.from_counts(tp=2, fp=2, fn=1)
    formulas = (abs(s.precision - 0.5) <= 1e-6 and abs(s.recall - 0.666667) <= 1e-6
                and abs(s.f1 - 0.571429) <= 1e-6)
    conserved = [r["judge"]["tp"] + r["judge"]["fn"] == r["total_omitted"] for r in noisy_runs]
    ok = formulas and all(conserved)
    detail = (f"P={s.precision:.6f} R={s.recall:.6f} F1={s.f1:.6f}; "
              f"TP+FN == omitted on {sum(conserved)}/{len(conserved)} runs")
    acceptance(5, ok, detail)
    assert ok, detail


# 6 -------------------------------------------------------------------------

def _exhaustive_max(adjacency: list[list[int]]) -> int:
    """Largest matching by searching every assignment (memoized over used-GT masks)."""

    @lru_cache(maxsize=None)
    def best(i: int, used: int) -> int:
        if i == len(adjacency):
            return 0
        value = best(i + 1, used)
        for j in adjacency[i]:
            if not used >> j & 1:
                value = max(value, 1 + best(i + 1, used | 1 << j))
        return value

    return best(0, 0)


def test_criterion_06_matching_optimality(acceptance):
    rng = np.random.default_rng(20240601)
    policy = MatchingPolicy()
    tags = ["AA-1", "AA-2", "AA-3", None, None]
    mismatches = 0
    for trial in range(1000):
        n_c, n_g = int(rng.integers(0, 9)), int(rng.integers(0, 9))

        def box():
            w, h = int(rng.integers(15, 60)), int(rng.integers(15, 60))
            return BoundingBox(int(rng.integers(0, 150)), int(rng.integers(0, 150)), w, h)

        gts = [SymbolAnnotation(f"g{j}", "valve", box(), tags[int(rng.integers(0, len(tags)))]) for j in range(n_g)]
        claims = [MissingClaim("D", (0, 0), box(), None, tags[int(rng.integers(0, len(tags)))]) for _ in range(n_c)]
        pairs = match_claims(claims, gts, policy)

        def compatible(c, g):
            return (c.nearby_tag is not None and c.nearby_tag == g.tag) or iou(c.approx_bbox, g.bbox) >= 0.3

        valid = (len({id(c) for c, _ in pairs}) == len(pairs) and len({g.id for _, g in pairs}) == len(pairs)
                 and all(compatible(c, g) for c, g in pairs))
        adjacency = [[j for j, g in enumerate(gts) if compatible(c, g)] for c in claims]
        if not valid or len(pairs) != _exhaustive_max(adjacency):
            mismatches += 1
    ok = mismatches == 0
    detail = f"{1000 - mismatches}/1000 instances equal the exhaustive maximum"
    acceptance(6, ok, detail)
    assert ok, detail


# 7 -------------------------------------------------------------------------

def _digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_07_determinism(synth3, tmp_path, acceptance):
    base = _config(synth3, tmp_path / "a", seed=7, judge=_noisy_judge(),
                   report_formats=("csv", "markdown", "json"), figures=True)
    trees = {}
    for name, threads in (("a", 1), ("b", 1), ("c", 8)):
        cfg = replace(base, out_dir=tmp_path / name, threads=threads)
        run_pipeline(cfg, synth3)
        trees[name] = _digest(tmp_path / name)
    same_runs = trees["a"] == trees["b"]
    same_threads = trees["a"] == trees["c"]
    ok = same_runs and same_threads and len(trees["a"]) > 10
    detail = (f"{len(trees['a'])} files; repeat run identical={same_runs}; "
              f"threads 1 vs 8 identical={same_threads}")
    acceptance(7, ok, detail)
    assert ok, detail


# 8 -------------------------------------------------------------------------

def test_criterion_08_tiling_containment(acceptance):
    W, H = 7168, 4561
    windows = np.array([w.as_list() for _, w in tile_windows(W, H, 1024, 896)])
    rng = np.random.default_rng(8)
    n = 10_000
    w = rng.integers(1, 129, n)
    h = rng.integers(1, 129, n)
    x = rng.integers(0, W - w + 1)
    y = rng.integers(0, H - h + 1)
    wx, wy, ww, wh = (windows[:, k][None, :] for k in range(4))
    inside = ((x[:, None] >= wx) & (y[:, None] >= wy)
              & (x[:, None] + w[:, None] <= wx + ww) & (y[:, None] + h[:, None] <= wy + wh))
    contained = int(inside.any(axis=1).sum())
    ok = contained == n and len(windows) == 40
    detail = f"{contained}/{n} boxes fully inside at least one of {len(windows)} tiles"
    acceptance(8, ok, detail)
    assert ok, detail


# 9 -------------------------------------------------------------------------

def test_criterion_09_grounding_content(acceptance):
    rng = np.random.default_rng(9)
    classes = ["valve", "pump", "gate valve", "instrument"]
    failures = 0
    for k in range(100):
        win = BoundingBox(int(rng.integers(0, 4)) * 896, int(rng.integers(0, 3)) * 896, 1024, 1024)
        dets = []
        for i in range(int(rng.integers(0, 12))):
            bw, bh = int(rng.integers(20, 97)), int(rng.integers(20, 97))
            bx = int(rng.integers(max(win.x - 200, 0), win.x2 + 200))
            by = int(rng.integers(max(win.y - 200, 0), win.y2 + 200))
            tag = f"{chr(65 + int(rng.integers(0, 26)))}{chr(65 + int(rng.integers(0, 26)))}-{int(rng.integers(10000, 99999))}"
            dets.append(DetectionRecord(f"d{i}", classes[int(rng.integers(0, 4))], BoundingBox(bx, by, bw, bh),
                                        0.9, "base", tag if rng.random() < 0.8 else None))
        ds = DetectionSet(f"F{k}", tuple(dets))
        tile = Tile((0, 0), win)
        texts = {m: missing_judge_text(tile, ds, m, class_list=classes) for m in GroundingMode}
        tags = tags_block(collect_tags(ds, tile))
        coords = coords_block(serialize_coords(ds, tile))
        combined = texts[GroundingMode.VISUAL_TAGS_COORDS]
        good = (
            tags in texts[GroundingMode.VISUAL_PLUS_TAGS] and coords in texts[GroundingMode.VISUAL_PLUS_COORDS]
            and tags in combined and coords in combined
            and tags not in texts[GroundingMode.VISUAL_ONLY] and coords not in texts[GroundingMode.VISUAL_ONLY]
        )
        failures += not good
    ok = failures == 0
    detail = f"{100 - failures}/100 fixtures: VisualTagsCoords holds the tag block and the coordinate block verbatim"
    acceptance(9, ok, detail)
    assert ok, detail


# 10 ------------------------------------------------------------------------

def test_criterion_10_budget(tmp_path, acceptance):
    dataset = make_dataset(500, seed=10, out_dir=tmp_path / "budget", render=False)
    est = estimate_budget(dataset, RunConfig())
    total = est["total_input_tokens"]
    ok = 1_000_000 <= total <= 60_000_000
    detail = (f"{total / 1e6:.2f}M input tokens for {est['diagrams']} diagrams / {est['tiles']} tiles "
              f"(band 1M..60M)")
    acceptance(10, ok, detail)
    assert ok, detail

import csv
import hashlib
import json
from pathlib import Path

import pytest

from helpers import make_diagram
from pidjudge.cli import main
from pidjudge.grounding import GroundingMode, missing_judge_text
from pidjudge.gateway import estimate_image_tokens, estimate_text_tokens
from pidjudge.imaging import Tile
from pidjudge.model import BoundingBox, Dataset, DetectionSet
from pidjudge.pipeline import ConfigError, RunConfig, estimate_budget, load_config

GOLDEN = Path(__file__).parent / "golden" / "noisy_scores.json"


def ds_path(dataset: Dataset) -> str:
    return str(dataset.root / "dataset.json")


def tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def scores(out: Path) -> dict:
    return json.loads((out / "scores.json").read_text())


def test_run_perfect_oracle(synth3, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--dataset", ds_path(synth3), "--out", str(out), "--seed", "0"]) == 0
    s = scores(out)
    assert s["judge"]["f1"] == 1.0
    assert s["map_after"]["map_value"] == 1.0
    assert s["map_before"]["map_value"] < 1.0
    assert s["judge"]["tp"] + s["judge"]["fn"] == s["total_omitted"]
    for name in ("manifest.json", "corrupted_detections.json", "injection_logs.json", "final_detections.json",
                 "report.csv", "report.md", "report.json", "figures/map_correction.png"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["prompt_template_version"].startswith("pidjudge-prompts-1+")
    assert "threads" not in manifest["config"]
    assert json.loads(capsys.readouterr().out)["exit"] == 0


def test_same_command_twice_is_identical(synth3, tmp_path):
    args = ["run", "--dataset", ds_path(synth3), "--seed", "4", "--judge-backend", "mock-noisy", "--no-figures"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_noisy_run_matches_golden_and_improves(synth3, tmp_path):
    out = tmp_path / "noisy"
    assert main(["run", "--dataset", ds_path(synth3), "--out", str(out), "--seed", "11",
                 "--judge-backend", "mock-noisy", "--no-figures"]) == 0
    s = scores(out)
    assert s["map_after"]["map_value"] > s["map_before"]["map_value"]
    observed = {"judge": s["judge"], "map_before": s["map_before"]["map_value"],
                "map_after": s["map_after"]["map_value"]}
    golden = json.loads(GOLDEN.read_text())
    assert observed["judge"] == golden["judge"]
    assert observed["map_before"] == pytest.approx(golden["map_before"], abs=1e-12)
    assert observed["map_after"] == pytest.approx(golden["map_after"], abs=1e-12)


def test_stages_one_by_one_equal_run(synth3, tmp_path):
    common = ["--dataset", ds_path(synth3), "--seed", "2", "--judge-backend", "mock-noisy"]
    staged = tmp_path / "staged"
    for stage in ("inject", "assess", "refine", "evaluate"):
        assert main([stage, *common, "--out", str(staged)]) == 0
    full = tmp_path / "full"
    assert main(["run", *common, "--out", str(full), "--no-figures"]) == 0
    assert scores(staged) == scores(full)


def test_assess_resume_without_failures_changes_nothing(synth3, tmp_path):
    common = ["--dataset", ds_path(synth3), "--out", str(tmp_path / "r")]
    assert main(["inject", *common]) == 0
    assert main(["assess", *common]) == 0
    before = tree_digest(tmp_path / "r" / "assessment")
    assert main(["assess", *common, "--resume"]) == 0
    assert tree_digest(tmp_path / "r" / "assessment") == before


def test_report_csv_header_and_partial_run(synth3, tmp_path):
    out = tmp_path / "partial"
    common = ["--dataset", ds_path(synth3), "--out", str(out)]
    assert main(["inject", *common]) == 0
    assert main(["assess", *common]) == 0
    assert main(["report", str(out), "--format", "csv", "--output", str(tmp_path / "rep.csv")]) == 0
    rows = list(csv.reader((tmp_path / "rep.csv").open()))
    assert rows[0] == ["model", "grounding_mode", "precision", "recall", "f1", "map_before", "map_after"]
    assert rows[1][2:5] == ["1.000000", "1.000000", "1.000000"]
    assert rows[1][5:] == ["", ""]
    assert main(["report", str(out), "--format", "markdown", "--output", str(tmp_path / "rep.md"),
                 "--no-figures"]) == 0
    md = (tmp_path / "rep.md").read_text()
    assert "mAP before correction" in md and "mAP after correction" in md
    assert "Missing artifacts" in md


def test_report_all_formats(synth3, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--dataset", ds_path(synth3), "--out", str(out), "--no-figures"]) == 0
    rep = tmp_path / "rep"
    assert main(["report", str(out), str(out), "--format", "all", "--output", str(rep)]) == 0
    data = json.loads((rep / "report.json").read_text())
    assert len(data["rows"]) == 2 and data["rows"][0]["map_after"] == 1.0
    assert (rep / "figures" / "judge_scores.png").exists()


def test_configuration_errors_exit_2(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path / "x")]) == 2
    assert main(["run", "--dataset", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("tile_size: 1024\nstride: 2048\n")
    assert main(["run", "--config", str(bad)]) == 2
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"omission_rate": 2.0}))
    assert main(["inject", "--spec", str(spec), "--out", str(tmp_path / "x")]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(
        "dataset: data/dataset.json\n"
        "out: runs/a\n"
        "grounding_mode: VisualPlusTags\n"
        "seed: 5\n"
        "corruption: {omission_rate: 0.25}\n"
        "judge: {backend: mock-noisy, noise: {claim_detect_prob: 0.7}}\n"
    )
    c = load_config(cfg, {"judge": {"noise": {"spurious_claim_rate": 0.0}}})
    assert c.dataset_path == tmp_path / "data" / "dataset.json"
    assert c.grounding_mode is GroundingMode.VISUAL_PLUS_TAGS
    assert c.corruption.omission_rate == 0.25 and c.corruption.seed == 5
    assert c.judge.noise.claim_detect_prob == 0.7 and c.judge.noise.spurious_claim_rate == 0.0
    assert c.judge.noise.seed == 5
    cfg.write_text("colour: red\n")
    with pytest.raises(ConfigError):
        load_config(cfg)


def test_budget_is_tiles_times_per_tile():
    d = make_diagram("P", [], width=7168, height=4561)
    ds = Dataset("one", ["valve"], [d])
    cfg = RunConfig()
    est = estimate_budget(ds, cfg)
    tile = Tile((0, 0), BoundingBox(0, 0, 1024, 1024))
    text = missing_judge_text(tile, DetectionSet("P", ()), cfg.grounding_mode, cfg.overlay, ds.classes)
    per_tile = estimate_image_tokens(1024, 1024) + estimate_text_tokens(text)
    assert est["tiles"] == 40
    assert est["total_input_tokens"] == 40 * per_tile
    assert estimate_budget(Dataset("empty", ["valve"], []), cfg)["total_input_tokens"] == 0


def test_estimate_budget_cli(synth3, capsys):
    assert main(["estimate-budget", "--dataset", ds_path(synth3)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["diagrams"] == 3 and out["total_input_tokens"] > 0


def test_synth_cli(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "s"), "--diagrams", "2", "--symbols", "5",
                 "--width", "400", "--height", "300"]) == 0
    assert json.loads(capsys.readouterr().out)["symbols"] == 10
    assert (tmp_path / "s" / "images" / "D0001.png").exists()

"""Command-line behavior: run directories, outputs, and error reporting."""
import json
import re
from pathlib import Path

import numpy as np
import pytest

from sceneprog.cli import main
from sceneprog.scenes import sample_scene, scene_to_json


@pytest.fixture(scope="module")
def scene_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("scene") / "s.json"
    scene = sample_scene(np.random.default_rng(5), 4)
    path.write_text(scene_to_json(scene) + "\n")
    return str(path)


def _gen_args(tmp_path, *extra):
    return [
        "gen-data",
        "--set",
        "data.n_scenes=10",
        "--set",
        "data.questions_per_scene=2",
        "--out-dir",
        str(tmp_path),
        *extra,
    ]


def test_exec_prints_oracle_answer(scene_file, capsys):
    assert main(["exec", "--scene", scene_file, "--program", "count scene"]) == 0
    assert capsys.readouterr().out.strip() == "4"


def test_exec_reports_unknown_token_as_json(scene_file, capsys):
    assert main(["exec", "--scene", scene_file, "--program", "frobnicate scene"]) == 1
    err = json.loads(capsys.readouterr().err)
    assert "frobnicate" in err["message"]


def test_gen_data_writes_named_run_dir(tmp_path, capsys):
    assert main(_gen_args(tmp_path, "--seed", "7")) == 0
    out = json.loads(capsys.readouterr().out)
    run_dir = Path(out["run_dir"])
    assert re.fullmatch(r"gen-data-[0-9a-f]{12}-s7", run_dir.name)
    for name in ("config.json", "log.jsonl", "metrics.json", "scenes.jsonl"):
        assert (run_dir / name).exists()
    for split in ("train", "val", "test"):
        assert (run_dir / f"{split}.jsonl").exists()


def test_rerun_never_mutates_an_existing_run_dir(tmp_path, capsys):
    assert main(_gen_args(tmp_path)) == 0
    first = Path(json.loads(capsys.readouterr().out)["run_dir"])
    stamp = (first / "metrics.json").read_text()
    assert main(_gen_args(tmp_path)) == 0
    second = Path(json.loads(capsys.readouterr().out)["run_dir"])
    assert second != first
    assert second.name == first.name + "-r2"
    assert (first / "metrics.json").read_text() == stamp


def test_unknown_config_key_exits_two(tmp_path, capsys):
    code = main(_gen_args(tmp_path, "--set", "data.bogus=1"))
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"
    assert "data.bogus" in err["message"]


def test_env_seed_names_the_run_dir(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SCENEPROG_SEED", "9")
    assert main(_gen_args(tmp_path)) == 0
    run_dir = Path(json.loads(capsys.readouterr().out)["run_dir"])
    assert run_dir.name.endswith("-s9")


def test_deterministic_zeroes_wall_times(tmp_path, capsys):
    assert main(_gen_args(tmp_path, "--deterministic")) == 0
    run_dir = Path(json.loads(capsys.readouterr().out)["run_dir"])
    rows = [json.loads(l) for l in (run_dir / "log.jsonl").read_text().splitlines()]
    assert rows and all(row["wall_time"] == 0.0 for row in rows)
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["deterministic"] is True and cfg["threads"] == 1


def test_eval_oracle_then_report_renders_tables(tmp_path, capsys):
    args = [
        "eval",
        "--oracle",
        "--set",
        "data.n_scenes=30",
        "--out-dir",
        str(tmp_path),
    ]
    assert main(args) == 0
    eval_dir = json.loads(capsys.readouterr().out)["run_dir"]
    metrics = json.loads((Path(eval_dir) / "metrics.json").read_text())
    assert metrics["overall"] == 1.0

    assert main(["report", "--run", eval_dir, "--out-dir", str(tmp_path)]) == 0
    captured = capsys.readouterr().out
    report_dir = Path(json.loads(captured.strip().splitlines()[-1])["run_dir"])
    assert (report_dir / "per_type.csv").exists()
    text = (report_dir / "report.md").read_text()
    assert "question_type" in text and "overall" in text
    header = (report_dir / "per_type.csv").read_text().splitlines()[0]
    assert header == "question_type,accuracy,n"


def test_report_renders_ladder_cogent_and_short_long(tmp_path, capsys):
    run = tmp_path / "fake-run"
    run.mkdir()
    (run / "metrics.json").write_text(
        json.dumps(
            {
                "ladder": [
                    {"n_programs": 50, "program_acc": 0.5},
                    {"n_programs": 200, "program_acc": 0.9},
                ],
                "train_a_eval_a": 0.9,
                "train_a_eval_b": 0.6,
                "finetune_b_eval_a": 0.85,
                "finetune_b_eval_b": 0.8,
                "short_eval_short": 0.9,
                "short_eval_long": 0.4,
                "mixed_eval_short": 0.88,
                "mixed_eval_long": 0.7,
            }
        )
    )
    assert main(["report", "--run", str(run), "--out-dir", str(tmp_path)]) == 0
    report_dir = Path(
        json.loads(capsys.readouterr().out.strip().splitlines()[-1])["run_dir"]
    )
    for name in ("ladder.csv", "cogent.csv", "short_long.csv", "report.md"):
        assert (report_dir / name).exists()
    ladder = (report_dir / "ladder.csv").read_text().splitlines()
    assert ladder[0] == "n_programs,program_acc,answer_acc_pre,answer_acc_post"


def test_report_missing_metrics_exits_two(tmp_path, capsys):
    code = main(["report", "--run", str(tmp_path / "nope"), "--out-dir", str(tmp_path)])
    assert code == 2
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_saliency_writes_grid_json(tmp_path, scene_file, capsys):
    args = [
        "saliency",
        "--scene",
        scene_file,
        "--program",
        "count filter_color[red] scene",
        "--out-dir",
        str(tmp_path),
    ]
    assert main(args) == 0
    out = json.loads(capsys.readouterr().out)
    grid = json.loads(Path(out["out"]).read_text())
    assert len(grid) == 8 and len(grid[0]) == 8
    assert all(v >= 0.0 for row in grid for v in row)

import json
import subprocess
import sys

import pytest

from keds.cli import main

TINY = {
    "seed": 11,
    "synth": {"n_train": 60, "n_db": 40, "n_tasks": 6, "dim": 32},
    "model": {"dim": 32, "bkp_layers": 2, "heads": 4, "composer_blocks": 1},
    "train": {"steps": 12, "warmup_steps": 4, "batch_size": 16, "k": 4},
    "eval": {"alpha": 0.5, "k": 4},
}


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """Run gen-synth -> build-db -> mine -> train once for the module."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(TINY))
    out = root / "run"
    for command in ("gen-synth", "build-db", "mine", "train"):
        code = main([command, "--config", str(config), "--out", str(out)])
        assert code == 0, f"{command} failed"
    return config, out


class TestPipeline:
    def test_outputs_exist(self, pipeline_dir):
        _, out = pipeline_dir
        for name in ("synth/train_images.kedb", "synth/db_images.kedb", "synth/tasks.jsonl",
                     "db_index.json", "triplets.jsonl", "checkpoint.kedc", "train_log.jsonl"):
            assert (out / name).exists(), name

    def test_eval_emits_full_report(self, pipeline_dir):
        config, out = pipeline_dir
        assert main(["eval", "--config", str(config), "--out", str(out)]) == 0
        rows = [json.loads(line) for line in (out / "report.jsonl").read_text().splitlines()]
        assert {"R1", "R5", "R10", "R50"} <= set(rows[0])
        values = {row["value"] for row in rows}
        assert {"image_only", "text_only", "image_text"} <= values

    def test_alpha_one_equals_streams_m(self, pipeline_dir):
        config, out = pipeline_dir
        assert main(["eval", "--config", str(config), "--out", str(out), "--alpha", "1.0"]) == 0
        row_alpha = json.loads((out / "report.jsonl").read_text().splitlines()[0])
        assert main(["eval", "--config", str(config), "--out", str(out), "--streams", "M"]) == 0
        row_m = json.loads((out / "report.jsonl").read_text().splitlines()[0])
        for key in ("R1", "R5", "R10", "R50"):
            assert row_alpha[key] == row_m[key]

    def test_sweep_alpha(self, pipeline_dir):
        config, out = pipeline_dir
        code = main(["sweep", "--config", str(config), "--out", str(out),
                     "--axis", "alpha", "--values", "0,0.5,1"])
        assert code == 0
        rows = [json.loads(line) for line in (out / "report.jsonl").read_text().splitlines()]
        assert [row["value"] for row in rows] == [0.0, 0.5, 1.0]

    def test_train_log_is_jsonl(self, pipeline_dir):
        _, out = pipeline_dir
        rows = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
        assert rows[0]["step"] == 0
        assert set(rows[0]) == {"step", "lr", "L_c", "L_r"}
        assert len(rows) == TINY["train"]["steps"]


class TestErrors:
    def test_unknown_config_key(self, tmp_path, capsys):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"train": {"learning_rate": 1.0}}))
        assert main(["train", "--config", str(config), "--out", str(tmp_path / "run")]) == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_missing_input_names_path(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps(TINY))
        assert main(["train", "--config", str(config), "--out", str(tmp_path / "empty")]) == 2
        assert "train_images.kedb" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
        assert "nope.json" in capsys.readouterr().err

    def test_config_parse_error_includes_line(self, tmp_path, capsys):
        config = tmp_path / "broken.json"
        config.write_text("{\n  \"seed\": oops\n}")
        assert main(["train", "--config", str(config), "--out", str(tmp_path)]) == 2
        assert "line" in capsys.readouterr().err


def test_gradcheck_exits_zero():
    proc = subprocess.run(
        [sys.executable, "-m", "keds.cli", "gradcheck"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "PASS" in proc.stdout

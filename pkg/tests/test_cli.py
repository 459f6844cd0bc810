import subprocess
import sys
from pathlib import Path

import pytest

from kpdistill.cli import main
from kpdistill.model import init_weights, preset, save_weights

CONFIG = """
preset = toy
steps = 3
batch_size = 2
seed = 0
student_width = 1/2
checkpoint_every = 2
"""


def run(*args):
    return main([str(a) for a in args])


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def pipeline(root: Path) -> dict[str, Path]:
    """Run every subcommand once under ``root``; returns the output directories."""
    d = {name: root / name for name in ("shapes", "scene", "teacher", "student", "eval", "report")}
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "train.cfg"
    cfg.write_text(CONFIG)
    assert run("gen-shapes", "--out", d["shapes"], "--seed", 1, "--count", 4, "--width", 32, "--height", 32) == 0
    assert run("gen-scene", "--out", d["scene"], "--frames", 2, "--width", 40, "--height", 32, "--lighting", "1.0,0.6") == 0
    assert run("train-teacher", "--config", cfg, "--dataset", d["shapes"], "--out", d["teacher"]) == 0
    assert run("distill", "--config", cfg, "--checkpoint", d["teacher"] / "teacher.kpw", "--dataset", d["scene"], "--out", d["student"]) == 0
    assert run("eval", "--checkpoint", d["student"] / "student.kpw", "--dataset", d["scene"], "--out", d["eval"], "--score-threshold", 0.0) == 0
    assert run("report", d["eval"] / "aggregate.csv", "--out", d["report"], "--history", d["teacher"] / "loss.csv") == 0
    return d


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    a = pipeline(tmp_path_factory.mktemp("run_a"))
    b = pipeline(tmp_path_factory.mktemp("run_b"))
    return a, b


class TestDeterminism:
    @pytest.mark.parametrize("stage", ["shapes", "scene", "teacher", "student", "eval", "report"])
    def test_byte_identical(self, two_runs, stage):
        a, b = two_runs
        files_a, files_b = tree_bytes(a[stage]), tree_bytes(b[stage])
        assert files_a, f"{stage} produced no files"
        assert files_a.keys() == files_b.keys()
        for name in files_a:
            assert files_a[name] == files_b[name], name

    def test_expected_outputs(self, two_runs):
        d = two_runs[0]
        assert (d["teacher"] / "teacher.kpw").exists()
        assert (d["student"] / "student.kpw").exists()
        assert {p.name for p in d["report"].iterdir()} >= {"report.md", "report.csv", "metrics.png", "means.png", "loss.png"}
        header = (d["eval"] / "aggregate.csv").read_text().splitlines()[0]
        assert "precision" in header and "repeatability" in header


class TestUsage:
    def test_no_subcommand(self, capsys):
        assert run() == 1
        assert "subcommand" in capsys.readouterr().err

    def test_unknown_flag(self, tmp_path):
        assert run("gen-shapes", "--out", tmp_path, "--bogus", 1) == 1

    def test_missing_required(self):
        assert run("eval", "--dataset", "x") == 1

    def test_bad_bool(self, tmp_path):
        assert run("eval", "--checkpoint", "c", "--dataset", "d", "--out", tmp_path, "--mutual", "maybe") == 1

    def test_bad_lighting(self, tmp_path):
        assert run("gen-scene", "--out", tmp_path, "--lighting", "bright") == 1

    def test_scene_size_not_cell_multiple(self, tmp_path):
        assert run("gen-scene", "--out", tmp_path, "--width", 30) == 1

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "kpdistill"], capture_output=True, text=True)
        assert proc.returncode == 1
        assert "usage" in proc.stderr


class TestDataErrors:
    def test_missing_depth_names_path(self, tmp_path, capsys):
        scene = tmp_path / "scene"
        assert run("gen-scene", "--out", scene, "--frames", 2, "--width", 24, "--height", 16) == 0
        (scene / "depth_000001.f32").unlink()
        save_weights(init_weights(preset("toy")), tmp_path / "w.kpw")
        assert run("eval", "--checkpoint", tmp_path / "w.kpw", "--dataset", scene, "--out", tmp_path / "e") == 2
        assert "depth_000001.f32" in capsys.readouterr().err

    @pytest.mark.parametrize(
        "text, field",
        [
            ("steps = many\n", "steps"),
            ("lr = fast\n", "lr"),
            ("use_gradient_term = perhaps\n", "use_gradient_term"),
            ("colour = red\n", "colour"),
            ("preset = huge\n", "huge"),
            ('{"batch_size": 0}', "batch_size"),
        ],
    )
    def test_config_error_names_field(self, tmp_path, capsys, text, field):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(text)
        run("gen-shapes", "--out", tmp_path / "s", "--count", 1, "--width", 16, "--height", 16)
        capsys.readouterr()
        assert run("train-teacher", "--config", cfg, "--dataset", tmp_path / "s", "--out", tmp_path / "o") == 2
        err = capsys.readouterr().err
        assert field in err and "bad.cfg" in err

    def test_missing_config(self, tmp_path, capsys):
        assert run("train-teacher", "--config", tmp_path / "nope.cfg", "--dataset", tmp_path, "--out", tmp_path / "o") == 2
        assert "nope.cfg" in capsys.readouterr().err

    def test_missing_dataset_dir(self, tmp_path, capsys):
        save_weights(init_weights(preset("toy")), tmp_path / "w.kpw")
        assert run("eval", "--checkpoint", tmp_path / "w.kpw", "--dataset", tmp_path / "absent", "--out", tmp_path / "e") == 2
        assert "absent" in capsys.readouterr().err

    def test_report_missing_column(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("model,precision\nx,0.5\n")
        assert run("report", bad, "--out", tmp_path / "r") == 2
        assert "repeatability" in capsys.readouterr().err


class TestReport:
    def test_mean_columns(self, tmp_path):
        rows = tmp_path / "rows.csv"
        rows.write_text("model,precision,recall\na,0.61,0.55\nb,0.65,0.51\nc,0.16,1.0\n")
        assert run("report", rows, "--out", tmp_path / "r") == 0
        lines = (tmp_path / "r" / "report.csv").read_text().splitlines()
        cols = lines[0].split(",")
        got = [dict(zip(cols, line.split(","))) for line in lines[1:]]
        assert [g["f1_2dp"] for g in got] == ["0.58", "0.57", "0.28"]
        assert [g["arithmetic_mean_2dp"] for g in got] == ["0.58", "0.58", "0.58"]
        md = (tmp_path / "r" / "report.md").read_text()
        assert "| 0.16 | 1.00 | 0.28 | 0.58 |" in md


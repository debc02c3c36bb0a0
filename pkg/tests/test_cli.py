import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from stpvad import cli
from stpvad.evalmetrics import read_frame_labels, read_regions
from stpvad.ingest import read_detections
from stpvad.train import NonFiniteLossError, load_checkpoint

TRAIN_FLAGS = ["--desk", "--epochs", "2", "--base_filters", "2"]


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def tree_bytes(root: Path, skip=()) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def sidecar_without_timestamp(path: Path) -> dict:
    data = json.loads(path.read_text())
    data["metadata"].pop("created")
    return data


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> train -> score -> eval on the tiny preset, done once."""
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--preset", "tiny", "--out", root / "data", "--seed", 3) == 0
    assert run("train", "--data", root / "data/train", "--out", root / "run", *TRAIN_FLAGS) == 0
    assert run("score", "--checkpoint", root / "run", "--data", root / "data/test", "--out", root / "scores") == 0
    assert run("eval", "--scores", root / "scores", "--gt", root / "data/test", "--out", root / "scores") == 0
    return root


class TestSynth:
    def test_manifest(self, workspace, capsys):
        assert run("synth", "--preset", "tiny", "--out", workspace / "again", "--seed", 3) == 0
        manifest = json.loads(capsys.readouterr().out)
        assert len(manifest["train"]["videos"]) == 2
        assert set(manifest["test"]["anomaly_intervals"]) == {"video_00", "video_01"}

    def test_negative_frames(self, tmp_path, capsys):
        assert run("synth", "--preset", "tiny", "--out", tmp_path, "--frames_per_video", -3) == 2
        assert "frames_per_video" in capsys.readouterr().err

    def test_byte_identical(self, workspace, tmp_path):
        assert run("synth", "--preset", "tiny", "--out", tmp_path, "--seed", 3) == 0
        assert tree_bytes(tmp_path) == tree_bytes(workspace / "data")

    def test_seed_from_env(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("STPVAD_SEED", "3")
        assert run("synth", "--preset", "tiny", "--out", tmp_path) == 0
        assert tree_bytes(tmp_path) == tree_bytes(workspace / "data")

    def test_flag_beats_env(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("STPVAD_SEED", "3")
        assert run("synth", "--preset", "tiny", "--out", tmp_path, "--seed", 4) == 0
        assert tree_bytes(tmp_path) != tree_bytes(workspace / "data")


class TestConfig:
    def test_file_and_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# desk run\nepochs = 7\nbatch_size=32\ndesk = true\n")
        args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--epochs", "3"])
        values, explicit = cli.resolve("train", args)
        assert values["epochs"] == 3 and values["batch_size"] == 32 and values["desk"] is True
        assert explicit == {"epochs", "batch_size", "desk"}

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochz = 3\n")
        assert run("train", "--config", cfg) == 2
        assert "epochz" in capsys.readouterr().err

    def test_bad_value(self, capsys):
        assert run("train", "--epochs", "many") == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            run("train", "--epochz", "3")
        assert exc.value.code == 2

    @pytest.mark.parametrize("command", list(cli.KEYS))
    def test_help_lists_every_key(self, command, capsys):
        with pytest.raises(SystemExit) as exc:
            run(command, "--help")
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for key in cli.KEYS[command]:
            assert f"--{key.name}" in text
        assert text.count("(default:") >= len(cli.KEYS[command])

    def test_training_defaults(self):
        keys = {k.name: k.default for k in cli.KEYS["train"]}
        assert keys["learning_rate"] == 1e-3
        assert keys["batch_size"] == 640
        assert keys["epochs"] == 200
        assert keys["downscale_ratio"] == 0.5


class TestTrain:
    def test_checkpoint_reloads(self, workspace):
        ckpt = load_checkpoint(workspace / "run/checkpoint")
        assert ckpt.net_config.base_filters == 2
        assert ckpt.train_config.batch_size == 64 and ckpt.train_config.epochs == 2
        rows = list(csv.DictReader((workspace / "run/history.csv").open()))
        assert len(rows) == 2

    def test_deterministic(self, workspace, tmp_path):
        assert run("train", "--data", workspace / "data/train", "--out", tmp_path, *TRAIN_FLAGS) == 0
        assert (tmp_path / "checkpoint.stpv").read_bytes() == (workspace / "run/checkpoint.stpv").read_bytes()
        assert (tmp_path / "history.csv").read_bytes() == (workspace / "run/history.csv").read_bytes()
        assert sidecar_without_timestamp(tmp_path / "checkpoint.json") == \
            sidecar_without_timestamp(workspace / "run/checkpoint.json")

    def test_ablate_no_motion(self, workspace, tmp_path):
        assert run("train", "--data", workspace / "data/train", "--out", tmp_path,
                   *TRAIN_FLAGS, "--ablate", "no-motion") == 0
        rows = list(csv.DictReader((tmp_path / "history.csv").open()))
        for row in rows:
            assert float(row["loss_M_prev"]) == 0.0 and float(row["loss_M_next"]) == 0.0
            assert float(row["loss_A_prev"]) > 0.0

    def test_downscale_variants(self, workspace, tmp_path):
        # uniform squares give constant crops at any ratio; the test split has disks
        data = workspace / "data/test"
        for ratio in ("1.0", "0.5"):
            assert run("train", "--data", data, "--out", tmp_path / ratio, *TRAIN_FLAGS,
                       "--downscale", ratio) == 0
        assert load_checkpoint(tmp_path / "1.0/checkpoint").train_config.downscale_ratio == 1.0
        assert load_checkpoint(tmp_path / "0.5/checkpoint").train_config.downscale_ratio == 0.5
        assert (tmp_path / "1.0/checkpoint.stpv").read_bytes() != (tmp_path / "0.5/checkpoint.stpv").read_bytes()

    def test_non_finite_exit_3(self, workspace, tmp_path, monkeypatch):
        def explode(*a, **k):
            raise NonFiniteLossError(1, 0)
        monkeypatch.setattr(cli, "train_model", explode)
        assert run("train", "--data", workspace / "data/train", "--out", tmp_path, *TRAIN_FLAGS) == 3

    def test_missing_data(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope", "--out", tmp_path) == 2


class TestScore:
    def test_one_row_per_frame(self, workspace):
        labels = read_frame_labels(workspace / "data/test/frame_labels.csv")
        rows = list(csv.DictReader((workspace / "scores/frame_scores.csv").open()))
        keys = [(r["video"], int(r["frame"])) for r in rows]
        assert len(keys) == len(set(keys))
        assert set(keys) == {(v, t) for v, lab in labels.items() for t in range(len(lab))}

    def test_deterministic(self, workspace, tmp_path):
        assert run("score", "--checkpoint", workspace / "run", "--data", workspace / "data/test",
                   "--out", tmp_path) == 0
        assert tree_bytes(tmp_path) == tree_bytes(workspace / "scores", skip={"report.json"})

    def test_missing_checkpoint(self, workspace, tmp_path):
        assert run("score", "--checkpoint", tmp_path / "none", "--data", workspace / "data/test",
                   "--out", tmp_path) == 2

    def test_missing_detections(self, workspace, tmp_path, capsys):
        import shutil
        data = tmp_path / "test"
        shutil.copytree(workspace / "data/test", data)
        (data / "detections.jsonl").unlink()
        assert run("score", "--checkpoint", workspace / "run", "--data", data, "--out", tmp_path / "s") == 2
        assert "detections" in capsys.readouterr().err


class TestEval:
    def test_report_consistent(self, workspace):
        report = json.loads((workspace / "scores/report.json").read_text())
        assert report["macro_auc"] == pytest.approx(np.mean(list(report["per_video_auc"].values())), abs=1e-15)
        for k in ("micro_auc", "macro_auc", "rbdc", "tbdc"):
            assert 0.0 <= report[k] <= 1.0

    def test_deterministic(self, workspace, tmp_path):
        assert run("eval", "--scores", workspace / "scores", "--gt", workspace / "data/test", "--out", tmp_path) == 0
        assert (tmp_path / "report.json").read_bytes() == (workspace / "scores/report.json").read_bytes()

    def test_oracle_scores(self, workspace, tmp_path, capsys):
        data = workspace / "data/test"
        anomalous = {(r.video, r.frame, r.box) for r in read_regions(data / "gt_regions.jsonl")}
        with open(tmp_path / "object_scores.jsonl", "w") as fh:
            for d in read_detections(data / "detections.jsonl"):
                s = 1.0 if (d.video_id, d.frame_index, d.box) in anomalous else 0.0
                x1, y1, x2, y2 = d.box.as_tuple()
                fh.write(json.dumps({"video": d.video_id, "frame": d.frame_index, "x1": x1, "y1": y1,
                                     "x2": x2, "y2": y2, "L": [0, 0, 0, 0], "s": s}) + "\n")
        with open(tmp_path / "frame_scores.csv", "w") as fh:
            fh.write("video,frame,score\n")
            for v, lab in read_frame_labels(data / "frame_labels.csv").items():
                for t, y in enumerate(lab):
                    fh.write(f"{v},{t},{float(y)}\n")
        assert run("eval", "--scores", tmp_path, "--gt", data, "--out", tmp_path) == 0
        out = capsys.readouterr().out.split()
        assert out == ["micro_auc", "1.0000", "macro_auc", "1.0000", "rbdc", "1.0000", "tbdc", "1.0000"]

    def test_missing_gt(self, workspace, tmp_path):
        assert run("eval", "--scores", workspace / "scores", "--gt", tmp_path, "--out", tmp_path) == 2

    def test_malformed_scores(self, workspace, tmp_path):
        (tmp_path / "object_scores.jsonl").write_text("{not json\n")
        (tmp_path / "frame_scores.csv").write_text("video,frame,score\n")
        assert run("eval", "--scores", tmp_path, "--gt", workspace / "data/test", "--out", tmp_path) == 2

    def test_report_plots(self, workspace, tmp_path):
        assert run("report", "--scores", workspace / "scores", "--gt", workspace / "data/test",
                   "--out", tmp_path) == 0
        pngs = sorted(p.name for p in tmp_path.glob("*.png"))
        assert pngs == ["detection_curves.png", "timeline_video_00.png", "timeline_video_01.png"]


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stpvad.cli", "eval", "--scores", str(tmp_path),
                           "--gt", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "missing" in proc.stderr

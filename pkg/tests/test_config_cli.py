"""Run-configuration parsing and the command-line surface.

The pipeline test drives gen -> train -> predict -> sample -> eval through
main() on a deliberately tiny model, checking exit codes and artifacts.
Exit-code mapping for slow or hard-to-trigger failures is tested by
stubbing the command body, not by provoking real multi-minute failures.
"""

import subprocess

import numpy as np
import pytest

from condflow import cli
from condflow.checks import CheckResult
from condflow.config import Config, ConfigError, load_config, parse_config
from condflow.fileio import read_jsonl, read_tensor
from condflow.tensor import NumericsError


class TestConfigParsing:
    def test_comments_blanks_and_coercion(self):
        cfg = parse_config(
            "# full-line comment\n"
            "\n"
            "task.kind = binary-seg   # trailing comment\n"
            "task.size=8\n"
            "train.lr = 1e-3\n"
            "train.iters = 50\n")
        assert cfg.get("task.kind") == "binary-seg"
        assert cfg.get("task.size") == 8
        assert cfg.get("train.lr") == pytest.approx(1e-3)
        assert cfg.get("train.iters") == 50

    def test_defaults_apply_when_absent(self):
        cfg = parse_config("")
        assert cfg.get("model.L") == 2
        assert cfg.get("predict.M") == 10
        assert cfg.get("train.batch") == 2
        assert not cfg.has("model.L")

    def test_missing_required_key_named(self):
        with pytest.raises(ConfigError, match="missing config key: train.iters"):
            parse_config("").get("train.iters")

    def test_unknown_key_with_line_number(self):
        with pytest.raises(ConfigError, match="line 2: unknown config key: task.knid"):
            parse_config("task.size = 8\ntask.knid = x\n")

    def test_duplicate_key_with_line_number(self):
        with pytest.raises(ConfigError, match="line 3: duplicate"):
            parse_config("task.size = 8\n# sep\ntask.size = 16\n")

    def test_malformed_line_rejected(self):
        with pytest.raises(ConfigError, match="line 1: expected key=value"):
            parse_config("just words\n")

    def test_bad_value_coercion_names_key(self):
        with pytest.raises(ConfigError, match="task.size"):
            parse_config("task.size = eight\n").get("task.size")

    def test_override_and_unknown_rejections(self):
        cfg = parse_config("")
        cfg.override("predict.M", 25)
        assert cfg.get("predict.M") == 25
        with pytest.raises(ConfigError, match="unknown"):
            cfg.override("predict.N", 1)
        with pytest.raises(ConfigError, match="unknown"):
            cfg.get("no.such.key")

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.conf")


def write_config(path, outdir, extra=""):
    path.write_text(
        "task.kind = binary-seg\n"
        "task.size = 8\n"
        "task.train_size = 4\n"
        "task.test_size = 2\n"
        "model.L = 1\n"
        "model.K = 1\n"
        "model.n_c = 2\n"
        "model.n_w = 4\n"
        "model.coupling_channels = 4\n"
        "model.feature_channels = 2\n"
        "train.iters = 2\n"
        f"io.outdir = {outdir}\n"
        + extra)


class TestPipeline:
    def test_gen_train_predict_sample_eval(self, tmp_path, capsys):
        conf = tmp_path / "run.conf"
        run = tmp_path / "run"
        data = tmp_path / "data"
        write_config(conf, run)

        assert cli.main(["gen", "--config", str(conf),
                         "--outdir", str(data)]) == 0
        assert (data / "manifest.json").exists()
        assert (data / "train_x.cft").exists()
        assert "4 train / 2 test" in capsys.readouterr().out

        assert cli.main(["train", "--config", str(conf),
                         "--data", str(data)]) == 0
        assert (run / "model.ckpt").exists()
        assert (run / "curve.csv").exists()
        capsys.readouterr()

        model = str(run / "model.ckpt")
        assert cli.main(["predict", "--config", str(conf), "--data", str(data),
                         "--model", model, "--M", "2", "--index", "0"]) == 0
        pred_dir = run / "predictions"
        assert read_tensor(pred_dir / "pred_000.cft").shape == (8, 8, 3)
        assert read_tensor(pred_dir / "var_000.cft").shape == (8, 8, 3)
        out = read_tensor(pred_dir / "out_000.cft")
        assert out.shape == (8, 8) and np.all((out == 0) | (out == 1))
        records = read_jsonl(pred_dir / "predictions.jsonl")
        assert records[0]["index"] == 0 and records[0]["mode"] == "sample-mean"
        capsys.readouterr()

        assert cli.main(["predict", "--config", str(conf), "--data", str(data),
                         "--model", model, "--mode", "gradient",
                         "--steps", "2", "--index", "1"]) == 0
        records = read_jsonl(pred_dir / "predictions.jsonl")
        assert records[0]["mode"] == "gradient"
        assert records[0]["steps_taken"] >= 1
        capsys.readouterr()

        assert cli.main(["sample", "--config", str(conf), "--data", str(data),
                         "--model", model, "--count", "2", "--images"]) == 0
        samples = run / "samples"
        assert (samples / "sample_000_00.cft").exists()
        assert (samples / "sample_000_01.pgm").read_bytes().startswith(b"P5\n")
        capsys.readouterr()

        assert cli.main(["eval", "--config", str(conf), "--data", str(data),
                         "--model", model, "--M", "2"]) == 0
        assert (run / "report.csv").exists()
        assert (run / "report.jsonl").exists()
        out = capsys.readouterr().out
        assert "mean_iou" in out and "mode sample-mean (M=2)" in out

    def test_resume_flag_continues_training(self, tmp_path, capsys):
        conf = tmp_path / "run.conf"
        run = tmp_path / "run"
        data = tmp_path / "data"
        write_config(conf, run, extra="train.checkpoint_interval = 1\n")
        assert cli.main(["gen", "--config", str(conf),
                         "--outdir", str(data)]) == 0
        assert cli.main(["train", "--config", str(conf),
                         "--data", str(data)]) == 0
        assert cli.main(["train", "--config", str(conf), "--data", str(data),
                         "--resume", str(run / "ckpt_000001.ckpt")]) == 0
        out = capsys.readouterr().out
        assert "resuming at iteration 1" in out


class TestExitCodes:
    def test_usage_errors(self, tmp_path, capsys):
        assert cli.main([]) == 1
        assert cli.main(["frobnicate"]) == 1
        assert cli.main(["train", "--config", "x"]) == 1   # missing --data
        capsys.readouterr()

    def test_help_exits_zero(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "gen" in capsys.readouterr().out

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli.main(["gen", "--config", str(tmp_path / "no.conf")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_missing_required_key(self, tmp_path, capsys):
        conf = tmp_path / "bad.conf"
        conf.write_text("task.kind = binary-seg\n")
        assert cli.main(["gen", "--config", str(conf)]) == 2
        assert "task.size" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        conf = tmp_path / "run.conf"
        data = tmp_path / "data"
        write_config(conf, tmp_path / "run")
        assert cli.main(["gen", "--config", str(conf),
                         "--outdir", str(data)]) == 0
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        assert cli.main(["predict", "--config", str(conf), "--data", str(data),
                         "--model", str(bad)]) == 2
        assert "magic" in capsys.readouterr().err

    def test_out_of_range_index(self, tmp_path, capsys):
        conf = tmp_path / "run.conf"
        run = tmp_path / "run"
        data = tmp_path / "data"
        write_config(conf, run)
        cli.main(["gen", "--config", str(conf), "--outdir", str(data)])
        cli.main(["train", "--config", str(conf), "--data", str(data)])
        capsys.readouterr()
        rc = cli.main(["predict", "--config", str(conf), "--data", str(data),
                       "--model", str(run / "model.ckpt"), "--index", "99"])
        assert rc == 1
        assert "outside test set" in capsys.readouterr().err

    def test_check_dispatch(self, monkeypatch, capsys):
        good = [CheckResult("roundtrip", 0.0, 1e-8, True, "ok")]
        monkeypatch.setattr(cli.checks, "run_all", lambda seed: good)
        assert cli.main(["check"]) == 0
        bad = [CheckResult("roundtrip", 1.0, 1e-8, False, "off")]
        monkeypatch.setattr(cli.checks, "run_all", lambda seed: bad)
        assert cli.main(["check"]) == 4
        capsys.readouterr()

    def test_numeric_failure_mapped(self, monkeypatch, capsys):
        def boom(seed):
            raise NumericsError("synthetic blow-up")
        monkeypatch.setattr(cli.checks, "run_all", boom)
        assert cli.main(["check"]) == 3
        assert "numeric failure" in capsys.readouterr().err


class TestConsoleScript:
    def test_entry_point_runs(self):
        proc = subprocess.run(["condflow", "--help"], capture_output=True,
                              text=True, timeout=60)
        assert proc.returncode == 0
        assert "gen" in proc.stdout and "check" in proc.stdout

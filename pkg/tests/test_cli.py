"""Tests for the ``bvs`` command line."""

import json
from unittest.mock import patch

import pytest

from mcp_bvs.cli import build_parser, main
from mcp_bvs.config import serialize
from tests.conftest import tiny_run_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text(serialize(tiny_run_config()))
    return path


class TestExitCodes:
    """Test process exit codes."""

    def test_success(self, tmp_path, config_file, capsys):
        """A successful command prints its summary and exits 0."""
        code = main(["gen-data", "-n", "2", "--out", str(tmp_path / "d.bvsd"), "--config", str(config_file)])
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["num_samples"] == 2

    def test_usage_error(self, tmp_path, config_file, capsys):
        """n = 0 exits 2."""
        code = main(["gen-data", "-n", "0", "--out", str(tmp_path / "d.bvsd"), "--config", str(config_file)])
        assert code == 2
        assert "bvs:" in capsys.readouterr().err

    def test_unknown_verb(self):
        """argparse failures exit 2."""
        assert main(["bake"]) == 2

    def test_pipeline_error(self, tmp_path, config_file, capsys):
        """Other pipeline errors exit 1."""
        code = main(
            ["train", "v2as", "--data", str(tmp_path / "absent.bvsd"), "--out", str(tmp_path / "m.ckpt"), "--config", str(config_file)]
        )
        assert code == 1
        assert "integrity" in capsys.readouterr().err

    def test_bad_config(self, tmp_path):
        """An invalid config file exits 1."""
        path = tmp_path / "bad.conf"
        path.write_text("train.batch_size = lots\n")
        assert main(["gen-data", "-n", "1", "--out", str(tmp_path / "d.bvsd"), "--config", str(path)]) == 1


class TestHelp:
    """Test the documented defaults."""

    def test_generate_help(self, capsys, monkeypatch):
        """generate --help shows the decoding defaults."""
        monkeypatch.setenv("COLUMNS", "200")
        assert main(["generate", "--help"]) == 0
        out = capsys.readouterr().out
        for default in ("16", "5.0", "[20, 10, 1, 1]", "2.5"):
            assert default in out

    def test_steps_list(self):
        """--vs2a-steps accepts comma-separated integers."""
        args = build_parser().parse_args(
            ["generate", "--vs2a", "s2", "--video", "v", "--out", "o", "--vs2a-steps", "8,4,1,1"]
        )
        assert args.vs2a_steps == [8, 4, 1, 1]


class TestOverrides:
    """Test flags that override config values."""

    def test_train_steps_flag(self, tmp_path, config_file):
        """--steps replaces train.max_steps."""
        data = tmp_path / "d.bvsd"
        assert main(["gen-data", "-n", "4", "--out", str(data), "--config", str(config_file)]) == 0
        out = tmp_path / "m.ckpt"
        code = main(["train", "vs2a", "--data", str(data), "--out", str(out), "--steps", "1", "--config", str(config_file)])
        assert code == 0
        assert len((tmp_path / "m.ckpt.log.jsonl").read_text().splitlines()) == 1

    def test_generate_workers_flag(self, tmp_path, config_file):
        """--workers reaches generation as the decoding thread count."""
        argv = ["generate", "--vs2a", "s2", "--video", "v", "--out", str(tmp_path / "g"), "--workers", "3"]
        with patch("mcp_bvs.cli.cmd_generate") as generate:
            assert main([*argv, "--config", str(config_file)]) == 0
        assert generate.call_args.kwargs["workers"] == 3

    def test_generate_zero_workers(self, tmp_path, config_file):
        """--workers 0 on generate is a usage error."""
        argv = ["generate", "--vs2a", "s2", "--video", "v", "--out", str(tmp_path / "g"), "--workers", "0"]
        assert main([*argv, "--config", str(config_file)]) == 2

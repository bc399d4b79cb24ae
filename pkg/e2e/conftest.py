"""E2E test configuration and fixtures."""

import subprocess
import sys
from pathlib import Path

import pytest

from mcp_bvs.config import serialize
from tests.conftest import tiny_run_config

PROJECT_ROOT = Path(__file__).parent.parent
CLI = [sys.executable, "-m", "mcp_bvs.cli"]
TIMEOUT = 600


def run_cli(*args: str) -> subprocess.CompletedProcess:
    """Run ``bvs`` in a fresh interpreter."""
    return subprocess.run(
        [*CLI, *args],
        capture_output=True,
        text=True,
        cwd=PROJECT_ROOT,
        timeout=TIMEOUT,
    )


@pytest.fixture(scope="module")
def config_file(tmp_path_factory) -> Path:
    """Tiny run config written as a config file."""
    path = tmp_path_factory.mktemp("config") / "tiny.conf"
    path.write_text(serialize(tiny_run_config()))
    return path

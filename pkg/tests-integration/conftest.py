"""
Shared fixtures and configuration for integration tests.

These tests train both stages at toy scale on the CPU (tens of minutes) and
only run when BVS_RUN_TRAINING is set. BVS_TRAIN_STEPS and BVS_WORKDIR
override the step count and keep artifacts between runs.
"""

import os
from pathlib import Path

import pytest
from dotenv import load_dotenv

from mcp_bvs.api_models import RunConfig, Stage
from mcp_bvs.config import load_config, with_overrides
from mcp_bvs.pipeline import cmd_gen_data, cmd_train

load_dotenv()

TRAIN_SAMPLES = 2000
HELD_OUT_SAMPLES = 100


def pytest_configure(config):
    """Check for required environment variables before running tests."""
    if not os.environ.get("BVS_RUN_TRAINING"):
        pytest.exit(
            "ERROR: BVS_RUN_TRAINING environment variable is required.\n"
            "Training runs take tens of minutes; opt in before running integration tests:\n"
            "  export BVS_RUN_TRAINING=1\n"
            "  make test-integration"
        )


@pytest.fixture(scope="session")
def run_config() -> RunConfig:
    """Toy-scale config, optionally read from BVS_CONFIG."""
    config = load_config(os.environ.get("BVS_CONFIG") or None)
    steps = os.environ.get("BVS_TRAIN_STEPS")
    if steps:
        config = with_overrides(config, {"train.max_steps": int(steps)})
    return with_overrides(config, {"train.num_threads": os.cpu_count() or 1})


@pytest.fixture(scope="session")
def workdir(tmp_path_factory) -> Path:
    """Artifact directory; BVS_WORKDIR keeps it across runs."""
    if os.environ.get("BVS_WORKDIR"):
        path = Path(os.environ["BVS_WORKDIR"])
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("bvs")


@pytest.fixture(scope="session")
def train_data(run_config: RunConfig, workdir: Path) -> Path:
    path = workdir / "train.bvsd"
    if not path.exists():
        cmd_gen_data(run_config, TRAIN_SAMPLES, path, workers=os.cpu_count() or 1)
    return path


@pytest.fixture(scope="session")
def held_out_data(run_config: RunConfig, workdir: Path) -> Path:
    """Samples past the training range."""
    path = workdir / "held_out.bvsd"
    if not path.exists():
        cmd_gen_data(run_config, HELD_OUT_SAMPLES, path, start=TRAIN_SAMPLES)
    return path


def _trained(stage: Stage, config: RunConfig, data: Path, checkpoint: Path) -> Path:
    # resume is a no-op on a finished checkpoint and continues an interrupted one
    cmd_train(stage, config, data, checkpoint, resume=True)
    return checkpoint


@pytest.fixture(scope="session")
def v2as_checkpoint(run_config: RunConfig, train_data: Path, workdir: Path) -> Path:
    return _trained(Stage.V2AS, run_config, train_data, workdir / "v2as.ckpt")


@pytest.fixture(scope="session")
def vs2a_checkpoint(run_config: RunConfig, train_data: Path, workdir: Path) -> Path:
    return _trained(Stage.VS2A, run_config, train_data, workdir / "vs2a.ckpt")


@pytest.fixture(scope="session")
def speechless_checkpoint(run_config: RunConfig, train_data: Path, workdir: Path) -> Path:
    """Stage 1 trained with its speech condition permanently dropped."""
    config = with_overrides(run_config, {"train.disable_speech_condition": True})
    return _trained(Stage.V2AS, config, train_data, workdir / "v2as_speechless.ckpt")

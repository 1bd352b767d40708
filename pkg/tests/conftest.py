import tempfile
from pathlib import Path

import pytest

from flow_as_code._config import CliConfig


@pytest.fixture
def tmpdir():
    with tempfile.TemporaryDirectory() as d:
        yield Path(d)


@pytest.fixture
def config(tmpdir) -> CliConfig:
    """Workspace inside the temporary folder, two task slots, no progress bars"""
    return CliConfig(workspace=Path(tmpdir, 'ws'), parallelism=2, progress=False).prepare()

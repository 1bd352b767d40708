import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Union

from flow_as_code._store import ArtifactStore

__all__ = ['CliConfig']

log = logging.getLogger(__name__)


def _level(x: Union[str, int]) -> int:
    if isinstance(x, int):
        return x
    level = logging.getLevelName(x.upper())
    if not isinstance(level, int):
        raise ValueError(f'unknown log level {x}')
    return level


class CliConfig:
    """
    Run configuration

    Settings shared by every command that touches a workspace. Each setting
    has a class level default which a constructor argument overrides.

    :param workspace: (optional) folder holding the artifact store, the task
        cache and the journal of every run. The ``FLOW_WORKSPACE`` environment
        variable takes the place of the default.
    :param parallelism: (optional) maximum number of task commands running at
        once
    :param decision_timeout: (optional) seconds a decision command may run
        before the run fails with ``DECISION_TIMEOUT``
    :param verbosity: (optional) logging level of the command line tool. The
        ``FLOW_LOG_LEVEL`` environment variable takes the place of the default.
    :param progress: (optional) show a progress bar while plans execute
    """
    workspace: Path = Path('.flow')
    """Workspace folder, relative to the current directory unless absolute"""

    parallelism: int = os.cpu_count() or 1
    """Defaults to the number of processors"""

    decision_timeout: float = 300.0

    verbosity: int = logging.WARNING

    progress: bool = sys.stderr.isatty()
    """Progress bars are shown by default when stderr is a terminal"""

    def __init__(
            self, workspace: Union[str, Path] = None,
            parallelism: int = None,
            decision_timeout: float = None,
            verbosity: Union[str, int] = None,
            progress: bool = None
    ):
        self.workspace = Path(
            workspace or os.environ.get('FLOW_WORKSPACE') or self.workspace
        ).absolute()
        self.parallelism = parallelism or self.parallelism
        self.decision_timeout = decision_timeout or self.decision_timeout
        self.verbosity = _level(verbosity or os.environ.get('FLOW_LOG_LEVEL') or self.verbosity)
        self.progress = self.progress if progress is None else progress

        if self.parallelism < 1:
            raise ValueError(f'parallelism must be a positive integer, got {self.parallelism}')
        if self.decision_timeout <= 0:
            raise ValueError(f'decision timeout must be positive, got {self.decision_timeout}')

    def configure_logging(self):
        """Send log records at or above ``verbosity`` to stderr"""
        logging.basicConfig(
            stream=sys.stderr, level=self.verbosity, force=True,
            format='%(asctime)s %(levelname)s %(name)s: %(message)s'
        )

    @property
    def runs(self) -> Path:
        return Path(self.workspace, 'runs')

    @property
    def cache_path(self) -> Path:
        return Path(self.workspace, 'cache.jsonl')

    def store(self) -> ArtifactStore:
        return ArtifactStore(Path(self.workspace, 'store'))

    def prepare(self) -> 'CliConfig':
        """
        Create the workspace and verify that it can be written to.

        :raises NotADirectoryError: the workspace path is taken by a file
        :raises PermissionError: the workspace cannot be written to
        """
        if self.workspace.exists() and not self.workspace.is_dir():
            raise NotADirectoryError(f'workspace {self.workspace} is not a directory')
        self.workspace.mkdir(parents=True, exist_ok=True)
        try:
            with tempfile.TemporaryFile(dir=self.workspace):
                pass
        except OSError as e:
            raise PermissionError(f'workspace {self.workspace} is not writable: {e}')
        self.runs.mkdir(exist_ok=True)
        log.debug(f'using workspace {self.workspace}')
        return self

"""
Functions to write decision commands

An iteration block delegates the choice between another iteration and a stop
to an external decision command. This submodule holds the pieces to write one
in a few lines of Python: :class:`Decision` gives access to the request and
builds the response, :func:`decision` turns a function of a ``Decision`` into
a command speaking the JSON protocol on stdin and stdout, and
:func:`grid_search` generates a premade decision which walks a parameter grid.

A decision script can be as small as::

    from flow_as_code.premade import decision

    @decision
    def main(d):
        if d.iteration < 3:
            return d.update('Train', 'fit', 'epochs', 2 * (d.iteration + 2)).repeat()
        return d.stop()

    if __name__ == '__main__':
        raise SystemExit(main())
"""
import argparse
import copy
import functools
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, TextIO

__all__ = ['Decision', 'decision', 'grid_search', 'grid_cells']

log = logging.getLogger(__name__)


class Decision:
    """
    Decision request

    :param request: the request document read from standard input
    """

    def __init__(self, request: dict):
        self.request = request
        self.workflow: str = request['workflow']
        self.block: str = request['block']
        self.iteration: int = request['iteration']
        self.history: Dict[str, List[dict]] = request.get('history', {})
        self.persist: dict = copy.deepcopy(request.get('persist', {}))
        """persisted document of the previous iteration; edit it freely"""
        self.config: Dict[str, Dict[str, dict]] = request.get('config', {})
        self._updates: List[dict] = []

    def outputs(self, job: str) -> List[Dict[str, Path]]:
        """Output paths of every finished task of ``job``, oldest iteration first"""
        return [
            {k: Path(v['path']) for k, v in x['outputs'].items()}
            for x in self.history.get(job, [])
        ]

    def latest(self, job: str, output: str) -> Optional[Path]:
        """Path of the most recent ``output`` of ``job``, if any"""
        found = [x[output] for x in self.outputs(job) if output in x]
        return found[-1] if found else None

    def update(self, job: str, activity: str, path: str, value) -> 'Decision':
        """Queue a parameter update for the next iteration"""
        self._updates.append({'job': job, 'activity': activity, 'path': path, 'value': value})
        return self

    def repeat(self, persist: dict = None) -> dict:
        return {
            'action': 'repeat',
            'parameter_updates': list(self._updates),
            'persist': self.persist if persist is None else persist
        }

    def stop(self, persist: dict = None) -> dict:
        return {
            'action': 'stop',
            'parameter_updates': [],
            'persist': self.persist if persist is None else persist
        }


def decision(func: Callable[[Decision], dict]) -> Callable[..., int]:
    """
    Wrap a decision function as a command

    The returned callable reads the request from ``stdin``, passes a
    :class:`Decision` to ``func``, writes the response ``func`` returns to
    ``stdout`` and returns the exit code. Exceptions are reported on stderr
    with exit code 1, which fails the run with ``DECISION_FAILED``.
    """

    @functools.wraps(func)
    def main(stdin: TextIO = None, stdout: TextIO = None) -> int:
        stdin = stdin or sys.stdin
        stdout = stdout or sys.stdout
        try:
            d = Decision(json.load(stdin))
            response = func(d)
        except Exception as e:
            print(f'decision failed: {e!r}', file=sys.stderr)
            return 1
        json.dump(response, stdout)
        stdout.flush()
        return 0

    return main


def grid_cells(grid: Dict[str, list]) -> List[Dict[str, object]]:
    """Every combination of the grid in row-major order; the first key varies slowest"""
    keys = list(grid)
    return [dict(zip(keys, x)) for x in itertools.product(*(grid[k] for k in keys))]


def grid_search(job: str, activity: str, grid: Dict[str, list]) -> Callable[..., int]:
    """
    Premade grid search

    Generate a decision command which visits every cell of a parameter grid
    once. The activity config must start out at the first cell; at index ``k``
    the decision patches the config to cell ``k + 1`` and repeats, and it stops
    after the last cell.

    :param job: job holding the activity to tune
    :param activity: activity whose config to patch
    :param grid: config path mapped to the values to try
    :return: a decision command, see :func:`decision`
    """
    cells = grid_cells(grid)
    if not cells:
        raise ValueError('grid search needs at least one cell')

    @decision
    def search(d: Decision) -> dict:
        visited = d.iteration + 1
        print(f'{d.block}: cell {visited} of {len(cells)} done', file=sys.stderr)
        if visited >= len(cells):
            return d.stop(persist={'visited': visited})
        for path, value in cells[visited].items():
            d.update(job, activity, path, value)
        return d.repeat(persist={'visited': visited})

    return search


def main(argv: list = None) -> int:
    parser = argparse.ArgumentParser(
        prog='python -m flow_as_code.premade',
        description='premade decision commands'
    )
    commands = parser.add_subparsers(dest='command', metavar='')
    grid = commands.add_parser('grid', help='walk a parameter grid in row-major order')
    grid.add_argument('--job', required=True)
    grid.add_argument('--activity', required=True)
    grid.add_argument(
        '--grid', required=True, type=json.loads,
        help='JSON object mapping config paths to lists of values'
    )
    args = parser.parse_args(argv)
    if args.command != 'grid':
        parser.print_help(sys.stderr)
        return 2
    return grid_search(args.job, args.activity, args.grid)()


if __name__ == '__main__':
    sys.exit(main())

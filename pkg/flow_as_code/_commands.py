import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

from flow_as_code import __version__
from flow_as_code._config import CliConfig
from flow_as_code._driver import new_run_id, resume, run_workflow
from flow_as_code._journal import RunJournal, status_snapshot
from flow_as_code._model import WorkflowModel, load_workflow, loop_structure, validate
from flow_as_code._planner import LoopState, build_iteration_plan, emit_plan_document
from flow_as_code.exceptions import InvalidWorkflow, JournalError, UnknownRun, WorkflowError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

WATCH_INTERVAL = 2.0


def menu(args=None):
    sys.exit(main(args))


def main(argv: list = None) -> int:
    """
    Run one command of the command line tool and return its exit code: 0 on
    success, 1 when the workflow is invalid or fails, 2 on usage, parse and
    environment errors.
    """
    parser = _parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:  # if no args, print help to stderr
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    if not hasattr(args, 'func'):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        CliConfig(verbosity=_verbosity(args.verbose)).configure_logging()
    except ValueError as e:
        _error(e)
        return EXIT_USAGE
    return args.func(args)


def _verbosity(verbose: int) -> Optional[int]:
    """Level asked for by repeated ``-v`` flags; None leaves it to the environment"""
    if not verbose:
        return None
    return logging.INFO if verbose == 1 else logging.DEBUG


def _parser() -> argparse.ArgumentParser:
    program = 'flow'
    parser = argparse.ArgumentParser(
        prog=program,
        description="flow-as-code workflow engine"
    )
    parser.add_argument(
        '--version', action='version',
        version=f'{program} version {__version__}'
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        '-v', '--verbose', action='count', default=0,
        help='log progress to stderr; repeat for debug output'
    )

    workspace = argparse.ArgumentParser(add_help=False)
    workspace.add_argument(
        '--workspace', type=str, default=None,
        help='workspace folder. Defaults to $FLOW_WORKSPACE, or .flow'
    )

    execution = argparse.ArgumentParser(add_help=False)
    execution.add_argument(
        '--parallelism', type=_positive, default=None,
        help='maximum number of tasks running at once. Defaults to the number of processors'
    )
    execution.add_argument(
        '--decision-timeout', type=float, default=None,
        help='seconds a decision command may run. Defaults to 300'
    )
    execution.add_argument(
        '--progress', action='store_true', default=None,
        help='show a progress bar while plans execute'
    )

    commands = parser.add_subparsers(metavar='')

    cmd = commands.add_parser('validate', parents=[common], help='check a workflow definition')
    cmd.set_defaults(func=cmd_validate)
    cmd.add_argument('workflow', type=str, help='path to the workflow definition')

    cmd = commands.add_parser(
        'run', parents=[common, workspace, execution], help='execute a workflow'
    )
    cmd.set_defaults(func=cmd_run)
    cmd.add_argument('workflow', type=str, help='path to the workflow definition')

    cmd = commands.add_parser(
        'resume', parents=[common, workspace, execution], help='resume a failed run'
    )
    cmd.set_defaults(func=cmd_resume)
    cmd.add_argument('run_id', type=str)
    cmd.add_argument(
        '--workflow', type=str, default=None,
        help='corrected workflow definition to resume with'
    )

    cmd = commands.add_parser('status', parents=[common, workspace], help='show the status of a run')
    cmd.set_defaults(func=cmd_status)
    cmd.add_argument('run_id', type=str)
    cmd.add_argument(
        '--format', choices=['table', 'doc'], default='table',
        help='print a table (default), or the status document as JSON'
    )
    cmd.add_argument(
        '--watch', action='store_true', default=False,
        help=f're-render every {WATCH_INTERVAL:g} seconds until the run ends'
    )

    cmd = commands.add_parser(
        'plan', parents=[common], help='print the plan of the first iteration without executing it'
    )
    cmd.set_defaults(func=cmd_plan)
    cmd.add_argument('workflow', type=str, help='path to the workflow definition')
    return parser


def _positive(x: str) -> int:
    v = int(x)
    if v < 1:
        raise argparse.ArgumentTypeError(f'{x} is not a positive integer')
    return v


def _error(msg) -> None:
    print(f'error: {msg}', file=sys.stderr)


def _load(path: str) -> WorkflowModel:
    return load_workflow(Path(path))


def _config(args: argparse.Namespace) -> CliConfig:
    return CliConfig(
        workspace=args.workspace,
        parallelism=getattr(args, 'parallelism', None),
        decision_timeout=getattr(args, 'decision_timeout', None),
        verbosity=_verbosity(args.verbose),
        progress=getattr(args, 'progress', None)
    ).prepare()


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        model = _load(args.workflow)
    except (WorkflowError, OSError) as e:
        _error(e)
        return EXIT_USAGE
    report = validate(model)
    for v in report:
        print(v)
    if not report.ok:
        return EXIT_FAILURE
    print(f'{model.name}: valid')
    return EXIT_OK


def cmd_plan(args: argparse.Namespace) -> int:
    try:
        model = _load(args.workflow)
    except (WorkflowError, OSError) as e:
        _error(e)
        return EXIT_USAGE
    report = validate(model)
    if not report.ok:
        for v in report:
            print(v, file=sys.stderr)
        return EXIT_FAILURE
    plan = build_iteration_plan(model, loop_structure(model), LoopState(), run_id='dry-run')
    print(json.dumps(emit_plan_document(plan), indent=2))
    return EXIT_OK


def _finish(config: CliConfig, run_id: str, ok: bool) -> int:
    journal = RunJournal.open(config.runs, run_id)
    print(status_snapshot(run_id, journal).render())
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_run(args: argparse.Namespace) -> int:
    try:
        model = _load(args.workflow)
        config = _config(args)
    except (WorkflowError, OSError, ValueError) as e:
        _error(e)
        return EXIT_USAGE
    report = validate(model)
    if not report.ok:
        for v in report:
            print(v, file=sys.stderr)
        return EXIT_FAILURE

    run_id = new_run_id()
    print(run_id, flush=True)
    try:
        result = run_workflow(model, config.store(), config, run_id=run_id)
    except JournalError as e:
        _error(e)
        return EXIT_USAGE
    if not result.ok:
        _error(result.message)
    return _finish(config, run_id, result.ok)


def cmd_resume(args: argparse.Namespace) -> int:
    try:
        config = _config(args)
        model = _load(args.workflow) if args.workflow else None
    except (WorkflowError, OSError, ValueError) as e:
        _error(e)
        return EXIT_USAGE
    try:
        result = resume(args.run_id, config.store(), config, model=model)
    except InvalidWorkflow as e:
        _error(e)
        return EXIT_FAILURE
    except (JournalError, WorkflowError, OSError) as e:
        _error(e)
        return EXIT_USAGE
    if not result.ok:
        _error(result.message)
    return _finish(config, args.run_id, result.ok)


def cmd_status(args: argparse.Namespace) -> int:
    runs = CliConfig(workspace=args.workspace).runs
    while True:
        try:
            journal = RunJournal.open(runs, args.run_id)
            table = status_snapshot(args.run_id, journal)
        except UnknownRun as e:
            _error(e)
            return EXIT_USAGE
        except JournalError as e:
            _error(e)
            return EXIT_USAGE
        if args.format == 'doc':
            print(json.dumps(table.to_dict(), indent=2), flush=True)
        else:
            print(table.render(), flush=True)
        if not args.watch or journal.ended is not None:
            return EXIT_OK
        time.sleep(WATCH_INTERVAL)
        print(flush=True)

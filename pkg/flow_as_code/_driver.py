"""
Loop driver

The process that carries a workflow from its first plan to its last. It
executes the plan of the first iteration, and whenever a plan reaches the
decision point of an iteration block it runs the block's decision command.
A *repeat* patches the activity configs, advances the loop and executes the
plan of the loop body at the new index; a *stop* releases the jobs that were
waiting on the loop. Loops are driven innermost first, one decision command
and one plan at a time.

Decision commands speak JSON: the request document arrives on standard input
and the response document is read from standard output. Standard error is
kept in the store as the decision's log.
"""
import json
import logging
import re
import shutil
import subprocess
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from flow_as_code import _schema
from flow_as_code._config import CliConfig
from flow_as_code._executor import execute_plan
from flow_as_code._journal import RunJournal, RunLock, TaskCache
from flow_as_code._model import (
    IterationBlock, Loop, WorkflowModel, dump_workflow, load_workflow, loop_structure,
    validate
)
from flow_as_code._planner import (
    LoopState, ParameterUpdate, TaskPlan, build_iteration_plan, format_iteration, set_path
)
from flow_as_code._store import ArtifactStore
from flow_as_code.exceptions import (
    BadPatch, DecisionError, InvalidWorkflow, PlanError, StoreError
)

__all__ = [
    'Action', 'DecisionRequest', 'DecisionResponse', 'RunResult', 'run_workflow',
    'resume', 'assemble_decision_context', 'invoke_decision',
    'apply_parameter_updates', 'new_run_id'
]

log = logging.getLogger(__name__)

PERSIST_LIMIT = 1 << 20


class Action(Enum):
    REPEAT = 'repeat'
    STOP = 'stop'


@dataclass(frozen=True)
class DecisionRequest:
    workflow: str
    block: str
    iteration: int
    history: Dict[str, List[dict]] = field(default_factory=dict)
    persist: dict = field(default_factory=dict)
    config: Dict[str, Dict[str, dict]] = field(default_factory=dict)
    folder: Optional[Path] = field(default=None, compare=False)
    """where the history's artifacts were copied; removed once the decision is made"""

    def to_dict(self) -> dict:
        return {
            'workflow': self.workflow,
            'block': self.block,
            'iteration': self.iteration,
            'history': self.history,
            'persist': self.persist,
            'config': self.config
        }


@dataclass(frozen=True)
class DecisionResponse:
    """
    Decision response

    :raises DecisionError: ``DECISION_PROTOCOL_ERROR`` when a stop carries
        parameter updates or the persisted document exceeds 1 MiB
    """
    action: Action
    parameter_updates: Tuple[ParameterUpdate, ...] = ()
    persist: dict = field(default_factory=dict)
    log_ref: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.action is Action.STOP and self.parameter_updates:
            raise DecisionError('DECISION_PROTOCOL_ERROR', 'a stop response cannot carry parameter updates')
        if len(json.dumps(self.persist)) > PERSIST_LIMIT:
            raise DecisionError('DECISION_PROTOCOL_ERROR', 'persisted document exceeds 1 MiB')

    def to_dict(self) -> dict:
        return {
            'action': self.action.value,
            'parameter_updates': [x.to_dict() for x in self.parameter_updates],
            'persist': self.persist
        }

    @classmethod
    def from_dict(cls, d) -> 'DecisionResponse':
        _schema.validate(
            d, _schema.DECISION_RESPONSE,
            error=lambda m, p: DecisionError('DECISION_PROTOCOL_ERROR', f'{p}: {m}')
        )
        return cls(
            action=Action(d['action']),
            parameter_updates=tuple(ParameterUpdate.from_dict(x) for x in d.get('parameter_updates', [])),
            persist=d.get('persist', {})
        )


@dataclass(frozen=True)
class RunResult:
    run_id: str
    ok: bool
    failed_task: Optional[str] = None
    message: Optional[str] = None
    code: Optional[str] = None
    executed: Tuple[str, ...] = ()
    """tasks whose command was spawned during this invocation"""


def new_run_id() -> str:
    stamp = datetime.now(timezone.utc).strftime('%Y%m%dT%H%M%SZ')
    return f'{stamp}-{uuid.uuid4().hex[:6]}'


def apply_parameter_updates(state: LoopState, updates, model: WorkflowModel = None,
                            source: str = None) -> LoopState:
    """
    Apply parameter updates

    Return a new state with ``updates`` appended to its patches; a later patch
    of the same path wins. The given state is left untouched.

    :param state: current loop state
    :param updates: :class:`ParameterUpdate` objects, in order
    :param model: (optional) model to check each update against
    :param source: (optional) iteration block whose decision returned the
        updates; they are dropped when an enclosing loop restarts that block
    :raises BadPatch: the job, activity or config path of an update does not
        exist in the model
    """
    updates = tuple(replace(x, source=source) if source else x for x in updates)
    if not updates:
        return state
    if model is not None:
        for u in updates:
            job = model.job(u.job)
            if job is None:
                raise BadPatch(f"unknown job '{u.job}'")
            activity = job.activity(u.activity)
            if activity is None:
                raise BadPatch(f"job '{u.job}' has no activity '{u.activity}'")
            set_path(state.config_for(u.job, activity), u.path, u.value)
    return replace(state, parameter_patches=state.parameter_patches + updates)


def _sanitize(x: str) -> str:
    return re.sub(r'[^A-Za-z0-9_.@,#-]', '_', x)


def assemble_decision_context(
        journal: RunJournal, store: ArtifactStore, loop: Loop, persisted: dict,
        model: WorkflowModel, state: LoopState
) -> DecisionRequest:
    """
    Assemble decision request

    Collect the outputs of every task of the run which has finished so far,
    ordered per job by iteration and task id, and copy each of them out of the
    store into a folder private to this decision. The config view holds the
    current (patched) config of every activity in the loop body. The caller
    removes ``request.folder`` once the decision is made.

    :raises ArtifactNotFound: an output recorded in the journal is gone from
        the store
    :raises DecisionError: ``DECISION_PROTOCOL_ERROR`` when the request does
        not match the decision request schema
    """
    index = state.index(loop.block)
    folder = Path(journal.folder, 'decisions', f'{loop.block}@{index}-{len(journal.records)}')
    history = {}
    try:
        for job in model.jobs:
            done = sorted(journal.successful(job.name), key=lambda x: (x.iteration, x.task))
            if not done:
                continue
            history[job.name] = [
                {
                    'iteration': [list(i) for i in x.iteration],
                    'task': x.task,
                    'outputs': {
                        name: {
                            'artifact': artifact,
                            'path': str(store.materialize(
                                artifact, Path(folder, _sanitize(x.task), name)
                            ))
                        }
                        for name, artifact in sorted(x.outputs.items())
                    }
                }
                for x in done
            ]
        config = {
            job.name: {a.name: state.config_for(job.name, a) for a in job.activities}
            for job in model.jobs if job.name in loop.body
        }
        request = DecisionRequest(
            workflow=model.name,
            block=loop.block,
            iteration=index,
            history=history,
            persist=persisted or {},
            config=config,
            folder=folder
        )
        _schema.validate(
            request.to_dict(), _schema.DECISION_REQUEST,
            error=lambda m, p: DecisionError('DECISION_PROTOCOL_ERROR', f'request {p}: {m}')
        )
    except Exception:
        shutil.rmtree(folder, ignore_errors=True)
        raise
    return request


def invoke_decision(block: IterationBlock, request: DecisionRequest, timeout: float = 300,
                    store: ArtifactStore = None) -> DecisionResponse:
    """
    Invoke decision command

    :param block: iteration block whose command to run
    :param request: document written to the command's standard input
    :param timeout: seconds before the command is killed
    :param store: (optional) store keeping the command's standard error
    :raises DecisionError: ``DECISION_TIMEOUT``, ``DECISION_FAILED`` on a
        nonzero exit or a command that cannot be started, and
        ``DECISION_PROTOCOL_ERROR`` on a response that is not a valid document
    """
    command = list(block.decision_command)
    log.debug(f'invoking decision of {block.name}: {command}')
    try:
        proc = subprocess.run(
            command, input=json.dumps(request.to_dict()).encode('utf8'),
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, timeout=timeout
        )
    except subprocess.TimeoutExpired:
        raise DecisionError('DECISION_TIMEOUT', f"decision of '{block.name}' ran longer than {timeout}s")
    except OSError as e:
        raise DecisionError('DECISION_FAILED', f"decision of '{block.name}' could not start: {e}")

    log_ref = store.put_bytes(proc.stderr) if store is not None else None
    if proc.returncode != 0:
        tail = proc.stderr.decode('utf8', 'replace').strip().splitlines()[-1:] or ['']
        raise DecisionError(
            'DECISION_FAILED', f"decision of '{block.name}' exited {proc.returncode}: {tail[0]}"
        )
    try:
        doc = json.loads(proc.stdout)
    except ValueError as e:
        raise DecisionError('DECISION_PROTOCOL_ERROR', f"decision of '{block.name}' wrote invalid JSON: {e}")
    return replace(DecisionResponse.from_dict(doc), log_ref=log_ref)


class _Halt(Exception):
    def __init__(self, failed_task: Optional[str], message: str, code: Optional[str] = None):
        self.failed_task = failed_task
        self.message = message
        self.code = code
        super().__init__(message)


class _LoopDriver:
    def __init__(self, model: WorkflowModel, store: ArtifactStore, journal: RunJournal,
                 options: CliConfig, replay: bool = False):
        self.model = model
        self.store = store
        self.journal = journal
        self.options = options
        self.replay = replay
        self.loops = loop_structure(model)
        self.by_name = {x.block: x for x in self.loops}
        self.state = LoopState()
        self.cache = TaskCache(options.cache_path)
        self.executed: List[str] = []

    def run(self) -> RunResult:
        run_id = self.journal.run_id
        try:
            self._run_plan(self._plan(), owner=None)
        except _Halt as e:
            return self._end(False, e.failed_task, e.message, e.code)
        except (DecisionError, PlanError, StoreError) as e:
            log.error(str(e))
            return self._end(False, None, str(e), getattr(e, 'code', None))
        log.info(f'run {run_id} succeeded')
        return self._end(True)

    def _end(self, ok: bool, failed_task: str = None, message: str = None, code: str = None) -> RunResult:
        self.journal.append('end', {
            'ok': ok, 'failed_task': failed_task, 'message': message, 'code': code
        })
        return RunResult(
            run_id=self.journal.run_id, ok=ok, failed_task=failed_task, message=message,
            code=code, executed=tuple(self.executed)
        )

    def _plan(self, scope: str = None, released: str = None) -> TaskPlan:
        return build_iteration_plan(
            self.model, self.loops, self.state, scope=scope, released=released,
            run_id=self.journal.run_id
        )

    def _enclosing(self, loop: Loop) -> List[Loop]:
        chain = [loop]
        while chain[0].parent is not None:
            chain.insert(0, self.by_name[chain[0].parent])
        return chain

    def _run_plan(self, plan: TaskPlan, owner: Optional[str]) -> bool:
        """Execute a plan and drive the loops it reaches; True once the owner's decision point is reached"""
        result = execute_plan(
            plan, self.store, self.journal, self.options.parallelism, self.cache,
            self.options.progress
        )
        self.executed += result.executed
        if not result.ok:
            raise _Halt(result.failed_task, f'task {result.failed_task} failed: {result.message}')

        reached = False
        points = sorted(plan.decision_points, key=lambda x: (-self.by_name[x.block].depth, x.block))
        for point in points:
            if point.block == owner:
                reached = True
            elif point.block not in self.state.stopped:
                reached = self._drive_loop(self.by_name[point.block], owner) or reached
        return reached

    def _drive_loop(self, loop: Loop, owner: Optional[str]) -> bool:
        block = self.model.block(loop.block)
        nested = [x.block for x in self.loops if x.body < loop.body]
        while True:
            response = self._decide(loop)
            index = self.state.index(loop.block)
            if response.action is Action.REPEAT and index + 1 >= block.max_iterations:
                self.journal.warn(
                    f"loop '{loop.block}' reached max_iterations ({block.max_iterations}); forcing stop"
                )
                response = DecisionResponse(Action.STOP, persist=response.persist)

            if response.action is Action.STOP:
                log.info(f"loop '{loop.block}' stopped at index {index}")
                self.state = self.state.stop(loop)
                return self._run_plan(self._plan(released=loop.block), owner)

            state = apply_parameter_updates(
                self.state, response.parameter_updates, self.model, source=loop.block
            )
            state = replace(state, persisted={**state.persisted, loop.block: response.persist})
            self.state = state.repeat(loop, nested)
            vector = self.state.iteration(self._enclosing(loop))
            self.journal.append('iteration', {
                'block': loop.block,
                'index': self.state.index(loop.block),
                'iteration': [list(x) for x in vector]
            })
            log.info(f"loop '{loop.block}' repeating at [{format_iteration(vector)}]")
            if not self._run_plan(self._plan(scope=loop.block), loop.block):
                raise PlanError(f"iteration of loop '{loop.block}' never reached its decision point")

    def _decide(self, loop: Loop) -> DecisionResponse:
        vector = self.state.iteration(self._enclosing(loop))
        if self.replay:
            recorded = self.journal.decision(loop.block, vector)
            if recorded is not None:
                log.info(f"replaying decision of '{loop.block}' at [{format_iteration(vector)}]")
                return DecisionResponse.from_dict(recorded['response'])

        request = assemble_decision_context(
            self.journal, self.store, loop, self.state.persisted.get(loop.block, {}),
            self.model, self.state
        )
        try:
            response = invoke_decision(
                self.model.block(loop.block), request, self.options.decision_timeout, self.store
            )
        except DecisionError as e:
            log.error(f"decision of '{loop.block}' failed: {e}")
            raise
        finally:
            shutil.rmtree(request.folder, ignore_errors=True)
        self.journal.append('decision', {
            'block': loop.block,
            'index': request.iteration,
            'iteration': [list(x) for x in vector],
            'response': response.to_dict(),
            'log': response.log_ref
        })
        log.info(f"decision of '{loop.block}' at [{format_iteration(vector)}]: {response.action.value}")
        return response


def _require_valid(model: WorkflowModel):
    report = validate(model)
    if not report.ok:
        raise InvalidWorkflow(report)


def run_workflow(model: WorkflowModel, store: ArtifactStore, options: CliConfig = None,
                 run_id: str = None) -> RunResult:
    """
    Run workflow

    Create a new run of ``model`` and drive it to completion or to its first
    failure. The definition is saved next to the journal so the run can be
    resumed later.

    :param model: workflow to run
    :param store: artifact store of the workspace
    :param options: (optional) run configuration
    :param run_id: (optional) identifier of the new run; generated if absent
    :raises InvalidWorkflow: the model fails validation
    """
    options = options or CliConfig()
    _require_valid(model)
    run_id = run_id or new_run_id()
    options.runs.mkdir(parents=True, exist_ok=True)
    journal = RunJournal.create(options.runs, run_id, {
        'workflow': model.name,
        'fingerprint': model.fingerprint(),
        'jobs': [x.name for x in model.jobs]
    })
    Path(journal.folder, 'workflow.json').write_text(dump_workflow(model))
    log.info(f'starting run {run_id} of workflow {model.name}')
    with RunLock(journal.folder):
        store.clear_tmp()
        return _LoopDriver(model, store, journal, options).run()


def resume(run_id: str, store: ArtifactStore, options: CliConfig = None,
           model: WorkflowModel = None) -> RunResult:
    """
    Resume run

    Drive an existing run again from its first plan. Tasks that finished
    before are skipped by fingerprint and recorded decisions are replayed, so
    only the work that failed (and what follows it) executes.

    :param run_id: run to resume
    :param store: artifact store of the workspace
    :param options: (optional) run configuration
    :param model: (optional) corrected workflow to use in place of the saved
        definition
    :raises UnknownRun: no journal exists for ``run_id``
    :raises JournalCorrupt: the journal fails its hash chain
    """
    options = options or CliConfig()
    journal = RunJournal.open(options.runs, run_id)
    saved = Path(journal.folder, 'workflow.json')
    if model is None:
        model = load_workflow(saved)
    else:
        saved.write_text(dump_workflow(model))
    _require_valid(model)

    with RunLock(journal.folder):
        journal = RunJournal(journal.folder)
        journal.repair()
        store.clear_tmp()
        if model.fingerprint() != journal.header['fingerprint']:
            journal.warn(f'workflow of run {run_id} changed since the run was created')
        journal.append('resume', {'fingerprint': model.fingerprint()})
        log.info(f'resuming run {run_id}')
        return _LoopDriver(model, store, journal, options, replay=True).run()

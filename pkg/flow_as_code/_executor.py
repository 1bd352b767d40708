"""
Plan execution

Runs the tasks of a :class:`TaskPlan` as external commands, in dependency
order, with at most ``parallelism`` tasks at once. Worker threads only spawn
commands and ingest their outputs; every journal append happens on the
coordinating thread.

A task command sees the following environment:

``FLOW_INPUTS``
    path of a JSON document mapping each input port to its materialized path
``FLOW_OUTPUT_DIR``
    folder in which to write one file (or folder) per declared output
``FLOW_CONFIG``
    path of the JSON config document of the activity
``FLOW_ITERATION``
    comma separated loop indices, outermost first; empty outside of loops
"""
import hashlib
import json
import logging
import os
import re
import shutil
import subprocess
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from graphlib import TopologicalSorter
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import networkx as nx
from tqdm import tqdm

from flow_as_code._journal import RunJournal, State, TaskCache, TaskRecord, TaskStatus, now
from flow_as_code._planner import TaskNode, TaskPlan, format_iteration
from flow_as_code._store import ArtifactStore, Resolution, resolve_port
from flow_as_code.exceptions import FlowError

__all__ = [
    'PlanResult', 'fingerprint', 'resolve_inputs', 'up_to_date', 'execute_task',
    'execute_plan', 'task_label'
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlanResult:
    ok: bool
    records: Dict[str, TaskRecord] = field(default_factory=dict)
    failed_task: Optional[str] = None
    message: Optional[str] = None
    executed: Tuple[str, ...] = ()
    """tasks whose command was spawned, in completion order"""

    def states(self) -> Dict[str, State]:
        return {k: v.state for k, v in self.records.items()}


def task_label(node: TaskNode) -> str:
    """Name of a task's entry in a multi-task port tree"""
    if node.scenario is None:
        return node.activity.name
    return f'{node.activity.name}.{node.scenario}'


def _sanitize(task: str) -> str:
    return re.sub(r'[^A-Za-z0-9_.-]', '_', task)


def resolve_inputs(node: TaskNode, journal: RunJournal, store: ArtifactStore) -> Dict[str, Resolution]:
    """
    Resolve every input port of ``node`` to the artifact feeding it.

    :raises UnresolvedPort: a producer has no finished task for this iteration
    """
    resolved = {}
    for port, source in sorted(node.inputs.items()):
        job, out = source.split('.', 1)
        resolved[port] = resolve_port(job, out, journal, node.iteration, store)
    return resolved


def fingerprint(node: TaskNode, resolved: Dict[str, Resolution]) -> str:
    """
    Task fingerprint

    Hash of everything that determines the result of a task: the command, the
    config after parameter patches, the initializer bindings, the artifacts on
    each input port, the fingerprints of the tasks that produced them, and the
    iteration vector.
    """
    doc = {
        'command': list(node.activity.command),
        'config': node.activity.config,
        'input_bindings': node.input_bindings,
        'inputs': sorted([k, v.artifact] for k, v in resolved.items()),
        'lineage': sorted(f for v in resolved.values() for f in v.fingerprints),
        'iteration': [list(x) for x in node.iteration]
    }
    encoded = json.dumps(doc, sort_keys=True, separators=(',', ':'), default=str)
    log.debug(f'fingerprint of {node.id}: {encoded}')
    return hashlib.sha256(encoded.encode('utf8')).hexdigest()


def up_to_date(node: TaskNode, resolved: Dict[str, Resolution], journal: RunJournal,
               store: ArtifactStore = None, cache: TaskCache = None) -> Optional[TaskRecord]:
    """
    Up-to-date check

    Look for an earlier successful execution with the same fingerprint, first
    in this run's journal and then in the workspace cache. A hit is only
    returned while all of its output and log artifacts are still in the store.

    :return: the earlier record, carrying the outputs to reuse, or ``None``
    """
    fp = fingerprint(node, resolved)
    candidates = [
        x for x in reversed(journal.revisions())
        if x.fingerprint == fp and x.task == node.id and x.state.successful
    ]
    if not candidates and cache is not None:
        hit = cache.lookup(fp)
        if hit is not None:
            candidates = [TaskRecord(
                task=hit['task'], job=node.job, iteration=node.iteration,
                status=TaskStatus(State.FINISHED), fingerprint=fp,
                outputs=hit['outputs'], log_ref=hit.get('log_ref')
            )]
    for x in candidates:
        refs = list(x.outputs.values()) + ([x.log_ref] if x.log_ref else [])
        if store is not None and not all(store.exists(r) for r in refs):
            log.debug(f'ignoring cached result of {node.id}: artifacts missing from the store')
            continue
        if set(x.outputs) != set(node.outputs):
            log.debug(f'ignoring cached result of {node.id}: outputs differ')
            continue
        return x
    log.debug(f'no cached result for {node.id}')
    return None


def _assign(doc: dict, path: str, value):
    keys = path.split('.')
    for k in keys[:-1]:
        doc = doc.setdefault(k, {})
    doc[keys[-1]] = value


def execute_task(node: TaskNode, resolved: Dict[str, str], workdir: Union[str, Path],
                 store: ArtifactStore, fp: str = '', attempt: int = 1) -> TaskRecord:
    """
    Execute task

    Materialize the inputs of a task in a fresh working directory, run its
    command there, and ingest the declared outputs and the combined standard
    output and error stream into the store. Failures are reported through the
    state of the returned record, never raised.

    :param node: the task to run
    :param resolved: input port mapped to artifact id
    :param workdir: folder to run in; emptied first if it exists
    :param store: artifact store receiving outputs and the log
    :param fp: fingerprint to record on the result
    :param attempt: attempt number to record on the result
    """
    workdir = Path(workdir)
    if workdir.exists():
        shutil.rmtree(workdir)
    inputs, outputs = Path(workdir, 'inputs'), Path(workdir, 'outputs')
    inputs.mkdir(parents=True)
    outputs.mkdir()

    manifest = {
        k: str(store.materialize(v, Path(inputs, k)).absolute())
        for k, v in sorted(resolved.items())
    }
    config = json.loads(json.dumps(node.activity.config))
    for path, binding in sorted(node.input_bindings.items()):
        if 'port' in binding:
            _assign(config, path, manifest.get(binding['port']))
        else:
            _assign(config, path, binding['literal'])

    Path(workdir, 'inputs.json').write_text(json.dumps(manifest, indent=2))
    Path(workdir, 'config.json').write_text(json.dumps(config, indent=2))
    env = dict(
        os.environ,
        FLOW_INPUTS=str(Path(workdir, 'inputs.json').absolute()),
        FLOW_OUTPUT_DIR=str(outputs.absolute()),
        FLOW_CONFIG=str(Path(workdir, 'config.json').absolute()),
        FLOW_ITERATION=format_iteration(node.iteration)
    )

    base = TaskRecord(
        task=node.id, job=node.job, iteration=node.iteration, label=task_label(node),
        fingerprint=fp, attempt=attempt, status=TaskStatus(State.RUNNING)
    )
    started = now()
    log.debug(f'spawning {node.id}: {list(node.activity.command)}')
    try:
        proc = subprocess.run(
            list(node.activity.command), cwd=workdir, env=env,
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT
        )
    except OSError as e:
        log_ref = store.put_bytes(f'{e}\n'.encode('utf8'))
        return replace(base, log_ref=log_ref, status=TaskStatus(
            State.FAILED, started, now(), 'SPAWN_ERROR'
        ))

    log_ref = store.put_bytes(proc.stdout)
    if proc.returncode != 0:
        return replace(base, log_ref=log_ref, status=TaskStatus(
            State.FAILED, started, now(), f'EXIT {proc.returncode}'
        ))

    missing = [x for x in node.outputs if not Path(outputs, x).exists()]
    if missing:
        return replace(base, log_ref=log_ref, status=TaskStatus(
            State.FAILED, started, now(), f"OUTPUT_MISSING {','.join(missing)}"
        ))

    produced = {x: store.put_artifact(Path(outputs, x)) for x in node.outputs}
    shutil.rmtree(workdir, ignore_errors=True)
    return replace(base, outputs=produced, log_ref=log_ref, status=TaskStatus(
        State.FINISHED, started, now()
    ))


def execute_plan(plan: TaskPlan, store: ArtifactStore, journal: RunJournal, parallelism: int = 1,
                 cache: TaskCache = None, progress: bool = False) -> PlanResult:
    """
    Execute plan

    Drive every task of the plan to a terminal state. Tasks whose fingerprint
    matches an earlier success are Skipped and reuse its outputs. After the
    first failure no further task starts; tasks already running are allowed to
    finish, and every task that never started is Blocked.

    :param plan: the plan to run
    :param store: artifact store for inputs, outputs and logs
    :param journal: journal of the run, written from this thread only
    :param parallelism: maximum number of concurrently running commands
    :param cache: (optional) workspace cache for reuse across runs
    :param progress: show a progress bar on stderr
    """
    if parallelism < 1:
        raise FlowError(f'parallelism must be at least 1, got {parallelism}')
    journal.append('plan', {
        'iteration': [list(x) for x in plan.iteration],
        'nodes': [x.id for x in plan.nodes],
        'decision_points': [x.block for x in plan.decision_points]
    })
    log.info(f'executing plan of {len(plan.nodes)} tasks at iteration [{format_iteration(plan.iteration)}]')

    records: Dict[str, TaskRecord] = {}
    for node in plan.nodes:
        records[node.id] = journal.record_task(TaskRecord(
            task=node.id, job=node.job, iteration=node.iteration, label=task_label(node),
            attempt=journal.next_attempt(node.id), status=TaskStatus(State.PENDING)
        ))

    sorter = TopologicalSorter({x.id: set(x.depends_on) for x in plan.nodes})
    sorter.prepare()
    queue: List[str] = []
    running: Dict[Future, str] = {}
    executed: List[str] = []
    failed: Optional[TaskRecord] = None
    bar = tqdm(total=len(plan.nodes), unit='task', disable=not progress, desc=plan.run_id or 'plan')

    def advance(rec: TaskRecord) -> TaskRecord:
        records[rec.task] = journal.record_task(rec)
        return records[rec.task]

    def settle(rec: TaskRecord):
        nonlocal failed
        rec = advance(rec)
        bar.update()
        if rec.state is State.FAILED:
            log.error(f'task {rec.task} failed: {rec.status.message} (log {rec.log_ref})')
            failed = failed or rec
            return
        if rec.state is State.FINISHED:
            for port, artifact in sorted(rec.outputs.items()):
                journal.record_provenance(artifact, rec, port)
            if cache is not None:
                cache.add(rec, journal.run_id)
            log.info(f'task {rec.task} finished')
        sorter.done(rec.task)

    def start(pool: ThreadPoolExecutor, node: TaskNode):
        prior = records[node.id]
        try:
            resolved = resolve_inputs(node, journal, store)
            fp = fingerprint(node, resolved)
            hit = up_to_date(node, resolved, journal, store, cache)
        except (FlowError, OSError, ValueError) as e:
            log.error(f'unable to fingerprint {node.id}: {e}')
            advance(replace(prior, status=TaskStatus(State.READY)))
            advance(replace(prior, status=TaskStatus(State.RUNNING, now())))
            settle(replace(prior, status=TaskStatus(State.FAILED, now(), now(), 'FINGERPRINT_ERROR')))
            return
        if hit is not None:
            log.info(f'task {node.id} skipped: up to date with {hit.task}')
            settle(replace(
                prior, fingerprint=fp, outputs=dict(hit.outputs), log_ref=hit.log_ref,
                status=TaskStatus(State.SKIPPED, message=f'up to date with {hit.task}')
            ))
            return
        advance(replace(prior, fingerprint=fp, status=TaskStatus(State.READY)))
        advance(replace(prior, fingerprint=fp, status=TaskStatus(State.RUNNING, now())))
        workdir = Path(journal.folder, 'work', _sanitize(node.id))
        running[pool.submit(
            execute_task, node, {k: v.artifact for k, v in resolved.items()},
            workdir, store, fp, prior.attempt
        )] = node.id

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        while sorter.is_active():
            started = True
            while started and failed is None:
                # skipped tasks settle at once and may release more work
                queue.extend(sorted(sorter.get_ready()))
                started = False
                while queue and len(running) < parallelism and failed is None:
                    start(pool, plan.node(queue.pop(0)))
                    started = True
            if not running:
                break
            done, _ = wait(list(running), return_when=FIRST_COMPLETED)
            for fut in done:
                name = running.pop(fut)
                try:
                    rec = fut.result()
                except Exception as e:
                    log.exception(f'unexpected error while executing {name}')
                    rec = replace(records[name], status=TaskStatus(
                        State.FAILED, records[name].status.started_at, now(), f'ERROR {e}'
                    ))
                executed.append(name)
                settle(rec)

    if failed is not None:
        descendants = nx.descendants(plan.graph(), failed.task)
        for x in plan.nodes:
            if not records[x.id].state.terminal:
                reason = f'blocked by {failed.task}' if x.id in descendants \
                    else f'halted after failure of {failed.task}'
                advance(replace(records[x.id], status=TaskStatus(State.BLOCKED, message=reason)))
                bar.update()
    bar.close()

    result = PlanResult(
        ok=failed is None,
        records=dict(records),
        failed_task=failed.task if failed else None,
        message=failed.status.message if failed else None,
        executed=tuple(executed)
    )
    log.info(
        f"plan {'succeeded' if result.ok else 'failed at ' + result.failed_task}: "
        f"{len(executed)} executed, "
        f"{sum(1 for x in records.values() if x.state is State.SKIPPED)} skipped"
    )
    return result

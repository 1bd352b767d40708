"""
Run Journal

Append-only record of one run. Every line of ``journal.jsonl`` is a JSON
record chained to its predecessor by a SHA-256 hash, so the status of a run
can always be rebuilt from the journal bytes alone, and tampering or
mid-file damage is detected on open. A trailing line without its newline is
the mark of an interrupted append; it is discarded rather than reported.

Record kinds:

- ``run`` header, written once when the run is created
- ``resume`` written each time the run is resumed
- ``plan`` a task plan handed to the executor
- ``task`` one revision of a task's status
- ``provenance`` an output artifact and the task that produced it
- ``iteration`` a loop advanced to a new index
- ``decision`` the response of an iteration block's decision command
- ``warning`` anything the operator should see in the status of the run
- ``end`` the run finished, successfully or not
"""
import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

from flow_as_code.exceptions import JournalCorrupt, JournalError, RunLocked, UnknownRun

__all__ = [
    'State', 'TaskStatus', 'TaskRecord', 'RunJournal', 'RunLock', 'TaskCache',
    'StatusRow', 'StatusTable', 'status_snapshot'
]

log = logging.getLogger(__name__)

GENESIS = '0' * 64
Iteration = Tuple[Tuple[str, int], ...]


class State(Enum):
    PENDING = 'Pending'
    READY = 'Ready'
    RUNNING = 'Running'
    FINISHED = 'Finished'
    FAILED = 'Failed'
    SKIPPED = 'Skipped'
    BLOCKED = 'Blocked'

    @property
    def terminal(self) -> bool:
        return self in TERMINAL

    @property
    def successful(self) -> bool:
        return self in (State.FINISHED, State.SKIPPED)


TERMINAL = frozenset({State.FINISHED, State.FAILED, State.SKIPPED, State.BLOCKED})

TRANSITIONS = {
    State.PENDING: {State.READY, State.SKIPPED, State.BLOCKED},
    State.READY: {State.RUNNING},
    State.RUNNING: {State.FINISHED, State.FAILED},
}

SEVERITY = [
    State.FAILED, State.BLOCKED, State.RUNNING, State.READY,
    State.PENDING, State.SKIPPED, State.FINISHED
]


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='milliseconds')


def _digest(record: dict) -> str:
    return hashlib.sha256(
        json.dumps(record, sort_keys=True, separators=(',', ':')).encode('utf8')
    ).hexdigest()


@dataclass(frozen=True)
class TaskStatus:
    state: State
    started_at: Optional[str] = None
    ended_at: Optional[str] = None
    message: Optional[str] = None


@dataclass(frozen=True)
class TaskRecord:
    """
    One revision of a task's status. ``attempt`` counts the executions of the
    same task id within a run; resuming a run starts a new attempt.
    """
    task: str
    job: str
    status: TaskStatus
    iteration: Iteration = ()
    label: str = ''
    fingerprint: str = ''
    outputs: Dict[str, str] = field(default_factory=dict)
    log_ref: Optional[str] = None
    attempt: int = 1
    seq: int = -1
    at: Optional[str] = None

    @property
    def state(self) -> State:
        return self.status.state

    def to_dict(self) -> dict:
        return {
            'task': self.task,
            'job': self.job,
            'label': self.label,
            'iteration': [list(x) for x in self.iteration],
            'state': self.status.state.value,
            'started_at': self.status.started_at,
            'ended_at': self.status.ended_at,
            'message': self.status.message,
            'fingerprint': self.fingerprint,
            'outputs': dict(sorted(self.outputs.items())),
            'log_ref': self.log_ref,
            'attempt': self.attempt
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'TaskRecord':
        return cls(
            task=d['task'],
            job=d['job'],
            label=d.get('label', ''),
            iteration=tuple((k, i) for k, i in d.get('iteration', [])),
            status=TaskStatus(
                State(d['state']), d.get('started_at'), d.get('ended_at'), d.get('message')
            ),
            fingerprint=d.get('fingerprint', ''),
            outputs=d.get('outputs', {}),
            log_ref=d.get('log_ref'),
            attempt=d.get('attempt', 1),
            seq=d.get('seq', -1),
            at=d.get('at')
        )


class RunLock:
    """
    Exclusive claim on a run folder, held for as long as an engine process
    works on the run. A lock left behind by a process that no longer exists is
    taken over.
    """

    def __init__(self, folder: Path):
        self.path = Path(folder, 'lock')

    def _holder(self) -> Optional[int]:
        try:
            return int(self.path.read_text().strip())
        except (OSError, ValueError):
            return None

    @staticmethod
    def _alive(pid: int) -> bool:
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return False
        except PermissionError:
            return True
        return True

    def acquire(self):
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                pid = self._holder()
                if pid is not None and pid != os.getpid() and self._alive(pid):
                    raise RunLocked(f'run is locked by process {pid} ({self.path})')
                log.warning(f'removing stale lock {self.path} left by process {pid}')
                self.path.unlink(missing_ok=True)
                continue
            with os.fdopen(fd, 'w') as f:
                f.write(str(os.getpid()))
            return self
        raise RunLocked(f'unable to lock {self.path}')

    def release(self):
        if self._holder() == os.getpid():
            self.path.unlink(missing_ok=True)

    def __enter__(self):
        return self.acquire()

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.release()


class RunJournal:
    """
    Run journal

    Open (or create) the journal of one run. Appends come from a single
    coordinating thread; the internal lock only keeps concurrent readers in
    the same process from seeing a half-updated index.

    :param folder: the run folder, ``<workspace>/runs/<run_id>``
    :raises JournalCorrupt: the hash chain is broken or a complete line is
        not a valid record
    """
    file_name = 'journal.jsonl'

    def __init__(self, folder: Union[str, Path]):
        self.folder = Path(folder)
        self.path = Path(self.folder, self.file_name)
        self.run_id = self.folder.name
        self._lock = threading.Lock()
        self.records: List[dict] = []
        self.torn: Optional[int] = None
        """byte length of the valid prefix, when the file ends in an incomplete record"""
        self._latest: Dict[str, TaskRecord] = {}
        self._load()

    @classmethod
    def create(cls, runs: Union[str, Path], run_id: str, header: dict) -> 'RunJournal':
        folder = Path(runs, run_id)
        if Path(folder, cls.file_name).exists():
            raise JournalError(f"run '{run_id}' already exists")
        folder.mkdir(parents=True, exist_ok=True)
        journal = cls(folder)
        journal.append('run', dict(run_id=run_id, **header))
        return journal

    @classmethod
    def open(cls, runs: Union[str, Path], run_id: str) -> 'RunJournal':
        folder = Path(runs, run_id)
        if not Path(folder, cls.file_name).is_file():
            raise UnknownRun(f"no run '{run_id}' in {Path(runs)}")
        return cls(folder)

    def _load(self):
        if not self.path.exists():
            return
        raw = self.path.read_bytes()
        lines = raw.splitlines(keepends=True)
        prev, good = GENESIS, 0
        for n, line in enumerate(lines, start=1):
            if not line.endswith(b'\n') and n == len(lines):
                # the writer may still be appending; leave the file alone
                log.debug(f'{self.path}: ignoring incomplete record at line {n}')
                self.torn = good
                break
            try:
                record = json.loads(line)
            except ValueError:
                raise JournalCorrupt(f'{self.path}: line {n} is not a valid record')
            claimed = record.pop('hash', None)
            if record.get('prev') != prev or _digest(record) != claimed:
                raise JournalCorrupt(f'{self.path}: hash chain broken at line {n}')
            record['hash'] = claimed
            self._index(record)
            prev, good = claimed, good + len(line)

    def _index(self, record: dict):
        self.records.append(record)
        if record['kind'] == 'task':
            rec = TaskRecord.from_dict(record)
            self._latest[rec.task] = rec

    @property
    def head(self) -> str:
        return self.records[-1]['hash'] if self.records else GENESIS

    def repair(self):
        """
        Cut an incomplete last record off the file. Only the process holding
        the run's :class:`RunLock` may call this.
        """
        if self.torn is None:
            return
        log.warning(f'{self.path}: discarding incomplete record after byte {self.torn}')
        with self.path.open('r+b') as f:
            f.truncate(self.torn)
        self.torn = None

    def append(self, kind: str, body: dict) -> dict:
        """
        Append one record, chained to the current head, and flush it to disk

        :raises JournalError: the file ends in an incomplete record; see
            :meth:`repair`
        """
        if self.torn is not None:
            raise JournalError(f'{self.path}: ends in an incomplete record')
        with self._lock:
            record = dict(body, kind=kind, seq=len(self.records), at=now(), prev=self.head)
            record['hash'] = _digest(record)
            line = json.dumps(record, sort_keys=True) + '\n'
            with self.path.open('a', encoding='utf8') as f:
                f.write(line)
                f.flush()
                os.fsync(f.fileno())
            self._index(record)
            return record

    @property
    def header(self) -> dict:
        if not self.records or self.records[0]['kind'] != 'run':
            raise JournalCorrupt(f'{self.path}: journal has no run header')
        return self.records[0]

    def of_kind(self, kind: str) -> Iterator[dict]:
        return (x for x in self.records if x['kind'] == kind)

    def record_task(self, rec: TaskRecord) -> TaskRecord:
        """
        Journal a task revision

        :raises JournalError: the revision is not a legal successor of the
            task's previous state in the same attempt
        """
        prior = self._latest.get(rec.task)
        if prior is not None and prior.attempt == rec.attempt:
            if rec.state not in TRANSITIONS.get(prior.state, set()):
                raise JournalError(
                    f"illegal transition of '{rec.task}': {prior.state.value} -> {rec.state.value}"
                )
        elif rec.state is not State.PENDING:
            raise JournalError(f"task '{rec.task}' must enter the journal as Pending")
        self.append('task', rec.to_dict())
        return self._latest[rec.task]

    def latest(self, task: str) -> Optional[TaskRecord]:
        return self._latest.get(task)

    def tasks(self) -> List[TaskRecord]:
        """Latest revision of every task, in journal order"""
        return sorted(self._latest.values(), key=lambda x: x.seq)

    def revisions(self) -> List[TaskRecord]:
        return [TaskRecord.from_dict(x) for x in self.of_kind('task')]

    def successful(self, job: str) -> List[TaskRecord]:
        """Tasks of ``job`` whose latest revision is Finished or Skipped"""
        return [x for x in self.tasks() if x.job == job and x.state.successful]

    def next_attempt(self, task: str) -> int:
        prior = self._latest.get(task)
        return prior.attempt + 1 if prior else 1

    def record_provenance(self, artifact: str, rec: TaskRecord, port: str):
        self.append('provenance', {
            'artifact': artifact,
            'producer': rec.task,
            'job': rec.job,
            'port': port,
            'run_id': self.run_id,
            'iteration': [list(x) for x in rec.iteration]
        })

    def provenance(self, artifact: str) -> List[dict]:
        """Every provenance record for ``artifact``, oldest first"""
        return [x for x in self.of_kind('provenance') if x['artifact'] == artifact]

    def decision(self, block: str, iteration: Iteration) -> Optional[dict]:
        """Most recent decision recorded for ``block`` at the given iteration vector"""
        key = [list(x) for x in iteration]
        found = [
            x for x in self.of_kind('decision')
            if x['block'] == block and x['iteration'] == key
        ]
        return found[-1] if found else None

    def warn(self, message: str):
        log.warning(message)
        self.append('warning', {'message': message})

    @property
    def ended(self) -> Optional[dict]:
        """The ``end`` record, unless the run was resumed after it"""
        for x in reversed(self.records):
            if x['kind'] == 'end':
                return x
            if x['kind'] in ('resume', 'run'):
                return None
        return None


class TaskCache:
    """
    Workspace-wide index of finished tasks by fingerprint, so runs can reuse
    the work of earlier runs.

    :param path: location of the ``cache.jsonl`` index
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: Dict[str, dict] = {}
        if self.path.is_file():
            for line in self.path.read_text(encoding='utf8').splitlines():
                try:
                    x = json.loads(line)
                except ValueError:
                    log.debug(f'{self.path}: ignoring unreadable cache line')
                    continue
                self._entries[x['fingerprint']] = x

    def __len__(self):
        return len(self._entries)

    def lookup(self, fingerprint: str) -> Optional[dict]:
        return self._entries.get(fingerprint)

    def add(self, rec: TaskRecord, run_id: str):
        entry = {
            'fingerprint': rec.fingerprint,
            'task': rec.task,
            'run_id': run_id,
            'outputs': dict(sorted(rec.outputs.items())),
            'log_ref': rec.log_ref
        }
        with self._lock:
            if self._entries.get(rec.fingerprint) == entry:
                return
            self._entries[rec.fingerprint] = entry
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open('a', encoding='utf8') as f:
                f.write(json.dumps(entry, sort_keys=True) + '\n')


@dataclass(frozen=True)
class StatusRow:
    name: str
    state: State
    iteration: str
    finished: int
    total: int
    counts: Dict[str, int]
    updated: Optional[str]

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'state': self.state.value,
            'iteration': self.iteration,
            'finished': self.finished,
            'total': self.total,
            'counts': self.counts,
            'updated': self.updated
        }


@dataclass(frozen=True)
class StatusTable:
    run_id: str
    workflow: str
    rows: Tuple[StatusRow, ...]
    result: Optional[str] = None
    warnings: Tuple[str, ...] = ()

    def row(self, name: str) -> StatusRow:
        return next(x for x in self.rows if x.name == name)

    def to_dict(self) -> dict:
        return {
            'run_id': self.run_id,
            'workflow': self.workflow,
            'result': self.result,
            'jobs': [x.to_dict() for x in self.rows],
            'warnings': list(self.warnings)
        }

    def render(self) -> str:
        head = ('NAME', 'STATE', 'ITERATION', 'TASKS', 'UPDATED')
        body = [
            (x.name, x.state.value, x.iteration, f'{x.finished}/{x.total}',
             _clock(x.updated))
            for x in self.rows
        ]
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        lines = [
            ' | '.join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
            for r in [head] + body
        ]
        lines.insert(1, '-+-'.join('-' * w for w in widths))
        footer = f'run {self.run_id} ({self.workflow})'
        if self.result:
            footer += f': {self.result}'
        return '\n'.join(lines + [footer] + [f'warning: {w}' for w in self.warnings])


def _clock(stamp: Optional[str]) -> str:
    if not stamp:
        return '-'
    return datetime.fromisoformat(stamp).strftime('%Y-%m-%d %H:%M:%S')


def status_snapshot(run_id: str, journal: RunJournal) -> StatusTable:
    """
    Status snapshot

    Summarize a run with one row per job. A job's state is the worst state of
    its tasks (Failed, Blocked, Running, Ready, Pending, Skipped, Finished in
    that order), a job without any task yet is Pending, and its iteration is
    that of its most recently journaled task. The table depends on nothing but
    the journal.

    :raises UnknownRun: ``run_id`` is not the run of this journal
    """
    header = journal.header
    if header['run_id'] != run_id:
        raise UnknownRun(f"journal at {journal.path} belongs to run '{header['run_id']}'")

    by_job: Dict[str, List[TaskRecord]] = {}
    for x in journal.tasks():
        by_job.setdefault(x.job, []).append(x)

    rows = []
    for name in header['jobs']:
        tasks = by_job.get(name, [])
        counts = {s.value: sum(1 for x in tasks if x.state is s) for s in State}
        if tasks:
            state = min((x.state for x in tasks), key=SEVERITY.index)
            last = max(tasks, key=lambda x: x.seq)
            iteration = ','.join(str(i) for _, i in last.iteration) or '-'
            updated = last.at
        else:
            state, iteration, updated = State.PENDING, '-', None
        rows.append(StatusRow(
            name=name,
            state=state,
            iteration=iteration,
            finished=counts['Finished'] + counts['Skipped'],
            total=len(tasks),
            counts={k: v for k, v in counts.items() if v},
            updated=updated
        ))

    end = journal.ended
    result = None
    if end is not None:
        result = 'succeeded' if end['ok'] else f"failed at {end.get('failed_task') or end.get('message')}"
    return StatusTable(
        run_id=run_id,
        workflow=header['workflow'],
        rows=tuple(rows),
        result=result,
        warnings=tuple(x['message'] for x in journal.of_kind('warning'))
    )

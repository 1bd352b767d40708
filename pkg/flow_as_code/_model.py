"""
Workflow Model

A workflow is a directed graph of *jobs*. Each job holds exactly one
activities block (the external commands that do the work), an optional
initializer that configures those activities from input ports and literals,
and the ports through which artifacts enter and leave the job.

Two families of edges connect the graph:

#. **data flow** edges carry a generated artifact from an output port of one
   job to an input port of another job.
#. **process flow** edges control iteration. A *check* edge marks where the
   normal flow is interrupted so that an *iteration block* can decide whether
   another iteration is needed, and a *repeat* edge points at the job where the
   next iteration begins.

The objects in this module are immutable once parsed, and every function in
this module is a pure function of the model.
"""
import hashlib
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterator, List, Optional, Tuple, Union

import networkx as nx

from flow_as_code import _schema
from flow_as_code.exceptions import WorkflowSyntaxError

__all__ = [
    'WorkflowModel', 'Job', 'ActivitiesBlock', 'ActivityRef', 'Initializer',
    'BindingSource', 'BindingKind', 'Port', 'Direction', 'DataFlowEdge',
    'IterationBlock', 'CheckEdge', 'RepeatEdge', 'Loop', 'Violation',
    'ValidationReport', 'parse_workflow', 'load_workflow', 'dump_workflow',
    'validate', 'core_graph', 'loop_structure', 'loop_chain', 'downstream_of',
    'DEFAULT_MAX_ITERATIONS'
]

log = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 1000


class Direction(Enum):
    INPUT = 'input'
    OUTPUT = 'output'


class BindingKind(Enum):
    PORT = 'port'
    LITERAL = 'literal'


@dataclass(frozen=True)
class Port:
    name: str
    direction: Direction


@dataclass(frozen=True)
class ActivityRef:
    """
    Activity reference

    An external command together with the configuration document it will be
    given. When ``campaign`` is present, the activity is executed once per
    scenario document.
    """
    name: str
    command: Tuple[str, ...]
    config: dict = field(default_factory=dict)
    campaign: Optional[Tuple[dict, ...]] = None

    def to_dict(self) -> dict:
        d = {'name': self.name, 'command': list(self.command), 'config': self.config}
        if self.campaign is not None:
            d['campaign'] = list(self.campaign)
        return d


@dataclass(frozen=True)
class ActivitiesBlock:
    activities: Tuple[ActivityRef, ...]

    def __iter__(self) -> Iterator[ActivityRef]:
        return iter(self.activities)

    def __len__(self):
        return len(self.activities)


@dataclass(frozen=True)
class BindingSource:
    kind: BindingKind
    port_name: Optional[str] = None
    value: object = None

    def __post_init__(self):
        if self.kind is BindingKind.PORT and not self.port_name:
            raise ValueError('port binding requires a port name')
        if self.kind is BindingKind.LITERAL and self.port_name is not None:
            raise ValueError('literal binding cannot name a port')

    def to_dict(self) -> dict:
        if self.kind is BindingKind.PORT:
            return {'port': self.port_name}
        return {'literal': self.value}

    @classmethod
    def from_dict(cls, d: dict) -> 'BindingSource':
        if 'port' in d:
            return cls(BindingKind.PORT, port_name=d['port'])
        return cls(BindingKind.LITERAL, value=d['literal'])


@dataclass(frozen=True)
class Initializer:
    bindings: Dict[str, BindingSource]


@dataclass(frozen=True)
class Job:
    name: str
    activities: ActivitiesBlock
    initializer: Optional[Initializer] = None
    input_ports: Tuple[Port, ...] = ()
    output_ports: Tuple[Port, ...] = ()

    @property
    def inputs(self) -> List[str]:
        return [x.name for x in self.input_ports]

    @property
    def outputs(self) -> List[str]:
        return [x.name for x in self.output_ports]

    def activity(self, name: str) -> Optional[ActivityRef]:
        return next((x for x in self.activities if x.name == name), None)

    def to_dict(self) -> dict:
        d = {
            'name': self.name,
            'activities': [x.to_dict() for x in self.activities]
        }
        if self.initializer is not None:
            d['initializer'] = {
                k: v.to_dict() for k, v in self.initializer.bindings.items()
            }
        d['inputs'] = self.inputs
        d['outputs'] = self.outputs
        return d

    @classmethod
    def from_dict(cls, d: dict) -> 'Job':
        init = d.get('initializer')
        return cls(
            name=d['name'],
            activities=ActivitiesBlock(tuple(
                ActivityRef(
                    name=a['name'],
                    command=tuple(a['command']),
                    config=a.get('config', {}),
                    campaign=tuple(a['campaign']) if 'campaign' in a else None
                )
                for a in d['activities']
            )),
            initializer=Initializer({
                k: BindingSource.from_dict(v) for k, v in init.items()
            }) if init is not None else None,
            input_ports=tuple(Port(x, Direction.INPUT) for x in d.get('inputs', [])),
            output_ports=tuple(Port(x, Direction.OUTPUT) for x in d.get('outputs', []))
        )


@dataclass(frozen=True)
class DataFlowEdge:
    source: Tuple[str, str]
    """(job name, output port name)"""
    target: Tuple[str, str]
    """(job name, input port name)"""

    def to_dict(self) -> dict:
        return {'from': '.'.join(self.source), 'to': '.'.join(self.target)}


@dataclass(frozen=True)
class IterationBlock:
    name: str
    decision_command: Tuple[str, ...]
    max_iterations: int = DEFAULT_MAX_ITERATIONS

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'decision_command': list(self.decision_command),
            'max_iterations': self.max_iterations
        }


@dataclass(frozen=True)
class CheckEdge:
    source: str
    """job name"""
    target: str
    """iteration block name"""


@dataclass(frozen=True)
class RepeatEdge:
    source: str
    """iteration block name"""
    target: str
    """job name"""


@dataclass(frozen=True)
class Loop:
    """
    Loop

    Structure derived from an iteration block. The body is every job that lies
    on a data-flow path from the repeat target to the check source, both
    endpoints included.
    """
    block: str
    body: FrozenSet[str]
    parent: Optional[str]
    repeat_target: str
    check_source: str
    depth: int = 0


@dataclass(frozen=True)
class WorkflowModel:
    name: str
    jobs: Tuple[Job, ...] = ()
    data_flow_edges: Tuple[DataFlowEdge, ...] = ()
    check_edges: Tuple[CheckEdge, ...] = ()
    repeat_edges: Tuple[RepeatEdge, ...] = ()
    iteration_blocks: Tuple[IterationBlock, ...] = ()

    def job(self, name: str) -> Optional[Job]:
        return next((x for x in self.jobs if x.name == name), None)

    def block(self, name: str) -> Optional[IterationBlock]:
        return next((x for x in self.iteration_blocks if x.name == name), None)

    def to_dict(self) -> dict:
        """
        Render model to dictionary

        The output follows the workflow definition schema, so that
        ``WorkflowModel.from_dict(m.to_dict()) == m``.
        """
        return {
            'name': self.name,
            'jobs': [x.to_dict() for x in self.jobs],
            'data_flow': [x.to_dict() for x in self.data_flow_edges],
            'iteration_blocks': [x.to_dict() for x in self.iteration_blocks],
            'check_edges': [{'from': x.source, 'to': x.target} for x in self.check_edges],
            'repeat_edges': [{'from': x.source, 'to': x.target} for x in self.repeat_edges]
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'WorkflowModel':
        _schema.validate(d, _schema.WORKFLOW)
        return cls(
            name=d['name'],
            jobs=tuple(Job.from_dict(x) for x in d['jobs']),
            data_flow_edges=tuple(
                DataFlowEdge(
                    tuple(x['from'].split('.', 1)), tuple(x['to'].split('.', 1))
                )
                for x in d.get('data_flow', [])
            ),
            check_edges=tuple(
                CheckEdge(x['from'], x['to']) for x in d.get('check_edges', [])
            ),
            repeat_edges=tuple(
                RepeatEdge(x['from'], x['to']) for x in d.get('repeat_edges', [])
            ),
            iteration_blocks=tuple(
                IterationBlock(
                    name=x['name'],
                    decision_command=tuple(x['decision_command']),
                    max_iterations=x.get('max_iterations', DEFAULT_MAX_ITERATIONS)
                )
                for x in d.get('iteration_blocks', [])
            )
        )

    def fingerprint(self) -> str:
        doc = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(doc.encode('utf8')).hexdigest()


def parse_workflow(document: Union[str, bytes]) -> WorkflowModel:
    """
    Parse workflow definition

    Read the structured text of a workflow definition into a model. Only the
    syntax and the schema are checked here; use :func:`validate` to learn
    whether the model is executable.

    :param document: UTF-8 text of the workflow definition
    :raises WorkflowSyntaxError: the text is not a well-formed document
    :raises WorkflowSchemaError: a required field is missing, or a value has
        the wrong kind
    """
    if isinstance(document, bytes):
        document = document.decode('utf8')
    try:
        d = json.loads(document)
    except json.JSONDecodeError as e:
        raise WorkflowSyntaxError(e.msg, e.lineno, e.colno) from e
    return WorkflowModel.from_dict(d)


def load_workflow(path: Union[str, Path]) -> WorkflowModel:
    return parse_workflow(Path(path).read_bytes())


def dump_workflow(model: WorkflowModel) -> str:
    return json.dumps(model.to_dict(), indent=2)


@dataclass(frozen=True)
class Violation:
    rule: str
    path: str
    message: str

    def __str__(self):
        return f'{self.rule} {self.path}: {self.message}'


class ValidationReport:
    """Violations found by :func:`validate`; an empty report means executable"""

    def __init__(self, violations: List[Violation] = None):
        self.violations = list(violations or [])

    def add(self, rule: str, path: str, message: str):
        log.debug(f'{rule} {path}: {message}')
        self.violations.append(Violation(rule, path, message))

    @property
    def ok(self) -> bool:
        return not self.violations

    def __iter__(self) -> Iterator[Violation]:
        return iter(self.violations)

    def __len__(self):
        return len(self.violations)

    def __bool__(self):
        return bool(self.violations)


def _job_graph(model: WorkflowModel) -> nx.DiGraph:
    """Job-level data-flow graph, restricted to edges between known jobs"""
    g = nx.DiGraph()
    g.add_nodes_from(x.name for x in model.jobs)
    for e in model.data_flow_edges:
        if e.source[0] in g and e.target[0] in g:
            g.add_edge(e.source[0], e.target[0])
    return g


def _body(g: nx.DiGraph, repeat_target: str, check_source: str) -> FrozenSet[str]:
    after = nx.descendants(g, repeat_target) | {repeat_target}
    before = nx.ancestors(g, check_source) | {check_source}
    return frozenset(after & before)


def _duplicates(names: List[str]) -> List[str]:
    return [k for k, v in Counter(names).items() if v > 1]


def validate(model: WorkflowModel) -> ValidationReport:
    """
    Validate workflow model

    Check every well-formedness rule of the workflow language and collect the
    violations. Violations are data: this function does not raise.

    Rules reported: ``EMPTY_WORKFLOW``, ``EMPTY_ACTIVITIES``,
    ``DUPLICATE_NAME``, ``MISSING_REF``, ``EDGE_DIRECTION``, ``INPUT_FANIN``,
    ``CORE_CYCLE``, ``BLOCK_DEGREE``, ``LOOP_BODY_EMPTY``, ``LOOP_OVERLAP``
    and ``CAMPAIGN_KEY``.
    """
    r = ValidationReport()
    if not model.jobs:
        r.add('EMPTY_WORKFLOW', 'jobs', 'workflow contains no jobs')

    job_names = [x.name for x in model.jobs]
    block_names = [x.name for x in model.iteration_blocks]
    for x in _duplicates(job_names):
        r.add('DUPLICATE_NAME', f'jobs[{x}]', f"job name '{x}' is declared more than once")
    for x in _duplicates(block_names):
        r.add('DUPLICATE_NAME', f'iteration_blocks[{x}]',
              f"iteration block name '{x}' is declared more than once")
    for x in sorted(set(job_names) & set(block_names)):
        r.add('DUPLICATE_NAME', f'iteration_blocks[{x}]',
              f"'{x}' names both a job and an iteration block")

    jobs = {x.name: x for x in model.jobs}
    blocks = {x.name: x for x in model.iteration_blocks}

    for job in model.jobs:
        p = f'jobs[{job.name}]'
        if not len(job.activities):
            r.add('EMPTY_ACTIVITIES', f'{p}.activities', 'activities block is empty')
        for x in _duplicates([a.name for a in job.activities]):
            r.add('DUPLICATE_NAME', f'{p}.activities[{x}]', f"activity '{x}' is declared more than once")
        for a in job.activities:
            if a.campaign and 'scenario' in a.config:
                r.add('CAMPAIGN_KEY', f'{p}.activities[{a.name}].config.scenario',
                      "config key 'scenario' is taken by the campaign's scenario document")
        for x in _duplicates(job.inputs):
            r.add('DUPLICATE_NAME', f'{p}.inputs[{x}]', f"input port '{x}' is declared more than once")
        for x in _duplicates(job.outputs):
            r.add('DUPLICATE_NAME', f'{p}.outputs[{x}]', f"output port '{x}' is declared more than once")
        if job.initializer is not None:
            for k, v in job.initializer.bindings.items():
                if v.kind is BindingKind.PORT and v.port_name not in job.inputs:
                    r.add('MISSING_REF', f'{p}.initializer[{k}]',
                          f"binding references unknown input port '{v.port_name}'")

    feeds = defaultdict(int)
    for i, e in enumerate(model.data_flow_edges):
        p = f'data_flow[{i}]'
        valid = True
        for (jn, port), direction in ((e.source, Direction.OUTPUT), (e.target, Direction.INPUT)):
            job = jobs.get(jn)
            if job is None:
                r.add('MISSING_REF', p, f"unknown job '{jn}'")
                valid = False
                continue
            same, other = (job.outputs, job.inputs) if direction is Direction.OUTPUT \
                else (job.inputs, job.outputs)
            if port in same:
                continue
            valid = False
            if port in other:
                r.add('EDGE_DIRECTION', p, f"'{jn}.{port}' is not an {direction.value} port")
            else:
                r.add('MISSING_REF', p, f"unknown port '{jn}.{port}'")
        if e.source[0] == e.target[0]:
            r.add('CORE_CYCLE', p, f"data flow from job '{e.source[0]}' to itself")
        elif valid:
            feeds[e.target] += 1

    for job in model.jobs:
        for port in set(job.inputs):
            n = feeds[(job.name, port)]
            if n == 0:
                r.add('MISSING_REF', f'jobs[{job.name}].inputs[{port}]',
                      'input port is not fed by any data flow edge')
            elif n > 1:
                r.add('INPUT_FANIN', f'jobs[{job.name}].inputs[{port}]',
                      f'input port is fed by {n} data flow edges')

    for i, e in enumerate(model.check_edges):
        if e.source not in jobs:
            r.add('MISSING_REF', f'check_edges[{i}]', f"unknown job '{e.source}'")
        if e.target not in blocks:
            r.add('MISSING_REF', f'check_edges[{i}]', f"unknown iteration block '{e.target}'")
    for i, e in enumerate(model.repeat_edges):
        if e.source not in blocks:
            r.add('MISSING_REF', f'repeat_edges[{i}]', f"unknown iteration block '{e.source}'")
        if e.target not in jobs:
            r.add('MISSING_REF', f'repeat_edges[{i}]', f"unknown job '{e.target}'")

    g = _job_graph(model)
    g.remove_edges_from(list(nx.selfloop_edges(g)))
    acyclic = True
    for scc in nx.strongly_connected_components(g):
        if len(scc) > 1:
            acyclic = False
            members = ','.join(sorted(scc))
            r.add('CORE_CYCLE', f'jobs[{members}]', 'data flow edges form a cycle')

    bodies = {}
    for block in model.iteration_blocks:
        p = f'iteration_blocks[{block.name}]'
        checks = [x for x in model.check_edges if x.target == block.name]
        repeats = [x for x in model.repeat_edges if x.source == block.name]
        if len(checks) != 1 or len(repeats) != 1:
            r.add('BLOCK_DEGREE', p,
                  f'expected 1 check edge and 1 repeat edge, found '
                  f'{len(checks)} and {len(repeats)}')
            continue
        source, target = checks[0].source, repeats[0].target
        if not acyclic or source not in jobs or target not in jobs:
            continue
        body = _body(g, target, source)
        if not body:
            r.add('LOOP_BODY_EMPTY', p,
                  f"repeat target '{target}' does not reach check source '{source}'")
        else:
            bodies[block.name] = body

    names = sorted(bodies)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            x, y = bodies[a], bodies[b]
            if x == y:
                r.add('LOOP_OVERLAP', f'iteration_blocks[{b}]',
                      f"loop body is identical to the body of '{a}'")
            elif x & y and not (x < y or y < x):
                r.add('LOOP_OVERLAP', f'iteration_blocks[{b}]',
                      f"loop body partially overlaps the body of '{a}'")

    return r


def loop_structure(model: WorkflowModel) -> List[Loop]:
    """
    Loop structure

    Derive one :class:`Loop` per iteration block, with the nesting parent of
    each loop set to the smallest loop whose body strictly contains it. The
    list is ordered so that every parent precedes its children.

    The model must have passed :func:`validate`.
    """
    g = _job_graph(model)
    raw = {}
    for block in model.iteration_blocks:
        source = next(x.source for x in model.check_edges if x.target == block.name)
        target = next(x.target for x in model.repeat_edges if x.source == block.name)
        raw[block.name] = (_body(g, target, source), target, source)

    loops = {}
    for name, (body, target, source) in raw.items():
        parents = [k for k, v in raw.items() if k != name and body < v[0]]
        parent = min(parents, key=lambda k: len(raw[k][0])) if parents else None
        loops[name] = (body, parent, target, source)

    def depth(n):
        p = loops[n][1]
        return 0 if p is None else depth(p) + 1

    order = [x.name for x in model.iteration_blocks]
    return [
        Loop(
            block=k, body=loops[k][0], parent=loops[k][1],
            repeat_target=loops[k][2], check_source=loops[k][3], depth=depth(k)
        )
        for k in sorted(loops, key=lambda k: (depth(k), order.index(k)))
    ]


def loop_chain(loops: List[Loop], job: str) -> List[Loop]:
    """Loops enclosing ``job``, outermost first"""
    return sorted([x for x in loops if job in x.body], key=lambda x: x.depth)


def downstream_of(model: WorkflowModel, loop: Loop) -> FrozenSet[str]:
    """Jobs outside the loop body that consume, directly or not, its results"""
    g = _job_graph(model)
    reach = set()
    for x in loop.body:
        reach |= nx.descendants(g, x)
    return frozenset(reach - loop.body)


def core_graph(model: WorkflowModel) -> nx.DiGraph:
    """
    Core dependency graph

    The job-level dependency graph with every repeat edge removed. Jobs and
    iteration blocks are both nodes (node attribute ``kind``). Edges are the
    data flow between jobs (``kind='data'``), the check edges from a check
    source to its block (``kind='check'``), and an ordering edge from each
    block to the first jobs outside its loop body that consume the loop's
    results (``kind='release'``). The graph is acyclic for every valid model.
    """
    g = nx.DiGraph()
    for job in model.jobs:
        g.add_node(job.name, kind='job')
    for block in model.iteration_blocks:
        g.add_node(block.name, kind='block')
    for e in model.data_flow_edges:
        if g.has_edge(e.source[0], e.target[0]):
            g.edges[e.source[0], e.target[0]]['ports'].append((e.source[1], e.target[1]))
        else:
            g.add_edge(e.source[0], e.target[0], kind='data', ports=[(e.source[1], e.target[1])])
    for e in model.check_edges:
        g.add_edge(e.source, e.target, kind='check')

    data = _job_graph(model)
    for loop in loop_structure(model):
        for x in loop.body:
            for y in data.successors(x):
                if y not in loop.body:
                    g.add_edge(loop.block, y, kind='release')
    return g

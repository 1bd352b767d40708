"""
Task planning

The executor only understands acyclic task graphs, so every iteration of a
loop is lowered to its own :class:`TaskPlan`. The plan for a loop iteration
covers the loop body; the jobs which consume the results of a loop are held
back until that loop stops, and are then planned as a *release* of the loop.

Planning is a pure function of the model and the :class:`LoopState`.
"""
import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

import networkx as nx

from flow_as_code import _schema
from flow_as_code._model import (
    ActivityRef, Loop, WorkflowModel, downstream_of, loop_chain
)
from flow_as_code.exceptions import BadPatch, PlanCycle, PlanError, UnknownLoop

__all__ = [
    'ParameterUpdate', 'LoopState', 'TaskNode', 'DecisionPoint', 'TaskPlan',
    'build_iteration_plan', 'topological_schedule', 'emit_plan_document',
    'plan_from_document', 'task_id', 'set_path', 'format_iteration'
]

log = logging.getLogger(__name__)

Iteration = Tuple[Tuple[str, int], ...]


@dataclass(frozen=True)
class ParameterUpdate:
    job: str
    activity: str
    path: str
    value: object
    source: Optional[str] = field(default=None, compare=False)
    """iteration block whose decision returned the update"""

    def to_dict(self) -> dict:
        return {'job': self.job, 'activity': self.activity, 'path': self.path, 'value': self.value}

    @classmethod
    def from_dict(cls, d: dict) -> 'ParameterUpdate':
        return cls(d['job'], d['activity'], d['path'], d['value'])


@dataclass(frozen=True)
class LoopState:
    """
    Loop state

    Information carried forward from one iteration to the next: the current
    index of each loop that has been repeated (absent means 0), the parameter
    patches returned by decision commands so far, the persisted document of
    each loop, and the loops which have stopped in the current pass of their
    enclosing loop. When a loop repeats, the loops nested in it start over:
    their indices, persisted documents and the patches their own decisions
    made are dropped.
    """
    indices: Dict[str, int] = field(default_factory=dict)
    parameter_patches: Tuple[ParameterUpdate, ...] = ()
    persisted: Dict[str, dict] = field(default_factory=dict)
    stopped: FrozenSet[str] = frozenset()

    def index(self, loop: str) -> int:
        return self.indices.get(loop, 0)

    def iteration(self, loops: Iterable[Loop]) -> Iteration:
        return tuple((x.block, self.index(x.block)) for x in loops)

    def repeat(self, loop: Loop, nested: Iterable[str]) -> 'LoopState':
        """Advance ``loop`` by one; nested loops start over at index 0"""
        nested = set(nested)
        indices = {k: v for k, v in self.indices.items() if k not in nested}
        indices[loop.block] = self.index(loop.block) + 1
        return replace(
            self,
            indices=indices,
            parameter_patches=tuple(x for x in self.parameter_patches if x.source not in nested),
            persisted={k: v for k, v in self.persisted.items() if k not in nested},
            stopped=frozenset(self.stopped - nested)
        )

    def stop(self, loop: Loop) -> 'LoopState':
        return replace(self, stopped=self.stopped | {loop.block})

    def config_for(self, job: str, activity: ActivityRef) -> dict:
        """Activity config with every matching patch applied, last writer wins"""
        config = copy.deepcopy(activity.config)
        for p in self.parameter_patches:
            if p.job == job and p.activity == activity.name:
                set_path(config, p.path, copy.deepcopy(p.value))
        return config


def set_path(doc: dict, path: str, value):
    """
    Set a value inside a config document by dot-separated key path.

    Every key of the path must already exist; numeric keys index into lists.

    :raises BadPatch: the path does not resolve in the document
    """
    keys = path.split('.')
    node = doc
    for i, k in enumerate(keys):
        last = i == len(keys) - 1
        if isinstance(node, dict) and k in node:
            if last:
                node[k] = value
            else:
                node = node[k]
        elif isinstance(node, list) and k.isdigit() and int(k) < len(node):
            if last:
                node[int(k)] = value
            else:
                node = node[int(k)]
        else:
            raise BadPatch(f"config path '{path}' does not match any key ('{k}' missing)")


def format_iteration(iteration: Iteration) -> str:
    return ','.join(str(i) for _, i in iteration)


def task_id(job: str, activity: str, scenario: Optional[int], iteration: Iteration) -> str:
    """``Job.activity``, then ``#scenario`` for campaigns, then ``@i,j`` for loops"""
    x = f'{job}.{activity}'
    if scenario is not None:
        x += f'#{scenario}'
    if iteration:
        x += '@' + format_iteration(iteration)
    return x


@dataclass(frozen=True)
class TaskNode:
    id: str
    job: str
    activity: ActivityRef
    """snapshot of the activity after parameter patches, campaign expanded"""
    depends_on: FrozenSet[str] = frozenset()
    input_bindings: Dict[str, dict] = field(default_factory=dict)
    """config path mapped to ``{"port": name}`` or ``{"literal": value}``"""
    inputs: Dict[str, str] = field(default_factory=dict)
    """input port mapped to the ``Job.port`` that feeds it"""
    outputs: Tuple[str, ...] = ()
    iteration: Iteration = ()
    scenario: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            'id': self.id,
            'job': self.job,
            'activity': self.activity.name,
            'scenario': self.scenario,
            'iteration': [list(x) for x in self.iteration],
            'command': list(self.activity.command),
            'config': self.activity.config,
            'depends_on': sorted(self.depends_on),
            'inputs': {k: self.inputs[k] for k in sorted(self.inputs)},
            'outputs': list(self.outputs),
            'input_bindings': {k: self.input_bindings[k] for k in sorted(self.input_bindings)}
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'TaskNode':
        return cls(
            id=d['id'],
            job=d['job'],
            activity=ActivityRef(d['activity'], tuple(d['command']), d['config']),
            depends_on=frozenset(d['depends_on']),
            input_bindings=d.get('input_bindings', {}),
            inputs=d.get('inputs', {}),
            outputs=tuple(d.get('outputs', [])),
            iteration=tuple((k, i) for k, i in d.get('iteration', [])),
            scenario=d.get('scenario')
        )


@dataclass(frozen=True)
class DecisionPoint:
    block: str
    after: FrozenSet[str] = frozenset()


@dataclass(frozen=True)
class TaskPlan:
    """
    Task plan

    The acyclic, fully expanded task graph for one iteration. Nodes are kept
    in id order, so plans built from the same inputs compare equal no matter
    the order in which their nodes were produced.

    :raises PlanError: a dependency refers to a node outside the plan
    :raises PlanCycle: the node graph has a cycle
    """
    run_id: str
    iteration: Iteration
    nodes: Tuple[TaskNode, ...]
    decision_points: Tuple[DecisionPoint, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'nodes', tuple(sorted(self.nodes, key=lambda x: x.id)))
        object.__setattr__(
            self, 'decision_points', tuple(sorted(self.decision_points, key=lambda x: x.block))
        )
        ids = [x.id for x in self.nodes]
        if len(set(ids)) != len(ids):
            raise PlanError('task ids in a plan must be unique')
        for x in self.nodes:
            missing = x.depends_on - set(ids)
            if missing:
                raise PlanError(f"task '{x.id}' depends on unknown tasks {sorted(missing)}")
        if not nx.is_directed_acyclic_graph(self.graph()):
            raise PlanCycle('task plan contains a dependency cycle')

    def graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        for x in self.nodes:
            g.add_node(x.id)
            for d in x.depends_on:
                g.add_edge(d, x.id)
        return g

    def node(self, node_id: str) -> TaskNode:
        return next(x for x in self.nodes if x.id == node_id)

    @property
    def jobs(self) -> FrozenSet[str]:
        return frozenset(x.job for x in self.nodes)


def _held(model: WorkflowModel, loops: List[Loop], region: FrozenSet[str],
          owner: Optional[str], stopped: FrozenSet[str]) -> FrozenSet[str]:
    """Jobs of the region that wait on a loop nested in it which has not stopped"""
    held = set()
    for x in loops:
        if x.block == owner or x.block in stopped or not x.body <= region:
            continue
        held |= downstream_of(model, x)
    return frozenset(held & region)


def _due(loop: Loop, loops: List[Loop], stopped: FrozenSet[str]) -> bool:
    """A decision is due once every loop nested in it which re-runs its check source has stopped"""
    return all(
        x.block in stopped for x in loops
        if loop.check_source in x.body and x.body < loop.body
    )


def _region(model: WorkflowModel, loop: Optional[Loop]) -> FrozenSet[str]:
    return loop.body if loop else frozenset(x.name for x in model.jobs)


def _within(x: Loop, owner: Optional[Loop]) -> bool:
    return owner is None or x.block == owner.block or x.body < owner.body


def build_iteration_plan(
        model: WorkflowModel, loops: List[Loop], state: LoopState,
        scope: str = None, released: str = None, run_id: str = ''
) -> TaskPlan:
    """
    Build iteration plan

    Lower one iteration of the workflow into an acyclic task plan.

    :param model: a valid workflow model
    :param loops: the loop forest of the model, see :func:`loop_structure`
    :param state: loop indices, accumulated parameter patches and stopped loops
    :param scope: (optional) when absent, the plan covers the first iteration
        of the whole workflow. When it names loop L, the plan covers exactly the
        body of L at its current index, with nested loops starting at index 0.
    :param released: (optional) name of a loop that has just stopped. The plan
        then covers the jobs of the enclosing region that were held back by
        that loop alone.
    :param run_id: identifier of the run the plan belongs to
    :raises UnknownLoop: ``scope`` or ``released`` does not name a loop
    :raises BadPatch: a parameter patch does not match any config key
    """
    by_name = {x.block: x for x in loops}
    for x in (scope, released):
        if x is not None and x not in by_name:
            raise UnknownLoop(f"'{x}' does not name a loop of workflow '{model.name}'")

    stopped = state.stopped
    if released is not None:
        loop = by_name[released]
        owner = by_name.get(loop.parent)
        region = _region(model, owner)
        before = stopped - {released}
        stopped = stopped | {released}
        jobs = (region - _held(model, loops, region, loop.parent, stopped)) \
            - (region - _held(model, loops, region, loop.parent, before))
        candidates = set(jobs) | loop.body
    else:
        owner = by_name.get(scope)
        if owner is not None and state.index(scope) < 1:
            raise PlanError(f"loop '{scope}' must be at index 1 or later to be planned alone")
        region = _region(model, owner)
        jobs = region - _held(model, loops, region, scope, stopped)
        before = None
        candidates = set(jobs)

    iteration = state.iteration(
        [by_name[x] for x in _ancestry(by_name, owner.block)] if owner else []
    )

    nodes = []
    expanded: Dict[str, List[str]] = {}
    for job in model.jobs:
        if job.name not in jobs:
            continue
        vector = state.iteration(loop_chain(loops, job.name))
        sources = {e.target[1]: e.source for e in model.data_flow_edges if e.target[0] == job.name}
        bindings = {
            k: v.to_dict() for k, v in job.initializer.bindings.items()
        } if job.initializer else {}
        expanded[job.name] = []
        for activity in job.activities:
            config = state.config_for(job.name, activity)
            scenarios = list(enumerate(activity.campaign)) if activity.campaign else [(None, None)]
            for index, scenario in scenarios:
                c = copy.deepcopy(config)
                if scenario is not None:
                    c['scenario'] = copy.deepcopy(scenario)
                node_id = task_id(job.name, activity.name, index, vector)
                expanded[job.name].append(node_id)
                nodes.append(TaskNode(
                    id=node_id,
                    job=job.name,
                    activity=ActivityRef(activity.name, activity.command, c),
                    input_bindings=bindings,
                    inputs={k: '.'.join(v) for k, v in sources.items()},
                    outputs=tuple(job.outputs),
                    iteration=vector,
                    scenario=index
                ))

    nodes = [
        replace(x, depends_on=frozenset(
            d for e in model.data_flow_edges if e.target[0] == x.job
            for d in expanded.get(e.source[0], [])
        ))
        for x in nodes
    ]

    points = []
    for x in loops:
        if x.block in stopped or not _within(x, owner) or x.check_source not in candidates:
            continue
        if not _due(x, loops, stopped):
            continue
        if released is not None:
            if x.block == released or (x.check_source not in jobs and _due(x, loops, before)):
                continue
        points.append(DecisionPoint(x.block, frozenset(expanded.get(x.check_source, []))))

    plan = TaskPlan(run_id, iteration, tuple(nodes), tuple(points))
    log.debug(
        f"planned {len(plan.nodes)} tasks for "
        f"{'release of ' + released if released else scope or 'workflow'} "
        f"at iteration [{format_iteration(iteration)}]"
    )
    return plan


def _ancestry(by_name: Dict[str, Loop], block: str) -> List[str]:
    chain = []
    while block is not None:
        chain.insert(0, block)
        block = by_name[block].parent
    return chain


def topological_schedule(plan: TaskPlan) -> List[FrozenSet[str]]:
    """
    Layered schedule

    Every node appears in exactly one layer, each node's dependencies lie in
    earlier layers, and nodes of one layer are mutually independent.
    """
    try:
        return [frozenset(x) for x in nx.topological_generations(plan.graph())]
    except nx.NetworkXUnfeasible as e:
        raise PlanCycle('task plan contains a dependency cycle') from e


def emit_plan_document(plan: TaskPlan) -> dict:
    """
    Plan document

    Deterministic rendering of a plan: nodes ordered by id, decision points by
    block name, and list-valued sets sorted.
    """
    return {
        'run_id': plan.run_id,
        'iteration': [list(x) for x in plan.iteration],
        'nodes': [x.to_dict() for x in plan.nodes],
        'decision_points': [
            {'block': x.block, 'after': sorted(x.after)}
            for x in sorted(plan.decision_points, key=lambda p: p.block)
        ]
    }


def plan_from_document(doc: dict) -> TaskPlan:
    _schema.validate(doc, _schema.PLAN, error=lambda m, p: PlanError(f'{p}: {m}'))
    points = {x['block']: x for x in doc['decision_points']}
    return TaskPlan(
        run_id=doc['run_id'],
        iteration=tuple((k, i) for k, i in doc['iteration']),
        nodes=tuple(TaskNode.from_dict(x) for x in doc['nodes']),
        decision_points=tuple(
            DecisionPoint(k, frozenset(v['after'])) for k, v in sorted(points.items())
        )
    )

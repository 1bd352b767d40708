from flow_as_code import premade
from flow_as_code._config import CliConfig
from flow_as_code._driver import (
    Action, DecisionRequest, DecisionResponse, RunResult, apply_parameter_updates,
    assemble_decision_context, invoke_decision, resume, run_workflow
)
from flow_as_code._executor import PlanResult, execute_plan, execute_task, fingerprint, up_to_date
from flow_as_code._journal import RunJournal, State, StatusTable, TaskRecord, TaskStatus, status_snapshot
from flow_as_code._model import (
    Loop, ValidationReport, WorkflowModel, core_graph, dump_workflow, load_workflow,
    loop_structure, parse_workflow, validate
)
from flow_as_code._planner import (
    LoopState, ParameterUpdate, TaskNode, TaskPlan, build_iteration_plan,
    emit_plan_document, plan_from_document, topological_schedule
)
from flow_as_code._store import ArtifactStore, resolve_port

__all__ = [
    'WorkflowModel', 'ValidationReport', 'Loop', 'parse_workflow', 'load_workflow',
    'dump_workflow', 'validate', 'core_graph', 'loop_structure',
    'LoopState', 'ParameterUpdate', 'TaskNode', 'TaskPlan', 'build_iteration_plan',
    'topological_schedule', 'emit_plan_document', 'plan_from_document',
    'ArtifactStore', 'resolve_port',
    'RunJournal', 'State', 'StatusTable', 'TaskRecord', 'TaskStatus', 'status_snapshot',
    'PlanResult', 'execute_plan', 'execute_task', 'fingerprint', 'up_to_date',
    'Action', 'DecisionRequest', 'DecisionResponse', 'RunResult', 'run_workflow',
    'resume', 'assemble_decision_context', 'invoke_decision', 'apply_parameter_updates',
    'CliConfig'
]

__version__ = '0.1.0'

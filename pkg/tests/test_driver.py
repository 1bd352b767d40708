import json
import os
import time
from dataclasses import replace
from pathlib import Path

import pytest

from flow_as_code._driver import (
    Action, DecisionRequest, DecisionResponse, apply_parameter_updates, assemble_decision_context,
    invoke_decision, resume, run_workflow
)
from flow_as_code._journal import RunJournal, RunLock
from flow_as_code._model import WorkflowModel, loop_structure
from flow_as_code._planner import LoopState, ParameterUpdate
from flow_as_code._store import STALE_TMP
from flow_as_code.exceptions import (
    BadPatch, DecisionError, InvalidWorkflow, RunLocked, UnknownRun
)
from flow_as_code.premade import grid_cells
from tests.cases import GRID, chain, decide, example_2, spawns

TRAIN = 'SL_Model_Training.train'


def run(doc: dict, config, run_id='r1'):
    return run_workflow(WorkflowModel.from_dict(doc), config.store(), config, run_id=run_id)


def trained(tmpdir) -> list:
    return [x for x in spawns(Path(tmpdir, 'spawns.jsonl')) if x['name'] == TRAIN]


def requests(log: Path) -> list:
    return [json.loads(x) for x in log.read_text().splitlines()]


def test_grid_search_visits_every_cell(tmpdir, config):
    """The grid search trains once per cell, in row-major order"""
    result = run(example_2(tmpdir), config)
    assert result.ok
    runs = trained(tmpdir)
    assert len(runs) == 12
    seen = [{'optimizer': x['config']['optimizer'], 'epochs': x['config']['epochs']} for x in runs]
    assert seen == grid_cells(GRID)
    assert [x['iteration'] for x in runs] == [str(i) for i in range(12)]
    assert result.executed == tuple(f'{TRAIN}@{i}' for i in range(12))


def test_decisions_journaled(tmpdir, config):
    """Every decision is journaled with its index and action"""
    run(example_2(tmpdir), config)
    journal = RunJournal.open(config.runs, 'r1')
    decisions = list(journal.of_kind('decision'))
    assert [x['index'] for x in decisions] == list(range(12))
    assert [x['response']['action'] for x in decisions] == ['repeat'] * 11 + ['stop']
    assert journal.ended['ok'] is True


def test_immediate_stop(tmpdir, config):
    """A loop stopped by its first decision runs its body once"""
    result = run(example_2(tmpdir, decide('stop')), config)
    assert result.ok
    assert len(trained(tmpdir)) == 1


def test_max_iterations_forces_stop(tmpdir, config):
    """A loop that keeps repeating is stopped at max_iterations with a warning"""
    result = run(example_2(tmpdir, decide('repeat'), max_iterations=3), config)
    assert result.ok
    assert len(trained(tmpdir)) == 3
    journal = RunJournal.open(config.runs, 'r1')
    warnings = [x['message'] for x in journal.of_kind('warning')]
    assert any('max_iterations' in x for x in warnings)


def test_persist_carried_between_iterations(tmpdir, config):
    """The document persisted by one decision is handed to the next"""
    log = Path(tmpdir, 'requests.jsonl')
    result = run(example_2(tmpdir, decide('counter', '--n', 4, '--log', log)), config)
    assert result.ok
    seen = requests(log)
    assert [x['iteration'] for x in seen] == [0, 1, 2, 3]
    assert [x['persist'].get('count', 0) for x in seen] == [0, 1, 2, 3]
    assert len(trained(tmpdir)) == 4


def test_request_history(tmpdir, config):
    """Each request lists every finished training so far, with its outputs readable while the command runs"""
    log = Path(tmpdir, 'requests.jsonl')
    run(example_2(tmpdir, decide('counter', '--n', 3, '--log', log)), config)
    for k, request in enumerate(requests(log)):
        history = request['history']['SL_Model_Training']
        assert [x['iteration'] for x in history] == [[['HyperParameter_Search', i]] for i in range(k + 1)]
        latest = history[-1]
        assert Path(latest['outputs']['model']['path']).parents[2].name == 'decisions'
        assert json.loads(request['read'][latest['task']]['model'])['iteration'] == str(k)
        assert request['config']['SL_Model_Training']['train']['optimizer'] == 'SGD'
        assert request['workflow'] == 'SL_Example'


@pytest.mark.parametrize('mode', [['counter', '--n', 3], ['fail']])
def test_decision_folders_removed(tmpdir, config, mode):
    """The artifacts copied out for a decision are gone once it is made, whatever its outcome"""
    run(example_2(tmpdir, decide(*mode)), config)
    decisions = Path(config.runs, 'r1', 'decisions')
    assert not decisions.exists() or list(decisions.iterdir()) == []


def test_request_checked_against_schema(tmpdir, config):
    """A request that does not match the decision request schema is refused, leaving no folder behind"""
    model = WorkflowModel.from_dict(example_2(tmpdir))
    loop = loop_structure(model)[0]
    journal = RunJournal.create(config.runs, 'r1', {'workflow': model.name, 'fingerprint': '0', 'jobs': []})
    with pytest.raises(DecisionError) as e:
        assemble_decision_context(journal, config.store(), loop, ['not', 'a', 'document'], model, LoopState())
    assert e.value.code == 'DECISION_PROTOCOL_ERROR'
    assert not Path(journal.folder, 'decisions').exists()


def test_stale_staging_files_cleared(tmpdir, config):
    """A run starts by removing staging files left over from interrupted writes"""
    store = config.store()
    stale = Path(store.tmp, 'tmpstale')
    stale.write_bytes(b'partial')
    os.utime(stale, (time.time() - 2 * STALE_TMP,) * 2)
    fresh = Path(store.tmp, 'tmpfresh')
    fresh.write_bytes(b'in use')
    assert run(example_2(tmpdir, decide('stop')), config).ok
    assert not stale.exists()
    assert fresh.exists()


@pytest.mark.parametrize('mode, code', [
    (['fail'], 'DECISION_FAILED'),
    (['garbage'], 'DECISION_PROTOCOL_ERROR'),
    (['badpatch', '--job', 'SL_Model_Training', '--activity', 'train'], 'DECISION_BAD_PATCH'),
    (
        ['stopupdates', '--job', 'SL_Model_Training', '--activity', 'train', '--path', 'epochs'],
        'DECISION_PROTOCOL_ERROR'
    ),
])
def test_decision_errors_fail_the_run(tmpdir, config, mode, code):
    """A broken decision fails the run with its error code and no failed task"""
    result = run(example_2(tmpdir, decide(*mode)), config)
    assert not result.ok
    assert result.code == code
    assert result.failed_task is None
    journal = RunJournal.open(config.runs, 'r1')
    assert journal.ended['code'] == code


def test_decision_timeout(tmpdir, config):
    """A decision that runs too long fails the run"""
    config.decision_timeout = 0.5
    result = run(example_2(tmpdir, decide('sleep', '--n', 10)), config)
    assert not result.ok
    assert result.code == 'DECISION_TIMEOUT'


def test_invoke_decision_keeps_stderr(tmpdir, config):
    """The standard error of a decision command is kept in the store"""
    model = WorkflowModel.from_dict(example_2(tmpdir))
    block = model.block('HyperParameter_Search')
    request = DecisionRequest('SL_Example', block.name, 0)
    store = config.store()
    response = invoke_decision(block, request, store=store)
    assert response.action is Action.REPEAT
    assert b'cell 1 of 12' in store.get_artifact(response.log_ref)
    assert {x.path: x.value for x in response.parameter_updates} == {'optimizer': 'SGD', 'epochs': 4}


def test_invoke_decision_cannot_start(tmpdir):
    """A decision command that cannot be started fails"""
    model = WorkflowModel.from_dict(example_2(tmpdir))
    block = replace(model.block('HyperParameter_Search'), decision_command=(str(Path(tmpdir, 'nope')),))
    with pytest.raises(DecisionError) as e:
        invoke_decision(block, DecisionRequest('SL_Example', block.name, 0))
    assert e.value.code == 'DECISION_FAILED'


def test_response_checks():
    """Malformed responses are protocol errors"""
    update = {'job': 'J', 'activity': 'a', 'path': 'x', 'value': 1}
    assert DecisionResponse.from_dict({'action': 'stop'}).action is Action.STOP
    with pytest.raises(DecisionError):
        DecisionResponse.from_dict({'action': 'stop', 'parameter_updates': [update]})
    with pytest.raises(DecisionError):
        DecisionResponse.from_dict({'action': 'continue'})
    with pytest.raises(DecisionError):
        DecisionResponse.from_dict({'action': 'repeat', 'persist': {'x': 'y' * (1 << 20)}})


def test_apply_parameter_updates(tmpdir):
    """Updates are checked against the model and leave the old state untouched"""
    model = WorkflowModel.from_dict(example_2(tmpdir))
    activity = model.job('SL_Model_Training').activity('train')
    state = LoopState()
    assert apply_parameter_updates(state, [], model) is state

    updates = [
        ParameterUpdate('SL_Model_Training', 'train', 'epochs', 4),
        ParameterUpdate('SL_Model_Training', 'train', 'epochs', 6)
    ]
    patched = apply_parameter_updates(state, updates, model)
    assert patched.config_for('SL_Model_Training', activity)['epochs'] == 6
    assert state.config_for('SL_Model_Training', activity)['epochs'] == 2
    assert activity.config['epochs'] == 2


@pytest.mark.parametrize('update', [
    ParameterUpdate('Nobody', 'train', 'epochs', 1),
    ParameterUpdate('SL_Model_Training', 'fit', 'epochs', 1),
    ParameterUpdate('SL_Model_Training', 'train', 'epochs.inner', 1),
])
def test_bad_patch(tmpdir, update):
    """Updates naming an unknown job, activity or config path are refused"""
    model = WorkflowModel.from_dict(example_2(tmpdir))
    with pytest.raises(BadPatch):
        apply_parameter_updates(LoopState(), [update], model)


def test_invalid_workflow_not_run(tmpdir, config):
    """An invalid workflow is refused before a journal is created"""
    doc = chain(tmpdir, ['A', 'B'])
    doc['data_flow'] = []
    with pytest.raises(InvalidWorkflow):
        run(doc, config)
    assert not Path(config.runs, 'r1').exists()


def test_resume_after_failure(tmpdir, config):
    """Resume reruns the failed training and the rest of the grid, and nothing before it"""
    flag = Path(tmpdir, 'flag')
    doc = example_2(tmpdir, fail_once=str(flag), fail_at='7')
    first = run(doc, config)
    assert not first.ok
    assert first.failed_task == f'{TRAIN}@7'
    assert len(first.executed) == 8

    second = resume('r1', config.store(), config)
    assert second.ok
    assert second.executed == tuple(f'{TRAIN}@{i}' for i in range(7, 12))
    runs = trained(tmpdir)
    assert [x['exit'] for x in runs].count(3) == 1
    assert len(runs) == 13

    journal = RunJournal.open(config.runs, 'r1')
    assert journal.latest(f'{TRAIN}@7').attempt == 2
    assert [x['index'] for x in journal.of_kind('decision')] == list(range(12))


def test_resume_of_successful_run(tmpdir, config):
    """Resuming a finished run executes nothing"""
    run(example_2(tmpdir, decide('counter', '--n', 3)), config)
    again = resume('r1', config.store(), config)
    assert again.ok
    assert again.executed == ()
    assert len(trained(tmpdir)) == 3


def test_resume_with_corrected_workflow(tmpdir, config):
    """Resume with a corrected definition warns that the workflow changed"""
    doc = chain(tmpdir, ['A', 'B'], B={'exit': 5})
    assert not run(doc, config).ok
    fixed = WorkflowModel.from_dict(chain(tmpdir, ['A', 'B']))
    result = resume('r1', config.store(), config, model=fixed)
    assert result.ok
    assert result.executed == ('B.run',)
    journal = RunJournal.open(config.runs, 'r1')
    assert any('changed' in x['message'] for x in journal.of_kind('warning'))


def test_resume_unknown_run(config):
    """Resuming an unknown run raises"""
    with pytest.raises(UnknownRun):
        resume('nope', config.store(), config)


def test_resume_locked_run(tmpdir, config, mocker):
    """A run locked by a live process cannot be resumed"""
    run(chain(tmpdir, ['A'], A={'exit': 1}), config)
    Path(config.runs, 'r1', 'lock').write_text('1')
    mocker.patch.object(RunLock, '_alive', return_value=True)
    with pytest.raises(RunLocked):
        resume('r1', config.store(), config)


def test_loop_structure_of_grid(tmpdir):
    loops = loop_structure(WorkflowModel.from_dict(example_2(tmpdir)))
    assert [(x.block, sorted(x.body)) for x in loops] == [
        ('HyperParameter_Search', ['SL_Model_Training'])
    ]


def test_resume_repairs_torn_journal(tmpdir, config):
    """Resume drops a record left half written by a crashed engine"""
    run(chain(tmpdir, ['A', 'B'], B={'exit': 5}), config)
    path = Path(config.runs, 'r1', 'journal.jsonl')
    with path.open('a') as f:
        f.write('{"kind": "deci')
    fixed = WorkflowModel.from_dict(chain(tmpdir, ['A', 'B']))
    assert resume('r1', config.store(), config, model=fixed).ok
    journal = RunJournal.open(config.runs, 'r1')
    assert journal.torn is None
    assert journal.ended['ok'] is True


def test_updates_remember_their_loop(tmpdir):
    """Applied updates are tagged with the loop whose decision made them"""
    model = WorkflowModel.from_dict(example_2(tmpdir))
    update = ParameterUpdate('SL_Model_Training', 'train', 'epochs', 4)
    state = apply_parameter_updates(LoopState(), [update], model, source='HyperParameter_Search')
    assert [x.source for x in state.parameter_patches] == ['HyperParameter_Search']
    assert update.source is None

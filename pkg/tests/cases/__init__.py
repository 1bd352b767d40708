import copy
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

STUBS = Path(Path(__file__).parent, 'stubs')

GRID = {
    'optimizer': ['SGD', 'Adam', 'RMSprop'],
    'epochs': [2, 4, 6, 8]
}
SCENARIOS = [{'weather': 'clear'}, {'weather': 'rain'}, {'weather': 'fog'}]


def activity(name: str, spawn_log: Path = None, outputs: List[str] = (), **config) -> dict:
    """Activity running the stub tool, configured through its config document"""
    config = dict(config, name=name, outputs=list(outputs))
    if spawn_log is not None:
        config['spawn_log'] = str(spawn_log)
    return {
        'name': name.split('.')[-1],
        'command': [sys.executable, str(Path(STUBS, 'activity.py'))],
        'config': config
    }


def decide(mode: str, *args) -> List[str]:
    return [sys.executable, str(Path(STUBS, 'decide.py')), mode] + [str(x) for x in args]


def grid_decision(job: str, activity_name: str, grid: dict = None) -> List[str]:
    return [
        sys.executable, str(Path(STUBS, 'grid.py')), 'grid',
        '--job', job, '--activity', activity_name, '--grid', json.dumps(grid or GRID)
    ]


def spawns(log: Path) -> List[dict]:
    """Entries of a stub spawn log, in invocation order"""
    if not Path(log).is_file():
        return []
    return [json.loads(x) for x in Path(log).read_text().splitlines() if x]


def example_1(tmp: Path, campaign: List[dict] = None, **evaluate) -> dict:
    """Reinforcement learning, then an evaluation campaign of the trained LEC"""
    log = Path(tmp, 'spawns.jsonl')
    return {
        'name': 'RL_Example',
        'jobs': [
            {
                'name': 'RL_Exploration',
                'activities': [
                    activity('RL_Exploration.explore', log, ['lec'], episodes=10)
                ],
                'outputs': ['lec']
            },
            {
                'name': 'LEC_Evaluation',
                'activities': [
                    dict(
                        activity('LEC_Evaluation.evaluate', log, ['report'], **evaluate),
                        campaign=copy.deepcopy(campaign or SCENARIOS)
                    )
                ],
                'initializer': {
                    'model_path': {'port': 'lec'},
                    'metric': {'literal': 'safety'}
                },
                'inputs': ['lec'],
                'outputs': ['report']
            }
        ],
        'data_flow': [{'from': 'RL_Exploration.lec', 'to': 'LEC_Evaluation.lec'}]
    }


def example_2(tmp: Path, decision: List[str] = None, max_iterations: int = None, **train) -> dict:
    """Supervised training inside a hyperparameter grid search"""
    log = Path(tmp, 'spawns.jsonl')
    block = {
        'name': 'HyperParameter_Search',
        'decision_command': decision or grid_decision('SL_Model_Training', 'train')
    }
    if max_iterations:
        block['max_iterations'] = max_iterations
    return {
        'name': 'SL_Example',
        'jobs': [
            {
                'name': 'SL_Model_Training',
                'activities': [
                    activity(
                        'SL_Model_Training.train', log, ['model'],
                        **dict(dict(optimizer='SGD', epochs=2), **train)
                    )
                ],
                'outputs': ['model']
            }
        ],
        'iteration_blocks': [block],
        'check_edges': [{'from': 'SL_Model_Training', 'to': 'HyperParameter_Search'}],
        'repeat_edges': [{'from': 'HyperParameter_Search', 'to': 'SL_Model_Training'}]
    }


def example_3(tmp: Path, outer: int = 2, grid: dict = None) -> dict:
    """Data collection, a grid searched training loop, monitor training and
    evaluation, all repeated by an outer loop"""
    log = Path(tmp, 'spawns.jsonl')
    return {
        'name': 'AM_Example',
        'jobs': [
            {
                'name': 'Data_Collection',
                'activities': [activity('Data_Collection.collect', log, ['data'], round=0)],
                'outputs': ['data']
            },
            {
                'name': 'SL_Training',
                'activities': [
                    activity('SL_Training.train', log, ['model'], optimizer='SGD', epochs=2)
                ],
                'inputs': ['data'],
                'outputs': ['model']
            },
            {
                'name': 'AM_Training',
                'activities': [activity('AM_Training.train', log, ['monitor'])],
                'inputs': ['model', 'data'],
                'outputs': ['monitor']
            },
            {
                'name': 'LEC_Evaluation',
                'activities': [activity('LEC_Evaluation.evaluate', log, ['report'])],
                'inputs': ['model', 'monitor'],
                'outputs': ['report']
            }
        ],
        'data_flow': [
            {'from': 'Data_Collection.data', 'to': 'SL_Training.data'},
            {'from': 'SL_Training.model', 'to': 'AM_Training.model'},
            {'from': 'Data_Collection.data', 'to': 'AM_Training.data'},
            {'from': 'SL_Training.model', 'to': 'LEC_Evaluation.model'},
            {'from': 'AM_Training.monitor', 'to': 'LEC_Evaluation.monitor'}
        ],
        'iteration_blocks': [
            {
                'name': 'HyperParameter_Search',
                'decision_command': grid_decision('SL_Training', 'train', grid)
            },
            {
                'name': 'Outer_Loop',
                'decision_command': decide(
                    'outer', '--n', outer, '--job', 'Data_Collection',
                    '--activity', 'collect', '--path', 'round'
                )
            }
        ],
        'check_edges': [
            {'from': 'SL_Training', 'to': 'HyperParameter_Search'},
            {'from': 'LEC_Evaluation', 'to': 'Outer_Loop'}
        ],
        'repeat_edges': [
            {'from': 'HyperParameter_Search', 'to': 'SL_Training'},
            {'from': 'Outer_Loop', 'to': 'Data_Collection'}
        ]
    }


def chain(tmp: Path, names: List[str], **config) -> dict:
    """Jobs connected one after the other through a single port"""
    log = Path(tmp, 'spawns.jsonl')
    jobs = []
    for i, n in enumerate(names):
        job = {
            'name': n,
            'activities': [activity(f'{n}.run', log, ['out'], **config.get(n, {}))],
            'outputs': ['out']
        }
        if i:
            job['inputs'] = ['src']
        jobs.append(job)
    return {
        'name': 'Chain',
        'jobs': jobs,
        'data_flow': [
            {'from': f'{a}.out', 'to': f'{b}.src'} for a, b in zip(names, names[1:])
        ]
    }


def diamond(tmp: Path, **config) -> dict:
    """A feeds B and C, which both feed D"""
    log = Path(tmp, 'spawns.jsonl')

    def job(n, inputs):
        return {
            'name': n,
            'activities': [activity(f'{n}.run', log, ['out'], **config.get(n, {}))],
            'inputs': inputs,
            'outputs': ['out']
        }

    return {
        'name': 'Diamond',
        'jobs': [job('A', []), job('B', ['a']), job('C', ['a']), job('D', ['b', 'c'])],
        'data_flow': [
            {'from': 'A.out', 'to': 'B.a'},
            {'from': 'A.out', 'to': 'C.a'},
            {'from': 'B.out', 'to': 'D.b'},
            {'from': 'C.out', 'to': 'D.c'}
        ]
    }


@dataclass
class Invalid:
    label: str
    rule: str
    doc: dict = field(default_factory=dict)


def _job(name: str, inputs=(), outputs=('out',)) -> dict:
    return {
        'name': name,
        'activities': [{'name': 'run', 'command': ['true']}],
        'inputs': list(inputs),
        'outputs': list(outputs)
    }


def _loop_doc(blocks: List[dict], checks: List[tuple], repeats: List[tuple], n: int = 3) -> dict:
    names = [f'J{i}' for i in range(n)]
    jobs = [_job(names[0])] + [_job(x, ['src']) for x in names[1:]]
    return {
        'name': 'Loops',
        'jobs': jobs,
        'data_flow': [{'from': f'{a}.out', 'to': f'{b}.src'} for a, b in zip(names, names[1:])],
        'iteration_blocks': blocks,
        'check_edges': [{'from': a, 'to': b} for a, b in checks],
        'repeat_edges': [{'from': a, 'to': b} for a, b in repeats]
    }


def _block(name: str) -> dict:
    return {'name': name, 'decision_command': ['true']}


invalid: List[Invalid] = [
    Invalid('reversed edge', 'EDGE_DIRECTION', {
        'name': 'W',
        'jobs': [_job('A'), _job('B', ['src'])],
        'data_flow': [{'from': 'B.src', 'to': 'A.out'}, {'from': 'A.out', 'to': 'B.src'}]
    }),
    Invalid('data flow cycle', 'CORE_CYCLE', {
        'name': 'W',
        'jobs': [_job('A', ['src']), _job('B', ['src'])],
        'data_flow': [{'from': 'A.out', 'to': 'B.src'}, {'from': 'B.out', 'to': 'A.src'}]
    }),
    Invalid('data flow self loop', 'CORE_CYCLE', {
        'name': 'W',
        'jobs': [_job('A', ['src'])],
        'data_flow': [{'from': 'A.out', 'to': 'A.src'}]
    }),
    Invalid('block without repeat edge', 'BLOCK_DEGREE', _loop_doc(
        [_block('L')], [('J2', 'L')], []
    )),
    Invalid('block with two check edges', 'BLOCK_DEGREE', _loop_doc(
        [_block('L')], [('J1', 'L'), ('J2', 'L')], [('L', 'J0')]
    )),
    Invalid('identical loop bodies', 'LOOP_OVERLAP', _loop_doc(
        [_block('L'), _block('M')], [('J2', 'L'), ('J2', 'M')], [('L', 'J0'), ('M', 'J0')]
    )),
    Invalid('partially overlapping loop bodies', 'LOOP_OVERLAP', _loop_doc(
        [_block('L'), _block('M')], [('J1', 'L'), ('J2', 'M')], [('L', 'J0'), ('M', 'J1')]
    )),
    Invalid('repeat target after check source', 'LOOP_BODY_EMPTY', _loop_doc(
        [_block('L')], [('J0', 'L')], [('L', 'J2')]
    )),
    Invalid('duplicate job name', 'DUPLICATE_NAME', {
        'name': 'W',
        'jobs': [_job('A'), _job('A')]
    }),
    Invalid('job and block share a name', 'DUPLICATE_NAME', _loop_doc(
        [_block('J1')], [('J1', 'J1')], [('J1', 'J1')]
    )),
    Invalid('edge to unknown job', 'MISSING_REF', {
        'name': 'W',
        'jobs': [_job('A')],
        'data_flow': [{'from': 'A.out', 'to': 'Nowhere.src'}]
    }),
    Invalid('unfed input port', 'MISSING_REF', {
        'name': 'W',
        'jobs': [_job('A', ['src'])]
    }),
    Invalid('check edge to unknown block', 'MISSING_REF', _loop_doc(
        [], [('J2', 'Ghost')], []
    )),
    Invalid('initializer names unknown port', 'MISSING_REF', {
        'name': 'W',
        'jobs': [dict(_job('A'), initializer={'model': {'port': 'nope'}})]
    }),
    Invalid('input fed twice', 'INPUT_FANIN', {
        'name': 'W',
        'jobs': [_job('A'), _job('B'), _job('C', ['src'])],
        'data_flow': [{'from': 'A.out', 'to': 'C.src'}, {'from': 'B.out', 'to': 'C.src'}]
    }),
    Invalid('empty activities block', 'EMPTY_ACTIVITIES', {
        'name': 'W',
        'jobs': [dict(_job('A'), activities=[])]
    }),
    Invalid('no jobs', 'EMPTY_WORKFLOW', {
        'name': 'W',
        'jobs': []
    }),
    Invalid('campaign hides a config key', 'CAMPAIGN_KEY', {
        'name': 'W',
        'jobs': [dict(_job('A'), activities=[{
            'name': 'run', 'command': ['true'],
            'config': {'scenario': 'mine'}, 'campaign': [{'weather': 'fog'}]
        }])]
    }),
]

invalid_by_rule: Dict[str, List[Invalid]] = {}
for _x in invalid:
    invalid_by_rule.setdefault(_x.rule, []).append(_x)


def check_order(journal, plan) -> int:
    """
    Assert that no task of ``plan`` started before all of its dependencies
    ended successfully, and that no task started after a dependency failed.
    Returns the number of dependency edges checked.
    """
    revisions = {}
    for x in journal.revisions():
        revisions.setdefault(x.task, []).append(x)
    checked = 0
    for node in plan.nodes:
        starts = [x.seq for x in revisions.get(node.id, []) if x.state.value == 'Running']
        for dep in node.depends_on:
            ends = [x.seq for x in revisions.get(dep, []) if x.state.successful]
            failed = [x.seq for x in revisions.get(dep, []) if x.state.value == 'Failed']
            for s in starts:
                assert any(e < s for e in ends), f'{node.id} started before {dep} ended'
                assert not any(f < s for f in failed), f'{node.id} started after {dep} failed'
            checked += 1
    return checked

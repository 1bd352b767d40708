from typing import Iterable, Type

import jsonschema
from jsonschema.exceptions import best_match

from flow_as_code.exceptions import WorkflowSchemaError

__all__ = [
    'WORKFLOW', 'PLAN', 'DECISION_REQUEST', 'DECISION_RESPONSE',
    'validate', 'json_path'
]

IDENTIFIER = {
    "description": "name of a job, port, activity or iteration block",
    "type": "string",
    "pattern": "^[A-Za-z_][A-Za-z0-9_]*$",
    "examples": [
        "RL_Exploration",
        "trained_lec"
    ]
}

COMMAND = {
    "description": "external executable followed by its arguments",
    "type": "array",
    "items": {"type": "string"},
    "minItems": 1
}

PORT_REF = {
    "description": "output or input port reference, written as Job.port",
    "type": "string",
    "pattern": "^[A-Za-z_][A-Za-z0-9_]*\\.[A-Za-z_][A-Za-z0-9_]*$"
}

ITERATION = {
    "description": "iteration vector, outermost loop first",
    "type": "array",
    "items": {
        "type": "array",
        "items": [{"type": "string"}, {"type": "integer", "minimum": 0}],
        "minItems": 2,
        "maxItems": 2
    }
}

ACTIVITY = {
    "type": "object",
    "properties": {
        "name": {"$ref": "#/definitions/identifier"},
        "command": {"$ref": "#/definitions/command"},
        "config": {"type": "object"},
        "campaign": {
            "description": "scenario documents, one task instance per scenario",
            "type": "array",
            "items": {"type": "object"},
            "minItems": 1
        }
    },
    "required": ["name", "command"],
    "additionalProperties": False
}

BINDING = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"port": {"$ref": "#/definitions/identifier"}},
            "required": ["port"],
            "additionalProperties": False
        },
        {
            "type": "object",
            "properties": {"literal": {}},
            "required": ["literal"],
            "additionalProperties": False
        }
    ]
}

JOB = {
    "type": "object",
    "properties": {
        "name": {"$ref": "#/definitions/identifier"},
        "activities": {"type": "array", "items": ACTIVITY},
        "initializer": {
            "description": "dot-separated config path mapped to a binding source",
            "type": "object",
            "additionalProperties": BINDING
        },
        "inputs": {"type": "array", "items": {"$ref": "#/definitions/identifier"}},
        "outputs": {"type": "array", "items": {"$ref": "#/definitions/identifier"}}
    },
    "required": ["name", "activities"],
    "additionalProperties": False
}

WORKFLOW = {
    "title": "Flow as Code: Workflow Definition",
    "description": "jobs, ports, edges and iteration blocks of one workflow",
    "type": "object",
    "definitions": {
        "identifier": IDENTIFIER,
        "command": COMMAND,
        "port_ref": PORT_REF
    },
    "properties": {
        "name": {"$ref": "#/definitions/identifier"},
        "jobs": {"type": "array", "items": JOB},
        "data_flow": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "from": {"$ref": "#/definitions/port_ref"},
                    "to": {"$ref": "#/definitions/port_ref"}
                },
                "required": ["from", "to"],
                "additionalProperties": False
            }
        },
        "iteration_blocks": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "name": {"$ref": "#/definitions/identifier"},
                    "decision_command": {"$ref": "#/definitions/command"},
                    "max_iterations": {"type": "integer", "minimum": 1}
                },
                "required": ["name", "decision_command"],
                "additionalProperties": False
            }
        },
        "check_edges": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "from": {"$ref": "#/definitions/identifier"},
                    "to": {"$ref": "#/definitions/identifier"}
                },
                "required": ["from", "to"],
                "additionalProperties": False
            }
        },
        "repeat_edges": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "from": {"$ref": "#/definitions/identifier"},
                    "to": {"$ref": "#/definitions/identifier"}
                },
                "required": ["from", "to"],
                "additionalProperties": False
            }
        }
    },
    "required": ["name", "jobs"],
    "additionalProperties": False
}

PLAN = {
    "title": "Flow as Code: Task Plan",
    "description": "acyclic task graph for one iteration, handed to the executor",
    "type": "object",
    "definitions": {
        "identifier": IDENTIFIER,
        "command": COMMAND,
        "iteration": ITERATION
    },
    "properties": {
        "run_id": {"type": "string"},
        "iteration": {"$ref": "#/definitions/iteration"},
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "id": {"type": "string"},
                    "job": {"$ref": "#/definitions/identifier"},
                    "activity": {"$ref": "#/definitions/identifier"},
                    "scenario": {"type": ["integer", "null"]},
                    "iteration": {"$ref": "#/definitions/iteration"},
                    "command": {"$ref": "#/definitions/command"},
                    "config": {"type": "object"},
                    "depends_on": {"type": "array", "items": {"type": "string"}},
                    "inputs": {"type": "object", "additionalProperties": {"type": "string"}},
                    "outputs": {"type": "array", "items": {"type": "string"}},
                    "input_bindings": {"type": "object"}
                },
                "required": ["id", "job", "activity", "command", "config", "depends_on"],
                "additionalProperties": False
            }
        },
        "decision_points": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "block": {"$ref": "#/definitions/identifier"},
                    "after": {"type": "array", "items": {"type": "string"}}
                },
                "required": ["block", "after"],
                "additionalProperties": False
            }
        }
    },
    "required": ["run_id", "iteration", "nodes", "decision_points"],
    "additionalProperties": False
}

ARTIFACT_REF = {
    "type": "object",
    "properties": {
        "artifact": {"type": "string", "pattern": "^[a-f0-9]{64}$"},
        "path": {"type": "string"}
    },
    "required": ["artifact", "path"]
}

DECISION_REQUEST = {
    "title": "Flow as Code: Decision Request",
    "description": "document written to a decision command's standard input",
    "type": "object",
    "definitions": {
        "iteration": ITERATION
    },
    "properties": {
        "workflow": {"type": "string"},
        "block": {"type": "string"},
        "iteration": {"type": "integer", "minimum": 0},
        "history": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "iteration": {"$ref": "#/definitions/iteration"},
                        "task": {"type": "string"},
                        "outputs": {"type": "object", "additionalProperties": ARTIFACT_REF}
                    },
                    "required": ["iteration", "outputs"]
                }
            }
        },
        "persist": {"type": "object"},
        "config": {"type": "object"}
    },
    "required": ["workflow", "block", "iteration", "history", "persist", "config"]
}

DECISION_RESPONSE = {
    "title": "Flow as Code: Decision Response",
    "description": "document read from a decision command's standard output",
    "type": "object",
    "properties": {
        "action": {"enum": ["repeat", "stop"]},
        "parameter_updates": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "job": {"type": "string"},
                    "activity": {"type": "string"},
                    "path": {"type": "string", "minLength": 1},
                    "value": {}
                },
                "required": ["job", "activity", "path", "value"],
                "additionalProperties": False
            }
        },
        "persist": {"type": "object"}
    },
    "required": ["action"],
    "additionalProperties": False
}


def json_path(parts: Iterable) -> str:
    """Render a jsonschema error path as ``$.jobs[0].name``"""
    p = '$'
    for x in parts:
        p += f'[{x}]' if isinstance(x, int) else f'.{x}'
    return p


def validate(instance, schema: dict, error: Type[Exception] = WorkflowSchemaError):
    """
    Validate document

    Check a document against one of the schemas in this module, raising the
    most relevant violation as ``error``. The error class is constructed with
    the message and the JSON path of the offending element.
    """
    validator = jsonschema.Draft7Validator(schema)
    e = best_match(validator.iter_errors(instance))
    if e is not None:
        raise error(e.message, json_path(e.absolute_path))

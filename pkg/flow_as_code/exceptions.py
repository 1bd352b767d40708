class FlowError(Exception):
    pass


class WorkflowError(FlowError):
    pass


class WorkflowSyntaxError(WorkflowError):
    def __init__(self, msg: str, lineno: int = None, colno: int = None):
        self.lineno = lineno
        self.colno = colno
        if lineno is not None:
            msg = f"{msg} (line {lineno}, column {colno})"
        super().__init__(msg)


class WorkflowSchemaError(WorkflowError):
    def __init__(self, msg: str, path: str = '$'):
        self.path = path
        super().__init__(f"{path}: {msg}")


class InvalidWorkflow(WorkflowError):
    def __init__(self, report):
        self.report = report
        super().__init__(
            'workflow failed validation:\n' +
            '\n'.join(str(v) for v in report)
        )


class PlanError(FlowError):
    pass


class UnknownLoop(PlanError):
    pass


class PlanCycle(PlanError):
    pass


class DecisionError(FlowError):
    """Failure of an iteration block's decision command, tagged by code"""

    def __init__(self, code: str, msg: str):
        self.code = code
        super().__init__(f"{code}: {msg}")


class BadPatch(DecisionError, PlanError):
    def __init__(self, msg: str):
        super().__init__('DECISION_BAD_PATCH', msg)


class StoreError(FlowError):
    code = 'STORE_ERROR'


class ArtifactNotFound(StoreError):
    code = 'NOT_FOUND'


class IntegrityError(StoreError):
    code = 'INTEGRITY_ERROR'


class UnresolvedPort(StoreError):
    code = 'UNRESOLVED'


class JournalError(FlowError):
    pass


class UnknownRun(JournalError):
    pass


class JournalCorrupt(JournalError):
    pass


class RunLocked(JournalError):
    pass

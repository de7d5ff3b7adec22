"""
Workbench exceptions and their command-line exit codes
"""


class WorkbenchError(Exception):
    """Base class for every failure the workbench reports"""

    exit_code = 1

    def diagnostic(self) -> str:
        """Single-line machine-parseable description"""
        message = str(self).replace('"', "'").replace('\n', ' ')
        return f'error code={self.exit_code} kind={type(self).__name__} message="{message}"'


class ConfigurationError(WorkbenchError):
    """Invalid configuration, shapes or arguments"""

    exit_code = 2


class UnsupportedOpError(WorkbenchError):
    """An op without the derivative rule a computation needs"""

    exit_code = 2


class RangeError(WorkbenchError):
    """Argument outside its admissible interval"""

    exit_code = 2


class PlanError(WorkbenchError):
    """Fault plan that cannot be applied to the model"""

    exit_code = 2


class NumericError(WorkbenchError):
    """Non-finite value produced during a computation"""

    exit_code = 3

    def __init__(self, message, op_id=None, checkpoint=None):
        super().__init__(message)
        self.op_id = op_id
        # last good parameters when a training run diverges
        self.checkpoint = checkpoint


class StateError(WorkbenchError):
    """Object used in a state that no longer supports the request"""

    exit_code = 3


class CheckpointError(WorkbenchError):
    """Checkpoint or artifact I/O failure"""

    exit_code = 4

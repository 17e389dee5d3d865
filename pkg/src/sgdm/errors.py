"""Exception types shared by every stage.

Each class carries the process exit code the ``sgdm`` command uses for it.
"""


class SgdmError(Exception):
    exit_code = 1


class InvalidInput(SgdmError, ValueError):
    exit_code = 2


class InvalidState(SgdmError, RuntimeError):
    exit_code = 3


class IntegrityError(SgdmError):
    exit_code = 4

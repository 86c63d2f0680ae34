"""Exception types shared across the toolkit.

The CLI maps each class to its own exit code.
"""


class DjgpError(Exception):
    exit_code = 1


class InputError(DjgpError, ValueError):
    exit_code = 2


class NumericalError(DjgpError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class StorageError(DjgpError, OSError):
    exit_code = 4

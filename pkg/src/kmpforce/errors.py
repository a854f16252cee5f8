"""Exception hierarchy shared by the pipeline stages.

Each class carries the process exit code the command line maps it to.
"""


class KMPForceError(Exception):
    exit_code = 1


class DataError(KMPForceError):
    """Malformed, missing or inconsistent input data."""

    exit_code = 3


class NumericalError(KMPForceError):
    """A factorization or fit failed numerically."""

    exit_code = 4


class DivergenceError(KMPForceError):
    """The closed-loop simulation left its safe envelope.

    ``log`` holds the records produced up to the abort.
    """

    exit_code = 5

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log

"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class PipelineError(Exception):
    exit_code = 1


class ValidationError(PipelineError, ValueError):
    """Bad input: wrong shape, out-of-range value, malformed file."""

    exit_code = 2


class SchemaError(ValidationError):
    """A file or remote payload does not follow its documented schema."""


class VersionMismatchError(ValidationError):
    """Artifacts produced under different knowledge-base or model versions."""


class UpstreamMissingError(PipelineError, FileNotFoundError):
    """A stage needs an output that an earlier stage has not produced."""

    exit_code = 3


class NumericError(PipelineError, ArithmeticError):
    """Non-finite losses or parameters, degenerate metric inputs."""

    exit_code = 4


class RemoteError(PipelineError, ConnectionError):
    """Network failure talking to an external findings/reasoning service."""

    exit_code = 3

    def __init__(self, message, scan_ref=None):
        super().__init__(message if scan_ref is None else f"{message} (scan_ref={scan_ref})")
        self.scan_ref = scan_ref

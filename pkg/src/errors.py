class DNASError(Exception):
    """Base error; `code` carries the stable error name used in messages and logs."""

    code = "DNAS_ERROR"

    def __init__(self, message=""):
        super().__init__(f"{self.code}: {message}" if message else self.code)


class ShapeMismatchError(DNASError, ValueError):
    code = "SHAPE_MISMATCH"


class BadTargetError(DNASError, ValueError):
    code = "BAD_TARGET"


class DisconnectedError(DNASError, ValueError):
    code = "DISCONNECTED"


class InvalidCellError(DNASError, ValueError):
    code = "INVALID_CELL"

    def __init__(self, message="", line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnrepairableError(DNASError, ValueError):
    code = "UNREPAIRABLE"


class ParseError(DNASError, ValueError):
    code = "PARSE_ERROR"

    def __init__(self, message="", line=None):
        self.line = line
        super().__init__(f"line {line}: {message}")


class NotInBenchError(DNASError, KeyError):
    code = "NOT_IN_BENCH"


class InsufficientRecordsError(DNASError, ValueError):
    code = "INSUFFICIENT_RECORDS"


class ConfigError(DNASError, ValueError):
    """Invalid configuration; the CLI exits with status 2 and names `flag`."""

    code = "CONFIG_ERROR"

    def __init__(self, flag, message):
        self.flag = flag
        super().__init__(f"{flag}: {message}")


class MissingCheckpointError(DNASError, FileNotFoundError):
    code = "MISSING_CHECKPOINT"

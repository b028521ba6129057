"""Exception hierarchy.

Every error carries a short machine-readable ``code`` and the process exit
status the command line uses for it (2 config, 3 data, 4 numeric).
"""


class PbpError(Exception):
    code = "PBP_ERROR"
    exit_code = 1


class InvalidInputError(PbpError, ValueError):
    code = "INVALID_INPUT"
    exit_code = 3


class ContractError(PbpError, ValueError):
    """An argument violates a documented precondition (e.g. out-of-grid coordinates)."""

    code = "CONTRACT_VIOLATION"
    exit_code = 4


class ConfigError(PbpError, ValueError):
    code = "CONFIG_ERROR"
    exit_code = 2

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ArchitectureMismatchError(ConfigError):
    code = "ARCH_MISMATCH"

    def __init__(self, message):
        super().__init__(None, message)


class DataError(PbpError):
    code = "DATA_ERROR"
    exit_code = 3


class ParseError(DataError, ValueError):
    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class DatasetError(DataError):
    code = "DATASET_ERROR"


class CheckpointFormatError(DataError):
    code = "CHECKPOINT_FORMAT"


class EvaluationError(DataError):
    code = "EVAL_ERROR"


class NumericError(PbpError, ArithmeticError):
    code = "NUMERIC_FAILURE"
    exit_code = 4

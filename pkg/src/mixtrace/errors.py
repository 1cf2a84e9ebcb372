"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class MixtraceError(Exception):
    exit_code = 1


class UsageError(MixtraceError):
    exit_code = 2


class ValidationError(MixtraceError):
    """Bad configuration, arguments or input schema."""

    exit_code = 3


class DimensionError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, line_no: int, field: str, message: str):
        super().__init__(f"line {line_no}: field {field!r}: {message}")
        self.line_no = line_no
        self.field = field


class SchemaError(ValidationError):
    pass


class IntegrityError(MixtraceError):
    exit_code = 4


class ClassificationError(IntegrityError):
    def __init__(self, tx_hash: str, message: str):
        super().__init__(f"{tx_hash}: {message}")
        self.tx_hash = tx_hash


class UndefinedMetricError(MixtraceError):
    exit_code = 4

    def __init__(self, metric: str, message: str = "undefined for this label set"):
        super().__init__(f"{metric}: {message}")
        self.metric = metric


class NumericError(MixtraceError):
    exit_code = 5

    def __init__(self, op: str, message: str = "non-finite value"):
        super().__init__(f"{op}: {message}")
        self.op = op


class TrainingError(MixtraceError):
    exit_code = 4

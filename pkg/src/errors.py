from typing import Optional


class AuditError(Exception):
    pass


class ConfigError(AuditError):
    pass


class CorpusFormatError(AuditError):
    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class DictionaryExhaustedError(AuditError):
    def __init__(self, what: str, needed: int, available: int):
        self.needed = needed
        self.available = available
        super().__init__(f"{what}: need {needed} names, dictionary has {available} (short by {needed - available})")


class ShapeError(AuditError, ValueError):
    pass


class TrainingError(AuditError):
    def __init__(self, message: str, item_index: Optional[int] = None):
        self.item_index = item_index
        super().__init__(message)


class ModelFormatError(AuditError):
    pass


class StageError(AuditError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")

"""Exception types shared across the package."""


class RetClipError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(RetClipError, ValueError):
    pass


class NumericError(RetClipError, ArithmeticError):
    pass


class ContractError(RetClipError, ValueError):
    """An operation was called outside its documented preconditions."""


class ConfigError(RetClipError, ValueError):
    pass


class VocabularyError(RetClipError, ValueError):
    pass


class IngestionError(RetClipError, OSError):
    pass


class ManifestParseError(RetClipError, ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class CheckpointError(RetClipError):
    pass


class CheckpointFormatError(CheckpointError, ValueError):
    pass


class CheckpointVersionError(CheckpointError, ValueError):
    pass


class CheckpointBoundsError(CheckpointError, ValueError):
    pass


class SplitError(RetClipError, ValueError):
    pass


class UndefinedMetricError(RetClipError, ValueError):
    pass


class CheckpointTruncatedError(CheckpointError, ValueError):
    pass


class NonFiniteLossError(NumericError):
    pass

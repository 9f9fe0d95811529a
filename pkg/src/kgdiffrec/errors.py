"""
Exception hierarchy for kgdiffrec

Every error raised on purpose by the library derives from KgDiffRecError so
the CLI can map it to an exit code (see cli.app.EXIT_CODES).
"""
from typing import Optional


class KgDiffRecError(Exception):
    """Base class for all library errors"""


class DataFormatError(KgDiffRecError, ValueError):
    """
    A data file could not be parsed

    Attributes:
        path: File that failed to parse
        line_number: 1-based line number of the offending line (None if not line-specific)
    """

    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        location = ''
        if path is not None:
            location = f"{path}:"
            if line_number is not None:
                location += f"{line_number}:"
            location += ' '
        super().__init__(f"{location}{message}")
        self.path = path
        self.line_number = line_number


class EmptyGraphError(KgDiffRecError, ValueError):
    """A graph (or train set) that must contain edges is empty"""


class KnowledgeGraphReferenceError(KgDiffRecError, LookupError):
    """A knowledge-graph triple references an item unknown to the interaction graph"""


class ParameterError(KgDiffRecError, ValueError):
    """A numeric parameter is outside its valid range"""


class DivergenceError(KgDiffRecError, RuntimeError):
    """
    Training produced a non-finite loss or gradient

    Attributes:
        name: Loss term or parameter that went non-finite
    """

    def __init__(self, name: str, detail: str = ''):
        message = f"Non-finite value in '{name}'"
        if detail:
            message += f": {detail}"
        super().__init__(message)
        self.name = name


class CheckpointError(KgDiffRecError, ValueError):
    """A checkpoint file is missing, truncated, or has an unsupported header"""


class ConfigurationError(KgDiffRecError, ValueError):
    """Run configuration is inconsistent (conflicting flags, unknown config keys)"""

"""
Error types for the EmoAug toolkit.
Every library failure raises one of these; entry points map them to exit codes.
"""

from typing import Optional, Sequence


class EmoAugError(Exception):
    """Base class for all toolkit errors."""


class AudioIOError(EmoAugError, OSError):
    """Audio file missing or unreadable."""


class AudioFormatError(EmoAugError, ValueError):
    """Audio file readable but in an unsupported encoding or layout."""


class LengthError(EmoAugError, ValueError):
    """Input too short (or empty) for the requested operation."""


class ParameterError(EmoAugError, ValueError):
    """Invalid numeric parameter passed to an operation."""


class ConfigError(EmoAugError, ValueError):
    """Invalid experiment configuration.

    Args:
        message: Human readable description
        field: Dotted path of the offending config field, if known
    """

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DataError(EmoAugError, ValueError):
    """Corpus or manifest content violates an operation's precondition."""


class ContractError(EmoAugError, ValueError):
    """Caller broke an operation contract (wrong kind of input)."""


class ShapeError(EmoAugError, ValueError):
    """Tensor shape incompatible with a layer; reports both shapes."""

    def __init__(self, message: str, expected: Sequence, actual: Sequence):
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{message} (expected {self.expected}, got {self.actual})")


class DivergenceError(EmoAugError, RuntimeError):
    """Non-finite values appeared during a forward pass or training step."""
